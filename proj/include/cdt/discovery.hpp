#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cdt/circuit.hpp"
#include "cdt/decomp.hpp"
#include "cdt/tasks.hpp"

namespace cdt {

struct DiscoveryConfig {
  double percentile = 95.0;
  double epsilon = 1e-3;
  int max_iterations = 10;
  int samples = 20;
  Granularity granularity = Granularity::head;
  AblationScheme ablation = AblationScheme::mean;
  bool prune = true;
  int workers = 1;
  StabilizeMode stabilize = StabilizeMode::by_depth;

  // Throws InputError when a field is out of range.
  void validate() const;
};

struct RelevanceMap {
  int iteration = 0;
  TargetSpec target;
  // Ranking score per source, averaged over samples: |metric on the
  // relevant logits| against the model output, the summed norm ratio against
  // internal targets.
  std::map<Node, double> scores;
  // Mean signed metric per source; empty for internal targets.
  std::map<Node, double> signed_scores;
  // Sources whose ratio had a zero denominator, before clamping.
  std::vector<Node> unbounded;

  bool empty() const noexcept { return scores.empty(); }
};

// Sum over targets of l1(rel) / l1(irrel). A target with l1(irrel) == 0 and
// l1(rel) > 0 makes the result +inf; a target with both zero adds nothing.
double relevance_internal(std::span<const Decomposition> targets);

// The task metric evaluated on the relevant part of the logits; `rel_logits`
// is the logits row at the sample's end position.
double relevance_output(std::span<const float> rel_logits, const TaskSpec& task, const Sample& sample);

// Scores every head strictly upstream of `target` (every head for the model
// output; every head at every position at position granularity). Returns an
// empty map when nothing is upstream.
RelevanceMap scan_sources(const Model& model, const TaskSpec& task, std::span<const Sample> samples,
                          const TargetSpec& target, const MeanCache* means, const DiscoveryConfig& cfg,
                          int iteration = 1);

// Divides each score by the mean |score| of its layer. Layers whose mean is
// 0 are left as they are.
std::map<Node, double> normalize_by_layer(const std::map<Node, double>& scores);

// Nodes scoring at least the given percentile of all scores. Percentiles
// interpolate linearly between order statistics: the p-th percentile of n
// sorted values sits at rank p/100 * (n - 1). Ties at the cutoff are kept.
// Result is ordered by descending score, then by node.
std::vector<Node> select_top(const std::map<Node, double>& scores, double percentile);

// Repeatedly sweeps the circuit's nodes in ascending provenance score and
// drops a node whenever that strictly raises `evaluator`, until a sweep drops
// nothing.
Circuit greedy_prune(Circuit circuit, const std::function<double(const Circuit&)>& evaluator,
                     std::vector<Node>* removed = nullptr);

struct IterationTrace {
  int iteration = 0;
  std::vector<Node> targets;  // empty: model output
  std::map<Node, double> scores;
  std::map<Node, double> normalized;
  std::vector<Node> unbounded;
  std::vector<Node> selected;
  std::vector<Node> pruned;
  std::vector<Node> circuit;
  double circuit_metric = 0.0;
  double model_metric = 0.0;
  std::string halt;  // empty unless the loop stopped after this iteration
  double scan_seconds = 0.0;
  double iteration_seconds = 0.0;
};

struct DiscoveryResult {
  Circuit circuit;
  std::vector<IterationTrace> trace;
  std::string halt_reason;  // epsilon | no_improvement | no_upstream | max_iterations
  bool truncated = false;
  double model_metric = 0.0;
  double circuit_metric = 0.0;
  double seconds = 0.0;
};

// Iteratively grows a circuit from the model output backwards. Means for
// ablation come from task.corrupt; the metric is averaged over the first
// cfg.samples clean samples.
DiscoveryResult discover_circuit(const Model& model, const TaskSpec& task, const DiscoveryConfig& cfg);

// Circuit JSON: {"granularity", "ablation", "nodes": [{"layer", "head", "pos"}], "trace": [...]}.
// Timings are left out so that equal runs produce equal files.
std::string circuit_to_json(const Circuit& circuit, std::span<const IterationTrace> trace = {});
Circuit circuit_from_json(const std::string& text);

}  // namespace cdt
