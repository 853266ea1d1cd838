#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "cdt/circuit.hpp"
#include "cdt/tasks.hpp"

namespace cdt {

// Mean task metric over `samples` with everything outside `circuit` ablated.
double circuit_metric(const Model& model, const TaskSpec& task, std::span<const Sample> samples,
                      const Circuit& circuit, const MeanCache* means);
// Mean task metric of the unablated model.
double model_metric(const Model& model, const TaskSpec& task, std::span<const Sample> samples);
// Fraction of samples the task counts as correct, with everything outside
// `circuit` ablated (nullptr: unablated).
double correct_rate(const Model& model, const TaskSpec& task, std::span<const Sample> samples,
                    const Circuit* circuit, const MeanCache* means);

struct FaithfulnessReport {
  double m_C = 0.0;
  double m_empty = 0.0;
  double m_M = 0.0;
  double faithfulness = 0.0;
};

// (m_C - m_empty) / (m_M - m_empty). Throws NumericError when m_M and
// m_empty coincide.
double faithfulness_ratio(double m_C, double m_empty, double m_M);

// Evaluated on task.eval. m_empty ablates every head under the circuit's
// scheme; embeddings and MLPs stay intact.
FaithfulnessReport faithfulness(const Circuit& circuit, const Model& model, const TaskSpec& task, const MeanCache* means);

// The two reference points shared by many faithfulness evaluations.
struct FaithfulnessBaseline {
  double m_empty = 0.0;
  double m_M = 0.0;
};
FaithfulnessBaseline faithfulness_baseline(const Model& model, const TaskSpec& task, Granularity granularity,
                                           AblationScheme scheme, const MeanCache* means);

struct RocResult {
  double auc = 0.0;
  std::vector<std::pair<double, double>> points;  // (fpr, tpr), sorted, anchored at (0,0) and (1,1)
};

// Trapezoid area under (fpr, tpr) points after sorting and anchoring.
RocResult roc_from_points(std::vector<std::pair<double, double>> points);

// Threshold sweep over head scores with the reference heads as positives.
// Positional scores are max-pooled to their head; heads without a score rank
// below every scored head. Throws NodeRangeError for a reference head outside
// the model.
RocResult roc_from_scores(const std::map<Node, double>& scores, std::span<const Node> reference,
                          const ModelConfig& config);

// One (fpr, tpr) point per discovered circuit, e.g. a sweep over selection
// percentiles.
RocResult roc_from_circuits(std::span<const Circuit> circuits, std::span<const Node> reference,
                            const ModelConfig& config);

struct RandomCircuitTest {
  std::vector<int> sizes;
  int repeats = 0;
  double candidate_faithfulness = 0.0;
  std::vector<double> beaten_fraction;                // per size
  std::vector<std::vector<double>> random_faithfulness;  // per size, per repeat
  double q_star = 0.0;                                // smallest beaten fraction
};

// For each size, draws `repeats` uniform subsets of the node universe at the
// circuit's granularity and counts those whose faithfulness is strictly
// below the candidate's.
RandomCircuitTest random_circuit_test(const Circuit& circuit, const Model& model, const TaskSpec& task,
                                      const MeanCache* means, std::span<const int> sizes, int repeats,
                                      std::uint64_t seed, int workers = 1);

struct CurvePoint {
  int k = 0;
  double faithfulness = 0.0;
  double baseline_faithfulness = 0.0;
};

// Faithfulness of the top-k nodes of `ranked` for k = 0, stride, 2*stride,
// ..., N, next to a baseline that adds the same nodes in a random order.
std::vector<CurvePoint> faithfulness_curve(std::span<const Node> ranked, const Model& model, const TaskSpec& task,
                                           const MeanCache* means, Granularity granularity, AblationScheme scheme,
                                           int stride, std::uint64_t seed, int workers = 1);

void write_curve_csv(const std::filesystem::path& path, std::span<const CurvePoint> curve);

}  // namespace cdt
