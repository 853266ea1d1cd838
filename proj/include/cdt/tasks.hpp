#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdt/io.hpp"
#include "cdt/model.hpp"

namespace cdt {

// Metrics read one row of logits: the row at the sample's "end" position
// (the last token when the sample has no such label).
using MetricFn = std::function<double(std::span<const float> logits, const Sample& sample)>;
using CorrectFn = std::function<bool(std::span<const float> logits, const Sample& sample)>;

// answer_tokens[0] - wrong_tokens[0]
double logit_diff(std::span<const float> logits, const Sample& s);
// Softmax over the whole row; sum over answer_tokens minus sum over wrong_tokens.
double prob_diff(std::span<const float> logits, const Sample& s);
// answer_tokens[0] - max over wrong_tokens.
double logit_minus_max(std::span<const float> logits, const Sample& s);
// answer_tokens[0] - mean over wrong_tokens.
double logit_vs_mean(std::span<const float> logits, const Sample& s);

// Answer logit strictly above every wrong logit.
bool beats_all_wrong(std::span<const float> logits, const Sample& s);
// Among answer_tokens and wrong_tokens, the argmax is an answer token.
bool argmax_in_answers(std::span<const float> logits, const Sample& s);

MetricFn metric_by_name(const std::string& name);
CorrectFn correct_by_name(const std::string& name);

int end_position(const Sample& s);

struct TaskSpec {
  std::string name;
  std::string metric_name;
  std::vector<Sample> clean;    // discovery samples
  std::vector<Sample> eval;     // evaluation samples
  std::vector<Sample> corrupt;  // reference distribution for mean ablation
  MetricFn metric;
  CorrectFn correct;
  std::optional<std::vector<Node>> reference;

  // Length shared by every sample. Throws InputError when samples are ragged
  // or disagree on the end position.
  int seq_len() const;
  void validate(const ModelConfig& config) const;

  double metric_on(const Tensor& logits, const Sample& s) const;
  bool correct_on(const Tensor& logits, const Sample& s) const;
};

// Toy vocabularies. Every generator emits token ids below its vocab size.
inline constexpr int kIoiVocab = 50;
inline constexpr int kGreaterThanVocab = 130;
inline constexpr int kDocstringVocab = 90;

TaskSpec gen_ioi(int n, std::uint64_t seed, int n_eval = 100, int n_corrupt = 100);
TaskSpec gen_greater_than(int n, std::uint64_t seed, int n_eval = 100, int n_corrupt = 100);
TaskSpec gen_docstring(int n, std::uint64_t seed, int n_eval = 100, int n_corrupt = 100);

// Duplicate completion over the planted model's vocabulary:
// BOS t1 .. t8 A, where A = t_i for some i, answered by t_{i+1}.
inline constexpr int kPlantedVocab = 12;
inline constexpr int kPlantedSeqLen = 10;
TaskSpec gen_planted_task(int n, std::uint64_t seed, int n_eval = 100, int n_corrupt = 100);

// Loads a task directory: task.json with {"name", "metric"} plus clean.jsonl,
// corrupt.jsonl and optionally eval.jsonl (defaults to the clean samples).
TaskSpec load_task_dir(const std::string& dir);
void save_task_dir(const TaskSpec& task, const std::string& dir);

TaskSpec make_task(const std::string& name, int n, std::uint64_t seed, int n_eval = 100, int n_corrupt = 100);

// Drops evaluation samples the model gets wrong.
TaskSpec filter_correct(const Model& model, TaskSpec task);

// Published manual circuits, keyed "ioi", "greater_than", "docstring".
const std::map<std::string, std::vector<Node>>& reference_circuits();

struct PlantedModel {
  Model model;
  std::vector<Node> circuit;  // {previous-token head, induction head}
  Node prev_head;
  Node induction_head;
};

// Two-layer, four-head attention-only model solving the duplicate
// completion task with a previous-token head and an induction head. The two
// heads' indices and the other six heads' weights depend on the seed; the
// other heads write only into a subspace the unembedding ignores.
PlantedModel build_planted_model(std::uint64_t seed);

// Model with Gaussian weights, used for property tests.
Model random_model(const ModelConfig& config, std::uint64_t seed, float weight_scale = 0.5f, bool biases = true);

}  // namespace cdt
