#include "cdt/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "cdt/error.hpp"
#include "cdt/random.hpp"

namespace cdt {

namespace {

float token_logit(std::span<const float> logits, int tok) {
  if (tok < 0 || static_cast<std::size_t>(tok) >= logits.size()) {
    throw InputError("token " + std::to_string(tok) + " outside a vocabulary of " + std::to_string(logits.size()));
  }
  return logits[static_cast<std::size_t>(tok)];
}

void require_answer(const Sample& s, bool need_wrong = true) {
  if (s.answer_tokens.empty()) throw InputError("sample has no answer token");
  if (need_wrong && s.wrong_tokens.empty()) throw InputError("sample has no wrong token");
}

}  // namespace

double logit_diff(std::span<const float> logits, const Sample& s) {
  require_answer(s);
  return static_cast<double>(token_logit(logits, s.answer_tokens[0])) - token_logit(logits, s.wrong_tokens[0]);
}

double prob_diff(std::span<const float> logits, const Sample& s) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float v : logits) mx = std::max(mx, static_cast<double>(v));
  double z = 0.0;
  for (float v : logits) z += std::exp(static_cast<double>(v) - mx);
  auto p = [&](int tok) { return std::exp(static_cast<double>(token_logit(logits, tok)) - mx) / z; };
  double out = 0.0;
  for (int t : s.answer_tokens) out += p(t);
  for (int t : s.wrong_tokens) out -= p(t);
  return out;
}

double logit_minus_max(std::span<const float> logits, const Sample& s) {
  require_answer(s);
  double mx = -std::numeric_limits<double>::infinity();
  for (int t : s.wrong_tokens) mx = std::max(mx, static_cast<double>(token_logit(logits, t)));
  return token_logit(logits, s.answer_tokens[0]) - mx;
}

double logit_vs_mean(std::span<const float> logits, const Sample& s) {
  require_answer(s);
  double sum = 0.0;
  for (int t : s.wrong_tokens) sum += token_logit(logits, t);
  return token_logit(logits, s.answer_tokens[0]) - sum / static_cast<double>(s.wrong_tokens.size());
}

bool beats_all_wrong(std::span<const float> logits, const Sample& s) {
  require_answer(s);
  const float a = token_logit(logits, s.answer_tokens[0]);
  for (int t : s.wrong_tokens)
    if (token_logit(logits, t) >= a) return false;
  return true;
}

bool argmax_in_answers(std::span<const float> logits, const Sample& s) {
  require_answer(s, false);
  int best = -1;
  float best_v = -std::numeric_limits<float>::infinity();
  auto consider = [&](int t) {
    const float v = token_logit(logits, t);
    if (best < 0 || v > best_v) {
      best = t;
      best_v = v;
    }
  };
  for (int t : s.answer_tokens) consider(t);
  for (int t : s.wrong_tokens) consider(t);
  return std::find(s.answer_tokens.begin(), s.answer_tokens.end(), best) != s.answer_tokens.end();
}

MetricFn metric_by_name(const std::string& name) {
  if (name == "logit_diff") return logit_diff;
  if (name == "prob_diff") return prob_diff;
  if (name == "logit_minus_max") return logit_minus_max;
  if (name == "logit_vs_mean") return logit_vs_mean;
  throw InputError("unknown metric '" + name + "'");
}

CorrectFn correct_by_name(const std::string& name) {
  if (name == "prob_diff") return argmax_in_answers;
  if (name == "logit_diff" || name == "logit_minus_max" || name == "logit_vs_mean") return beats_all_wrong;
  throw InputError("unknown metric '" + name + "'");
}

int end_position(const Sample& s) {
  auto it = s.label_positions.find("end");
  if (it != s.label_positions.end()) return it->second;
  if (s.tokens.empty()) throw InputError("empty sample");
  return static_cast<int>(s.tokens.size()) - 1;
}

int TaskSpec::seq_len() const {
  int len = -1;
  int end = -1;
  for (const auto* set : {&clean, &eval, &corrupt}) {
    for (const Sample& s : *set) {
      const int n = static_cast<int>(s.tokens.size());
      if (len < 0) {
        len = n;
        end = end_position(s);
      }
      if (n != len) throw InputError("task " + name + " has samples of lengths " + std::to_string(len) + " and " + std::to_string(n));
      if (end_position(s) != end) throw InputError("task " + name + " samples disagree on the end position");
    }
  }
  if (len <= 0) throw InputError("task " + name + " has no samples");
  return len;
}

void TaskSpec::validate(const ModelConfig& config) const {
  const int len = seq_len();
  if (len > config.max_seq) {
    throw InputError("task " + name + " needs " + std::to_string(len) + " positions, model has " + std::to_string(config.max_seq));
  }
  if (clean.empty()) throw InputError("task " + name + " has no clean samples");
  if (corrupt.empty()) throw InputError("task " + name + " has no corruption samples");
  for (const auto* set : {&clean, &eval, &corrupt})
    for (const Sample& s : *set) {
      for (int t : s.tokens)
        if (t < 0 || t >= config.vocab_size) throw InputError("task " + name + " token " + std::to_string(t) + " outside the model vocabulary");
      for (const auto* toks : {&s.answer_tokens, &s.wrong_tokens})
        for (int t : *toks)
          if (t < 0 || t >= config.vocab_size) throw InputError("task " + name + " answer token " + std::to_string(t) + " outside the model vocabulary");
    }
  if (!metric) throw InputError("task " + name + " has no metric");
}

double TaskSpec::metric_on(const Tensor& logits, const Sample& s) const {
  return metric(logits.row(static_cast<std::size_t>(end_position(s))), s);
}

bool TaskSpec::correct_on(const Tensor& logits, const Sample& s) const {
  return correct(logits.row(static_cast<std::size_t>(end_position(s))), s);
}

// ---- IOI --------------------------------------------------------------------

namespace {

// Names are tokens 0..19.
constexpr int kNames = 20;
enum IoiWord : int {
  kWhen = 20, kAnd, kWent, kTo, kThe, kComma, kGave, kA, kThen, kWere, kAt, kHanded
};
constexpr int kPlaceBase = 32;  // 8 places
constexpr int kObjBase = 40;    // 10 objects

// Slots: -1 IO, -2 S, -3 place, -4 object.
constexpr int IO = -1, S = -2, PL = -3, OB = -4;
const std::vector<std::vector<int>>& ioi_templates() {
  static const std::vector<std::vector<int>> t = {
      {kWhen, IO, kAnd, S, kWent, kTo, kThe, PL, kComma, S, kGave, kA, OB, kTo},
      {kWhen, S, kAnd, IO, kWent, kTo, kThe, PL, kComma, S, kGave, kA, OB, kTo},
      {kThen, IO, kAnd, S, kWere, kAt, kThe, PL, kComma, S, kHanded, kThe, OB, kTo},
      {kThen, S, kAnd, IO, kWere, kAt, kThe, PL, kComma, S, kHanded, kThe, OB, kTo},
  };
  return t;
}

Sample ioi_sample(const std::vector<int>& tmpl, int io, int s1, int s2, int place, int obj) {
  Sample out;
  bool seen_s = false;
  for (std::size_t i = 0; i < tmpl.size(); ++i) {
    const int slot = tmpl[i];
    const int pos = static_cast<int>(i);
    switch (slot) {
      case IO:
        out.tokens.push_back(io);
        out.label_positions["IO"] = pos;
        break;
      case S:
        if (!seen_s) {
          out.tokens.push_back(s1);
          out.label_positions["S1"] = pos;
          out.label_positions["S1+1"] = pos + 1;
          seen_s = true;
        } else {
          out.tokens.push_back(s2);
          out.label_positions["S2"] = pos;
        }
        break;
      case PL: out.tokens.push_back(kPlaceBase + place); break;
      case OB: out.tokens.push_back(kObjBase + obj); break;
      default: out.tokens.push_back(slot);
    }
  }
  out.label_positions["end"] = static_cast<int>(tmpl.size()) - 1;
  out.answer_tokens = {io};
  out.wrong_tokens = {s1};
  return out;
}

}  // namespace

TaskSpec gen_ioi(int n, std::uint64_t seed, int n_eval, int n_corrupt) {
  if (n < 1) throw InputError("gen_ioi needs n >= 1");
  Rng rng(seed);
  const auto& tmpls = ioi_templates();
  auto clean_one = [&](int i) {
    const auto names = rng.sample_distinct(kNames, 2);
    return ioi_sample(tmpls[static_cast<std::size_t>(i) % tmpls.size()], names[0], names[1], names[1], rng.below_int(8),
                      rng.below_int(10));
  };
  auto abc_one = [&](int i) {
    const auto names = rng.sample_distinct(kNames, 3);
    return ioi_sample(tmpls[static_cast<std::size_t>(i) % tmpls.size()], names[0], names[1], names[2], rng.below_int(8),
                      rng.below_int(10));
  };
  TaskSpec t;
  t.name = "ioi";
  t.metric_name = "logit_diff";
  for (int i = 0; i < n; ++i) t.clean.push_back(clean_one(i));
  for (int i = 0; i < n_eval; ++i) t.eval.push_back(clean_one(i));
  for (int i = 0; i < n_corrupt; ++i) t.corrupt.push_back(abc_one(i));
  t.metric = logit_diff;
  t.correct = beats_all_wrong;
  t.reference = reference_circuits().at("ioi");
  return t;
}

// ---- Greater-than -----------------------------------------------------------

namespace {

enum GtWord : int { kGtThe = 0, kLasted, kFrom, kGtThe2, kYear, kGtTo };
constexpr int kNounBase = 6;      // 20 nouns
constexpr int kCenturyBase = 26;  // 4 centuries
constexpr int kYearBase = 30;     // 100 two-digit years

Sample gt_sample(int noun, int century, int yy) {
  Sample s;
  s.tokens = {kGtThe, kNounBase + noun, kLasted, kFrom, kGtThe2, kYear, kCenturyBase + century, kYearBase + yy,
              kGtTo, kGtThe2, kYear, kCenturyBase + century};
  s.label_positions = {{"noun", 1}, {"XX1", 6}, {"YY", 7}, {"XX2", 11}, {"end", 11}};
  for (int y = yy + 1; y < 100; ++y) s.answer_tokens.push_back(kYearBase + y);
  for (int y = 0; y < yy; ++y) s.wrong_tokens.push_back(kYearBase + y);
  return s;
}

}  // namespace

TaskSpec gen_greater_than(int n, std::uint64_t seed, int n_eval, int n_corrupt) {
  if (n < 1) throw InputError("gen_greater_than needs n >= 1");
  Rng rng(seed);
  auto clean_one = [&] { return gt_sample(rng.below_int(20), rng.below_int(4), 2 + rng.below_int(97)); };
  TaskSpec t;
  t.name = "greater_than";
  t.metric_name = "prob_diff";
  for (int i = 0; i < n; ++i) t.clean.push_back(clean_one());
  for (int i = 0; i < n_eval; ++i) t.eval.push_back(clean_one());
  for (int i = 0; i < n_corrupt; ++i) t.corrupt.push_back(gt_sample(rng.below_int(20), rng.below_int(4), 1));
  t.metric = prob_diff;
  t.correct = argmax_in_answers;
  t.reference = reference_circuits().at("greater_than");
  return t;
}

// ---- Docstring --------------------------------------------------------------

namespace {

enum DocWord : int { kDef = 0, kOpen, kSelf, kClose, kQuotes, kParam, kColon };
constexpr int kVarBase = 20;   // 40 variable names
constexpr int kVarCount = 40;
constexpr int kDescBase = 60;  // 20 description words
constexpr int kFnBase = 80;    // 10 function names

// def FN ( self A B C D E F ) """ DESC :param A : W :param B : W :param
Sample doc_sample(int fn, const std::vector<int>& sig, const std::vector<int>& doc, int desc, int w1, int w2) {
  Sample s;
  s.tokens = {kDef, kFnBase + fn, kOpen, kSelf};
  for (int v : sig) s.tokens.push_back(kVarBase + v);
  s.tokens.insert(s.tokens.end(), {kClose, kQuotes, kDescBase + desc, kParam, kVarBase + doc[0], kColon,
                                   kDescBase + w1, kParam, kVarBase + doc[1], kColon, kDescBase + w2, kParam});
  s.label_positions = {{"def_A", 4}, {"def_B", 5}, {"def_C", 6}, {"doc_A", 14}, {"doc_B", 18},
                       {"end", static_cast<int>(s.tokens.size()) - 1}};
  s.answer_tokens = {kVarBase + sig[2]};
  for (std::size_t i = 0; i < sig.size(); ++i)
    if (i != 2) s.wrong_tokens.push_back(kVarBase + sig[i]);
  return s;
}

}  // namespace

TaskSpec gen_docstring(int n, std::uint64_t seed, int n_eval, int n_corrupt) {
  if (n < 1) throw InputError("gen_docstring needs n >= 1");
  Rng rng(seed);
  auto clean_one = [&] {
    const auto sig = rng.sample_distinct(kVarCount, 6);
    return doc_sample(rng.below_int(10), sig, {sig[0], sig[1]}, rng.below_int(20), rng.below_int(20), rng.below_int(20));
  };
  auto random_random = [&] {
    const auto sig = rng.sample_distinct(kVarCount, 6);
    const auto doc = rng.sample_distinct(kVarCount, 2);
    return doc_sample(rng.below_int(10), sig, doc, rng.below_int(20), rng.below_int(20), rng.below_int(20));
  };
  TaskSpec t;
  t.name = "docstring";
  t.metric_name = "logit_minus_max";
  for (int i = 0; i < n; ++i) t.clean.push_back(clean_one());
  for (int i = 0; i < n_eval; ++i) t.eval.push_back(clean_one());
  for (int i = 0; i < n_corrupt; ++i) t.corrupt.push_back(random_random());
  t.metric = logit_minus_max;
  t.correct = beats_all_wrong;
  t.reference = reference_circuits().at("docstring");
  return t;
}

// ---- planted duplicate completion ------------------------------------------

namespace {

constexpr int kBos = 0;

Sample planted_sample(Rng& rng, bool corrupt) {
  // Eight distinct content tokens after BOS.
  auto content = rng.sample_distinct(kPlantedVocab - 1, kPlantedVocab - 1);
  Sample s;
  s.tokens.push_back(kBos);
  for (int i = 0; i < kPlantedSeqLen - 2; ++i) s.tokens.push_back(content[static_cast<std::size_t>(i)] + 1);
  const int end = kPlantedSeqLen - 1;
  if (corrupt) {
    const int unused = kPlantedVocab - 1 - (kPlantedSeqLen - 2);
    s.tokens.push_back(content[static_cast<std::size_t>(kPlantedSeqLen - 2 + rng.below_int(unused))] + 1);
    s.label_positions = {{"end", end}};
    s.answer_tokens = {s.tokens.back()};
  } else {
    // First occurrence in positions 1..7 so its successor is a content token.
    const int i = 1 + rng.below_int(kPlantedSeqLen - 3);
    s.tokens.push_back(s.tokens[static_cast<std::size_t>(i)]);
    s.label_positions = {{"A", i}, {"B", i + 1}, {"end", end}};
    s.answer_tokens = {s.tokens[static_cast<std::size_t>(i) + 1]};
  }
  for (int v = 0; v < kPlantedVocab; ++v)
    if (v != s.answer_tokens[0]) s.wrong_tokens.push_back(v);
  return s;
}

}  // namespace

TaskSpec gen_planted_task(int n, std::uint64_t seed, int n_eval, int n_corrupt) {
  if (n < 1) throw InputError("gen_planted_task needs n >= 1");
  Rng rng(seed);
  TaskSpec t;
  t.name = "planted";
  t.metric_name = "logit_vs_mean";
  for (int i = 0; i < n; ++i) t.clean.push_back(planted_sample(rng, false));
  for (int i = 0; i < n_eval; ++i) t.eval.push_back(planted_sample(rng, false));
  for (int i = 0; i < n_corrupt; ++i) t.corrupt.push_back(planted_sample(rng, true));
  t.metric = logit_vs_mean;
  t.correct = beats_all_wrong;
  return t;
}

// ---- task directories -------------------------------------------------------

TaskSpec load_task_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  std::ifstream in(root / "task.json");
  if (!in) throw InputError("cannot open " + (root / "task.json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad task.json: " + std::string(e.what()));
  }
  TaskSpec t;
  try {
    t.name = j.at("name").get<std::string>();
    t.metric_name = j.at("metric").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad task.json: " + std::string(e.what()));
  }
  t.metric = metric_by_name(t.metric_name);
  t.correct = correct_by_name(t.metric_name);
  t.clean = read_samples(root / "clean.jsonl");
  t.corrupt = read_samples(root / "corrupt.jsonl");
  t.eval = fs::exists(root / "eval.jsonl") ? read_samples(root / "eval.jsonl") : t.clean;
  if (j.contains("reference")) {
    std::vector<Node> ref;
    for (const auto& n : j["reference"]) ref.push_back(Node{n.at(0).get<int>(), n.at(1).get<int>(), std::nullopt});
    t.reference = ref;
  } else if (auto it = reference_circuits().find(t.name); it != reference_circuits().end()) {
    t.reference = it->second;
  }
  return t;
}

void save_task_dir(const TaskSpec& task, const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  fs::create_directories(root);
  nlohmann::ordered_json j;
  j["name"] = task.name;
  j["metric"] = task.metric_name;
  if (task.reference) {
    j["reference"] = nlohmann::ordered_json::array();
    for (const Node& n : *task.reference) j["reference"].push_back({n.layer, n.head});
  }
  std::ofstream(root / "task.json") << j.dump(2) << '\n';
  write_samples(root / "clean.jsonl", task.clean);
  write_samples(root / "eval.jsonl", task.eval);
  write_samples(root / "corrupt.jsonl", task.corrupt);
}

TaskSpec make_task(const std::string& name, int n, std::uint64_t seed, int n_eval, int n_corrupt) {
  if (name == "ioi") return gen_ioi(n, seed, n_eval, n_corrupt);
  if (name == "greater_than") return gen_greater_than(n, seed, n_eval, n_corrupt);
  if (name == "docstring") return gen_docstring(n, seed, n_eval, n_corrupt);
  if (name == "planted") return gen_planted_task(n, seed, n_eval, n_corrupt);
  throw InputError("unknown task '" + name + "' (expected planted|ioi|greater_than|docstring)");
}

TaskSpec filter_correct(const Model& model, TaskSpec task) {
  std::vector<Sample> kept;
  for (const Sample& s : task.eval) {
    const auto cache = forward(model, s.tokens);
    if (task.correct_on(cache.logits, s)) kept.push_back(s);
  }
  task.eval = std::move(kept);
  return task;
}

const std::map<std::string, std::vector<Node>>& reference_circuits() {
  static const std::map<std::string, std::vector<Node>> refs = [] {
    auto heads = [](std::initializer_list<std::pair<int, int>> l) {
      std::vector<Node> out;
      for (auto [a, b] : l) out.push_back(Node{a, b, std::nullopt});
      return out;
    };
    std::map<std::string, std::vector<Node>> m;
    m["ioi"] = heads({{2, 2},  {4, 11}, {0, 1},  {3, 0},  {0, 10}, {5, 5},  {6, 9},  {5, 8},  {5, 9},
                      {7, 3},  {7, 9},  {8, 6},  {8, 10}, {10, 7}, {11, 0}, {9, 9},  {9, 6},  {10, 0},
                      {9, 0},  {9, 7},  {10, 1}, {10, 2}, {10, 6}, {10, 10}, {11, 2}, {11, 9}});
    m["greater_than"] = heads({{5, 1}, {5, 5}, {6, 1}, {6, 9}, {7, 10}, {8, 8}, {8, 11}, {9, 1}});
    m["docstring"] = heads({{0, 2}, {0, 4}, {0, 5}, {1, 2}, {1, 4}, {2, 0}, {3, 0}, {3, 6}});
    return m;
  }();
  return refs;
}

// ---- random models ----------------------------------------------------------

Model random_model(const ModelConfig& config, std::uint64_t seed, float weight_scale, bool biases) {
  config.validate();
  Rng rng(seed);
  ModelWeights w = zero_weights(config);
  auto fill = [&](Tensor& t, float s) {
    for (float& v : t.data()) v = static_cast<float>(rng.normal() * s);
  };
  const float in_scale = weight_scale / std::sqrt(static_cast<float>(config.d_model));
  fill(w.W_E, 1.0f);
  fill(w.W_pos, 0.5f);
  for (auto& lw : w.blocks) {
    for (float& v : lw.ln1_w.data()) v = static_cast<float>(1.0 + 0.1 * rng.normal());
    if (biases) fill(lw.ln1_b, 0.1f);
    for (auto& hw : lw.heads) {
      fill(hw.W_Q, in_scale * 2.0f);
      fill(hw.W_K, in_scale * 2.0f);
      fill(hw.W_V, in_scale);
      fill(hw.W_O, weight_scale / std::sqrt(static_cast<float>(config.d_head)));
      if (biases) {
        fill(hw.b_Q, 0.1f);
        fill(hw.b_K, 0.1f);
        fill(hw.b_V, 0.1f);
      }
    }
    if (biases) fill(lw.b_O, 0.1f);
    if (config.has_mlp()) {
      for (float& v : lw.ln2_w.data()) v = static_cast<float>(1.0 + 0.1 * rng.normal());
      if (biases) fill(lw.ln2_b, 0.1f);
      fill(lw.W_in, in_scale);
      fill(lw.W_out, weight_scale / std::sqrt(static_cast<float>(config.d_mlp)));
      if (biases) {
        fill(lw.b_in, 0.1f);
        fill(lw.b_out, 0.1f);
      }
    }
  }
  if (config.has_final_ln) {
    for (float& v : w.ln_final_w.data()) v = static_cast<float>(1.0 + 0.1 * rng.normal());
    if (biases) fill(w.ln_final_b, 0.1f);
  }
  fill(w.W_U, 1.0f / std::sqrt(static_cast<float>(config.d_model)));
  return Model(config, std::move(w));
}

}  // namespace cdt
