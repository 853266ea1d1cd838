#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cdt/discovery.hpp"
#include "cdt/error.hpp"
#include "cdt/eval.hpp"
#include "cdt/io.hpp"
#include "cdt/random.hpp"
#include "cdt/tasks.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace cdt;

namespace {

constexpr int kExitInput = 2;
constexpr int kExitDiscovery = 3;
constexpr int kExitNodeRange = 4;

// Raised for failures while reading inputs; mapped to kExitInput.
struct InputFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string model_path;
  std::string task;
  std::string task_dir;
  double percentile = 95.0;
  double epsilon = 1e-3;
  int max_iters = 10;
  int samples = 20;
  std::string ablation = "mean";
  std::string granularity = "head";
  std::uint64_t seed = 0;
  int workers = 1;
  std::string out;
  std::string circuit_path;
  std::string reference_path;
  std::string targets = "output";
  bool shuffle = false;
  int n_eval = 100;
  int n_corrupt = 100;
  // make-random
  int layers = 2, heads = 4, d_head = 8, d_mlp = 0, vocab = kIoiVocab, max_seq = 16;
};

using Clock = std::chrono::steady_clock;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void configure_logging() {
  auto logger = spdlog::stderr_color_mt("cdt");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("CDT_LOG");
  const std::string level = env ? env : "info";
  if (level == "error")
    spdlog::set_level(spdlog::level::err);
  else if (level == "debug")
    spdlog::set_level(spdlog::level::debug);
  else
    spdlog::set_level(spdlog::level::info);
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + path.string());
}

// Collects what a command did; written next to its primary output.
class Manifest {
 public:
  Manifest(std::string command, const Flags& f) : command_(std::move(command)), flags_(f) {}

  void phase(const std::string& name, double seconds) { timings_[name] = seconds; }
  void output(const fs::path& p) { outputs_.push_back(p.string()); }
  void model_hash(std::string h) { model_hash_ = std::move(h); }

  void write(const fs::path& primary) {
    const fs::path path = primary.string() + ".manifest.json";
    json j;
    j["command"] = command_;
    json cfg;
    cfg["model"] = flags_.model_path;
    cfg["task"] = flags_.task;
    cfg["task_dir"] = flags_.task_dir;
    cfg["percentile"] = flags_.percentile;
    cfg["epsilon"] = flags_.epsilon;
    cfg["max_iters"] = flags_.max_iters;
    cfg["samples"] = flags_.samples;
    cfg["ablation"] = flags_.ablation;
    cfg["granularity"] = flags_.granularity;
    cfg["workers"] = flags_.workers;
    if (!flags_.circuit_path.empty()) cfg["circuit"] = flags_.circuit_path;
    if (!flags_.reference_path.empty()) cfg["reference"] = flags_.reference_path;
    if (command_ == "heatmap") cfg["targets"] = flags_.targets;
    if (command_ == "roc") cfg["shuffle"] = flags_.shuffle;
    j["config"] = cfg;
    j["seed"] = flags_.seed;
    j["model_hash"] = model_hash_;
    j["outputs"] = outputs_;
    j["timings"] = timings_;
    for (const auto& o : outputs_)
      if (!fs::exists(o)) throw std::runtime_error("declared output " + o + " was not written");
    write_text(path, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  const Flags& flags_;
  std::string model_hash_;
  std::vector<std::string> outputs_;
  json timings_ = json::object();
};

struct Inputs {
  Model model;
  TaskSpec task;
  MeanCache means;
};

Inputs load_inputs(const Flags& f, Manifest& m) {
  const auto t0 = Clock::now();
  if (f.model_path.empty()) throw InputFailure("--model is required");
  if (f.task.empty() == f.task_dir.empty()) throw InputFailure("exactly one of --task and --task-dir is required");
  try {
    Model model = load_model(f.model_path);
    m.model_hash(file_fingerprint(f.model_path));
    TaskSpec task = f.task_dir.empty() ? make_task(f.task, f.samples, f.seed, f.n_eval, f.n_corrupt) : load_task_dir(f.task_dir);
    task.validate(model.config());
    MeanCache means = mean_activations(model, token_lists(task.corrupt));
    spdlog::info("loaded model {} ({} layers x {} heads), task {} ({} clean, {} eval, {} corrupt)", f.model_path,
                 model.config().n_layers, model.config().n_heads, task.name, task.clean.size(), task.eval.size(),
                 task.corrupt.size());
    m.phase("load", since(t0));
    return Inputs{std::move(model), std::move(task), std::move(means)};
  } catch (const NodeRangeError&) {
    throw;
  } catch (const Error& e) {
    throw InputFailure(e.what());
  } catch (const std::ios_base::failure& e) {
    throw InputFailure(e.what());
  }
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputFailure("cannot read " + path);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

Circuit load_circuit(const std::string& path) {
  try {
    return circuit_from_json(read_text(path));
  } catch (const Error& e) {
    throw InputFailure(path + ": " + e.what());
  }
}

DiscoveryConfig discovery_config(const Flags& f) {
  DiscoveryConfig cfg;
  cfg.percentile = f.percentile;
  cfg.epsilon = f.epsilon;
  cfg.max_iterations = f.max_iters;
  cfg.samples = f.samples;
  cfg.granularity = parse_granularity(f.granularity);
  cfg.ablation = parse_ablation(f.ablation);
  cfg.workers = f.workers;
  try {
    cfg.validate();
  } catch (const Error& e) {
    throw InputFailure(e.what());
  }
  return cfg;
}

// Reference heads: an explicit circuit file, else the task's own reference.
std::vector<Node> reference_heads(const Flags& f, const TaskSpec& task) {
  if (!f.reference_path.empty()) {
    std::vector<Node> out;
    const Circuit ref = load_circuit(f.reference_path);
    for (const Node& n : ref.nodes()) out.push_back(n.head_only());
    return out;
  }
  if (task.reference) return *task.reference;
  const auto& refs = reference_circuits();
  if (auto it = refs.find(task.name); it != refs.end()) return it->second;
  throw InputFailure("task " + task.name + " has no reference circuit; pass --reference");
}

// "output", or a comma-separated list of L.H / L.H@P.
TargetSpec parse_targets(const std::string& text) {
  if (text == "output") return TargetSpec::model_output({});
  static const std::regex node_re(R"(^\s*(\d+)\.(\d+)(?:@(\d+))?\s*$)");
  std::vector<Node> nodes;
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string item = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    std::smatch m;
    if (!std::regex_match(item, m, node_re)) throw InputFailure("bad node syntax '" + item + "' (expected L.H or L.H@P)");
    Node n{std::stoi(m[1]), std::stoi(m[2]), std::nullopt};
    if (m[3].matched) n.pos = std::stoi(m[3]);
    nodes.push_back(n);
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return TargetSpec::of_nodes(std::move(nodes));
}

json roc_json(const RocResult& r) {
  json pts = json::array();
  for (const auto& [fpr, tpr] : r.points) pts.push_back({fpr, tpr});
  return json{{"auc", r.auc}, {"points", pts}};
}

int cmd_discover(const Flags& f) {
  Manifest m("discover", f);
  const Inputs in = load_inputs(f, m);
  const DiscoveryConfig cfg = discovery_config(f);
  DiscoveryResult res;
  try {
    res = discover_circuit(in.model, in.task, cfg);
  } catch (const NodeRangeError&) {
    throw;
  } catch (const Error& e) {
    spdlog::error("discovery failed: {}", e.what());
    return kExitDiscovery;
  }
  m.phase("discovery", res.seconds);
  double scan = 0.0;
  for (const auto& it : res.trace) {
    scan += it.scan_seconds;
    spdlog::info("iteration {}: {} scored, {} selected, circuit size {}, metric {:.6g} of {:.6g}{}", it.iteration,
                 it.scores.size(), it.selected.size(), it.circuit.size(), it.circuit_metric, it.model_metric,
                 it.halt.empty() ? "" : " (halt: " + it.halt + ")");
  }
  m.phase("scan", scan);
  const auto t0 = Clock::now();
  write_text(f.out, circuit_to_json(res.circuit, res.trace));
  m.phase("write", since(t0));
  m.output(f.out);
  m.write(f.out);
  spdlog::info("{} nodes, halt {}, {:.3f}s", res.circuit.size(), res.halt_reason, res.seconds);
  return 0;
}

int cmd_evaluate(const Flags& f) {
  Manifest m("evaluate", f);
  if (f.circuit_path.empty()) throw InputFailure("--circuit is required");
  const Circuit circuit = load_circuit(f.circuit_path);
  const Inputs in = load_inputs(f, m);
  const int seq = in.task.seq_len();
  for (const Node& n : circuit.nodes())
    if (!in.model.valid_node(n, seq)) throw NodeRangeError("circuit node " + n.to_string() + " is outside the model");
  const auto t0 = Clock::now();
  const auto r = faithfulness(circuit, in.model, in.task, &in.means);
  m.phase("evaluate", since(t0));
  json j{{"nodes", circuit.size()}, {"m_C", r.m_C}, {"m_empty", r.m_empty}, {"m_M", r.m_M}, {"faithfulness", r.faithfulness}};
  write_text(f.out, j.dump(2) + "\n");
  m.output(f.out);
  m.write(f.out);
  spdlog::info("faithfulness {:.6f}", r.faithfulness);
  return 0;
}

int cmd_roc(const Flags& f) {
  Manifest m("roc", f);
  const Inputs in = load_inputs(f, m);
  const std::vector<Node> reference = reference_heads(f, in.task);
  DiscoveryConfig cfg = discovery_config(f);

  auto t0 = Clock::now();
  const auto samples = std::span<const Sample>(in.task.clean).first(std::min<std::size_t>(in.task.clean.size(), static_cast<std::size_t>(cfg.samples)));
  RelevanceMap scan;
  try {
    scan = scan_sources(in.model, in.task, samples, TargetSpec::model_output({}), &in.means, cfg);
  } catch (const NodeRangeError&) {
    throw;
  } catch (const Error& e) {
    spdlog::error("scan failed: {}", e.what());
    return kExitDiscovery;
  }
  std::map<Node, double> scores = scan.scores;
  if (f.shuffle) {
    std::vector<double> values;
    for (const auto& [n, v] : scores) values.push_back(v);
    Rng rng(f.seed);
    rng.shuffle(values);
    std::size_t i = 0;
    for (auto& [n, v] : scores) v = values[i++];
  }
  const RocResult by_score = roc_from_scores(scores, reference, in.model.config());
  m.phase("scan", since(t0));

  json j{{"reference", json::array()}, {"shuffled", f.shuffle}, {"scores", roc_json(by_score)}};
  for (const Node& n : reference) j["reference"].push_back(n.to_string());
  if (!f.shuffle) {
    t0 = Clock::now();
    std::vector<Circuit> sweep;
    json percentiles = json::array();
    for (int p = 90; p <= 99; ++p) {
      cfg.percentile = p;
      try {
        sweep.push_back(discover_circuit(in.model, in.task, cfg).circuit);
      } catch (const NodeRangeError&) {
        throw;
      } catch (const Error& e) {
        spdlog::error("discovery at percentile {} failed: {}", p, e.what());
        return kExitDiscovery;
      }
      percentiles.push_back(p);
    }
    json sweep_j = roc_json(roc_from_circuits(sweep, reference, in.model.config()));
    sweep_j["percentiles"] = percentiles;
    j["sweep"] = sweep_j;
    m.phase("sweep", since(t0));
  }
  write_text(f.out, j.dump(2) + "\n");
  m.output(f.out);
  m.write(f.out);
  spdlog::info("score auc {:.4f}{}", by_score.auc,
               j.contains("sweep") ? fmt::format(", sweep auc {:.4f}", j["sweep"]["auc"].get<double>()) : "");
  return 0;
}

int cmd_heatmap(const Flags& f) {
  Manifest m("heatmap", f);
  const TargetSpec target = parse_targets(f.targets);
  const Inputs in = load_inputs(f, m);
  const int seq = in.task.seq_len();
  for (const Node& n : target.nodes)
    if (!in.model.valid_node(n, seq)) throw NodeRangeError("target node " + n.to_string() + " is outside the model");
  const DiscoveryConfig cfg = discovery_config(f);
  const auto samples = std::span<const Sample>(in.task.clean).first(std::min<std::size_t>(in.task.clean.size(), static_cast<std::size_t>(cfg.samples)));
  const auto t0 = Clock::now();
  RelevanceMap scan;
  try {
    scan = scan_sources(in.model, in.task, samples, target, &in.means, cfg);
  } catch (const NodeRangeError&) {
    throw;
  } catch (const Error& e) {
    spdlog::error("scan failed: {}", e.what());
    return kExitDiscovery;
  }
  const auto normalized = normalize_by_layer(scan.scores);
  m.phase("scan", since(t0));

  std::ostringstream csv;
  csv.precision(9);
  csv << "layer,head,pos,score,normalized_score\n";
  for (const auto& [n, s] : scan.scores) {
    csv << n.layer << ',' << n.head << ',';
    if (n.pos) csv << *n.pos;
    csv << ',' << s << ',' << normalized.at(n) << '\n';
  }
  write_text(f.out, csv.str());
  m.output(f.out);
  m.write(f.out);
  spdlog::info("{} rows", scan.scores.size());
  return 0;
}

int cmd_make_planted(const Flags& f) {
  Manifest m("make-planted", f);
  const auto t0 = Clock::now();
  const PlantedModel pm = build_planted_model(f.seed);
  save_model(pm.model, f.out);
  Circuit ref(Granularity::head, AblationScheme::mean);
  for (const Node& n : pm.circuit) ref.add(n);
  const fs::path ref_path = f.out + ".reference.json";
  write_text(ref_path, circuit_to_json(ref));
  m.phase("build", since(t0));
  m.model_hash(file_fingerprint(f.out));
  m.output(f.out);
  m.output(ref_path);
  m.write(f.out);
  spdlog::info("planted heads {} and {}", pm.prev_head.to_string(), pm.induction_head.to_string());
  return 0;
}

int cmd_make_random(const Flags& f) {
  Manifest m("make-random", f);
  ModelConfig c;
  c.n_layers = f.layers;
  c.n_heads = f.heads;
  c.d_head = f.d_head;
  c.d_model = f.heads * f.d_head;
  c.d_mlp = f.d_mlp;
  c.vocab_size = f.vocab;
  c.max_seq = f.max_seq;
  const auto t0 = Clock::now();
  try {
    save_model(random_model(c, f.seed), f.out);
  } catch (const InputError& e) {
    throw InputFailure(e.what());
  }
  m.phase("build", since(t0));
  m.model_hash(file_fingerprint(f.out));
  m.output(f.out);
  m.write(f.out);
  return 0;
}

void add_task_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--model", f.model_path, "Weight container")->required();
  auto* task = cmd->add_option("--task", f.task, "Built-in task")
                   ->check(CLI::IsMember({"planted", "ioi", "greater_than", "docstring"}));
  auto* dir = cmd->add_option("--task-dir", f.task_dir, "Directory with task.json and sample files");
  task->excludes(dir);
  cmd->add_option("--samples", f.samples, "Clean samples used for scoring")->check(CLI::PositiveNumber);
  cmd->add_option("--seed", f.seed, "Seed for task generation and random draws");
  cmd->add_option("--workers", f.workers, "Scan worker threads")->check(CLI::PositiveNumber);
  cmd->add_option("--ablation", f.ablation, "Ablation scheme")->check(CLI::IsMember({"mean", "zero"}));
  cmd->add_option("--granularity", f.granularity, "Node granularity")->check(CLI::IsMember({"head", "head_pos"}));
  cmd->add_option("--n-eval", f.n_eval, "Evaluation samples for built-in tasks")->check(CLI::PositiveNumber);
  cmd->add_option("--n-corrupt", f.n_corrupt, "Corrupt samples for built-in tasks")->check(CLI::PositiveNumber);
}

void add_discovery_flags(CLI::App* cmd, Flags& f) {
  cmd->add_option("--percentile", f.percentile, "Selection percentile");
  cmd->add_option("--epsilon", f.epsilon, "Stop once the circuit metric is this close to the model's");
  cmd->add_option("--max-iters", f.max_iters, "Iteration limit");
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Circuit discovery by contextual decomposition"};
  app.require_subcommand(1);
  Flags f;

  auto* discover = app.add_subcommand("discover", "Discover a circuit and write it as JSON");
  add_task_flags(discover, f);
  add_discovery_flags(discover, f);
  discover->add_option("--out", f.out, "Circuit JSON path")->required();

  auto* evaluate = app.add_subcommand("evaluate", "Faithfulness of a circuit file");
  add_task_flags(evaluate, f);
  evaluate->add_option("--circuit", f.circuit_path, "Circuit JSON")->required();
  evaluate->add_option("--out", f.out, "Report JSON path")->required();

  auto* roc = app.add_subcommand("roc", "ROC of first-scan scores and of a percentile sweep against a reference");
  add_task_flags(roc, f);
  add_discovery_flags(roc, f);
  roc->add_option("--reference", f.reference_path, "Circuit JSON with the reference heads");
  roc->add_flag("--shuffle", f.shuffle, "Permute the scores with --seed before ranking");
  roc->add_option("--out", f.out, "ROC JSON path")->required();

  auto* heatmap = app.add_subcommand("heatmap", "Relevance of every upstream node to a target, as CSV");
  add_task_flags(heatmap, f);
  heatmap->add_option("--targets", f.targets, "'output' or comma-separated L.H / L.H@P");
  heatmap->add_option("--out", f.out, "CSV path")->required();

  auto* planted = app.add_subcommand("make-planted", "Write the planted two-head model");
  planted->add_option("--seed", f.seed, "Model seed");
  planted->add_option("--out", f.out, "Weight container path")->required();

  auto* random = app.add_subcommand("make-random", "Write a model with Gaussian weights");
  random->add_option("--seed", f.seed, "Model seed");
  random->add_option("--layers", f.layers)->check(CLI::PositiveNumber);
  random->add_option("--heads", f.heads)->check(CLI::PositiveNumber);
  random->add_option("--d-head", f.d_head)->check(CLI::PositiveNumber);
  random->add_option("--d-mlp", f.d_mlp)->check(CLI::NonNegativeNumber);
  random->add_option("--vocab", f.vocab)->check(CLI::PositiveNumber);
  random->add_option("--max-seq", f.max_seq)->check(CLI::PositiveNumber);
  random->add_option("--out", f.out, "Weight container path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (discover->parsed()) return cmd_discover(f);
    if (evaluate->parsed()) return cmd_evaluate(f);
    if (roc->parsed()) return cmd_roc(f);
    if (heatmap->parsed()) return cmd_heatmap(f);
    if (planted->parsed()) return cmd_make_planted(f);
    if (random->parsed()) return cmd_make_random(f);
  } catch (const NodeRangeError& e) {
    spdlog::error("{}", e.what());
    return kExitNodeRange;
  } catch (const InputFailure& e) {
    spdlog::error("{}", e.what());
    return kExitInput;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 1;
}
