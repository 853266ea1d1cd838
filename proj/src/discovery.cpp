#include "cdt/discovery.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

#include <json.hpp>

#include "cdt/error.hpp"
#include "cdt/eval.hpp"
#include "cdt/parallel.hpp"

namespace cdt {

void DiscoveryConfig::validate() const {
  if (!(percentile > 0.0 && percentile < 100.0)) throw InputError("percentile must lie strictly between 0 and 100");
  if (!(epsilon > 0.0)) throw InputError("epsilon must be positive");
  if (max_iterations < 1) throw InputError("max iterations must be at least 1");
  if (samples < 1) throw InputError("samples must be at least 1");
  if (workers < 1) throw InputError("workers must be at least 1");
}

double relevance_internal(std::span<const Decomposition> targets) {
  double total = 0.0;
  for (const Decomposition& d : targets) {
    const double r = l1_norm(d.rel);
    const double g = l1_norm(d.irrel);
    if (g == 0.0) {
      if (r > 0.0) return std::numeric_limits<double>::infinity();
      continue;
    }
    total += r / g;
  }
  return total;
}

double relevance_output(std::span<const float> rel_logits, const TaskSpec& task, const Sample& sample) {
  return task.metric(rel_logits, sample);
}

RelevanceMap scan_sources(const Model& model, const TaskSpec& task, std::span<const Sample> samples,
                          const TargetSpec& target, const MeanCache* means, const DiscoveryConfig& cfg,
                          int iteration) {
  const auto& c = model.config();
  if (samples.empty()) throw InputError("scan needs at least one sample");
  const int seq = static_cast<int>(samples.front().tokens.size());
  const int upstream = target.targets_output() ? c.n_layers : target.min_layer(c);

  RelevanceMap out;
  out.iteration = iteration;
  out.target = target;
  std::vector<Node> sources;
  for (int l = 0; l < upstream; ++l)
    for (int h = 0; h < c.n_heads; ++h) {
      if (cfg.granularity == Granularity::head) {
        sources.push_back(Node{l, h, std::nullopt});
      } else {
        for (int p = 0; p < seq; ++p) sources.push_back(Node{l, h, p});
      }
    }
  if (sources.empty()) return out;

  std::vector<ActivationCache> caches(samples.size());
  parallel_for(samples.size(), cfg.workers, [&](std::size_t i) { caches[i] = forward(model, samples[i].tokens); });

  const MeanCache* source_means = cfg.ablation == AblationScheme::mean ? means : nullptr;
  if (cfg.ablation == AblationScheme::mean && !means) throw InputError("mean scheme scan needs mean activations");
  PropagateOptions opts;
  opts.stabilize = cfg.stabilize;

  std::vector<double> raw(sources.size());
  std::vector<double> signed_mean(sources.size());
  parallel_for(sources.size(), cfg.workers, [&](std::size_t si) {
    const Node& src = sources[si];
    double sum = 0.0;
    double signed_sum = 0.0;
    for (std::size_t k = 0; k < samples.size(); ++k) {
      const Sample& s = samples[k];
      const Decomposition d = init_source_decomposition(caches[k], source_means, src);
      if (target.targets_output()) {
        const auto res = propagate(model, caches[k], src, d, TargetSpec::model_output({end_position(s)}), opts);
        const double v = relevance_output(res.output->rel.row(0), task, s);
        signed_sum += v;
        sum += std::fabs(v);
      } else {
        const auto res = propagate(model, caches[k], src, d, target, opts);
        std::vector<Decomposition> ds;
        ds.reserve(target.nodes.size());
        for (const Node& t : target.nodes) ds.push_back(res.nodes.at(t));
        sum += relevance_internal(ds);
      }
    }
    raw[si] = sum / static_cast<double>(samples.size());
    signed_mean[si] = signed_sum / static_cast<double>(samples.size());
  });

  if (target.targets_output()) {
    for (std::size_t i = 0; i < sources.size(); ++i) {
      out.signed_scores[sources[i]] = signed_mean[i];
      out.scores[sources[i]] = raw[i];
    }
    return out;
  }

  // Unbounded ratios take the largest finite score of their layer.
  std::map<int, double> layer_max;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    if (std::isinf(raw[i])) continue;
    auto [it, fresh] = layer_max.emplace(sources[i].layer, raw[i]);
    if (!fresh) it->second = std::max(it->second, raw[i]);
  }
  for (std::size_t i = 0; i < sources.size(); ++i) {
    double v = raw[i];
    if (std::isinf(v)) {
      out.unbounded.push_back(sources[i]);
      auto it = layer_max.find(sources[i].layer);
      v = it != layer_max.end() ? it->second : 1.0;
    }
    out.scores[sources[i]] = v;
  }
  return out;
}

std::map<Node, double> normalize_by_layer(const std::map<Node, double>& scores) {
  std::map<int, std::pair<double, int>> acc;
  for (const auto& [n, s] : scores) {
    auto& a = acc[n.layer];
    a.first += std::fabs(s);
    a.second += 1;
  }
  std::map<Node, double> out;
  for (const auto& [n, s] : scores) {
    const auto& a = acc[n.layer];
    const double mean = a.first / a.second;
    out[n] = mean == 0.0 ? s : s / mean;
  }
  return out;
}

std::vector<Node> select_top(const std::map<Node, double>& scores, double percentile) {
  if (scores.empty()) throw InputError("cannot select from an empty score map");
  if (!(percentile > 0.0 && percentile < 100.0)) throw InputError("percentile must lie strictly between 0 and 100");
  std::vector<double> v;
  v.reserve(scores.size());
  for (const auto& [n, s] : scores) v.push_back(s);
  std::sort(v.begin(), v.end());
  const double rank = percentile / 100.0 * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, v.size() - 1);
  double cutoff = v[lo] + (rank - static_cast<double>(lo)) * (v[hi] - v[lo]);
  cutoff = std::min(cutoff, v.back());

  std::vector<std::pair<Node, double>> picked;
  for (const auto& [n, s] : scores)
    if (s >= cutoff) picked.emplace_back(n, s);
  std::stable_sort(picked.begin(), picked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<Node> out;
  for (const auto& [n, s] : picked) out.push_back(n);
  return out;
}

Circuit greedy_prune(Circuit circuit, const std::function<double(const Circuit&)>& evaluator,
                     std::vector<Node>* removed) {
  double current = evaluator(circuit);
  for (bool changed = true; changed;) {
    changed = false;
    std::vector<Node> order = circuit.nodes();
    std::stable_sort(order.begin(), order.end(), [&](const Node& a, const Node& b) {
      return circuit.provenance(a).score < circuit.provenance(b).score;
    });
    for (const Node& n : order) {
      Circuit trial = circuit;
      trial.remove(n);
      const double v = evaluator(trial);
      if (v > current) {
        circuit = std::move(trial);
        current = v;
        changed = true;
        if (removed) removed->push_back(n);
      }
    }
  }
  return circuit;
}

DiscoveryResult discover_circuit(const Model& model, const TaskSpec& task, const DiscoveryConfig& cfg) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  cfg.validate();
  task.validate(model.config());
  const std::size_t n = std::min(task.clean.size(), static_cast<std::size_t>(cfg.samples));
  const std::span<const Sample> samples(task.clean.data(), n);

  MeanCache means;
  const MeanCache* mp = nullptr;
  if (cfg.ablation == AblationScheme::mean) {
    means = mean_activations(model, token_lists(task.corrupt));
    mp = &means;
  }
  auto evaluate = [&](const Circuit& c) { return circuit_metric(model, task, samples, c, mp); };

  DiscoveryResult result;
  result.model_metric = model_metric(model, task, samples);
  Circuit circuit(cfg.granularity, cfg.ablation);
  Circuit best = circuit;
  double best_metric = -std::numeric_limits<double>::infinity();
  double prev_metric = -std::numeric_limits<double>::infinity();
  TargetSpec target = TargetSpec::model_output({});

  for (int it = 1;; ++it) {
    if (it > cfg.max_iterations) {
      result.halt_reason = "max_iterations";
      result.truncated = true;
      circuit = best;
      break;
    }
    const auto it_start = clock::now();
    IterationTrace tr;
    tr.iteration = it;
    tr.targets = target.nodes;
    tr.model_metric = result.model_metric;

    const RelevanceMap rm = scan_sources(model, task, samples, target, mp, cfg, it);
    tr.scan_seconds = std::chrono::duration<double>(clock::now() - it_start).count();
    if (rm.empty()) {
      tr.halt = result.halt_reason = "no_upstream";
      tr.circuit = circuit.nodes();
      tr.circuit_metric = prev_metric;
      tr.iteration_seconds = tr.scan_seconds;
      result.trace.push_back(std::move(tr));
      break;
    }
    tr.scores = rm.scores;
    tr.unbounded = rm.unbounded;
    tr.normalized = normalize_by_layer(rm.scores);
    tr.selected = select_top(tr.normalized, cfg.percentile);
    for (const Node& s : tr.selected) circuit.add(s, NodeProvenance{it, tr.normalized.at(s)});
    if (cfg.prune) circuit = greedy_prune(std::move(circuit), evaluate, &tr.pruned);
    tr.circuit = circuit.nodes();
    tr.circuit_metric = evaluate(circuit);
    if (tr.circuit_metric > best_metric) {
      best_metric = tr.circuit_metric;
      best = circuit;
    }

    if (std::fabs(tr.circuit_metric - result.model_metric) < cfg.epsilon) {
      tr.halt = result.halt_reason = "epsilon";
    } else if (!(tr.circuit_metric > prev_metric)) {
      tr.halt = result.halt_reason = "no_improvement";
    }
    prev_metric = tr.circuit_metric;
    tr.iteration_seconds = std::chrono::duration<double>(clock::now() - it_start).count();
    const bool stop = !tr.halt.empty();
    target = TargetSpec::of_nodes(tr.selected);
    result.trace.push_back(std::move(tr));
    if (stop) break;
  }

  result.circuit = std::move(circuit);
  result.circuit_metric = evaluate(result.circuit);
  result.seconds = std::chrono::duration<double>(clock::now() - t0).count();
  return result;
}

namespace {

using ordered_json = nlohmann::ordered_json;

ordered_json node_json(const Node& n) {
  ordered_json j;
  j["layer"] = n.layer;
  j["head"] = n.head;
  j["pos"] = n.pos ? ordered_json(*n.pos) : ordered_json(nullptr);
  return j;
}

ordered_json nodes_json(std::span<const Node> nodes) {
  ordered_json a = ordered_json::array();
  for (const Node& n : nodes) a.push_back(node_json(n));
  return a;
}

ordered_json finite_or_null(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

}  // namespace

std::string circuit_to_json(const Circuit& circuit, std::span<const IterationTrace> trace) {
  ordered_json j;
  j["granularity"] = to_string(circuit.granularity());
  j["ablation"] = to_string(circuit.ablation());
  j["nodes"] = nodes_json(circuit.nodes());
  j["trace"] = ordered_json::array();
  for (const auto& tr : trace) {
    ordered_json t;
    t["iteration"] = tr.iteration;
    t["targets"] = tr.targets.empty() ? ordered_json("output") : nodes_json(tr.targets);
    t["scores"] = ordered_json::array();
    for (const auto& [n, s] : tr.scores) {
      ordered_json e = node_json(n);
      e["score"] = finite_or_null(s);
      e["normalized_score"] = finite_or_null(tr.normalized.at(n));
      t["scores"].push_back(std::move(e));
    }
    t["unbounded"] = nodes_json(tr.unbounded);
    t["selected"] = nodes_json(tr.selected);
    t["pruned"] = nodes_json(tr.pruned);
    t["circuit"] = nodes_json(tr.circuit);
    t["circuit_metric"] = finite_or_null(tr.circuit_metric);
    t["model_metric"] = finite_or_null(tr.model_metric);
    t["halt"] = tr.halt.empty() ? ordered_json(nullptr) : ordered_json(tr.halt);
    j["trace"].push_back(std::move(t));
  }
  return j.dump(2) + "\n";
}

Circuit circuit_from_json(const std::string& text) {
  try {
    const auto j = ordered_json::parse(text);
    Circuit c(parse_granularity(j.at("granularity").get<std::string>()),
              parse_ablation(j.at("ablation").get<std::string>()));
    for (const auto& e : j.at("nodes")) {
      Node n{e.at("layer").get<int>(), e.at("head").get<int>(), std::nullopt};
      if (e.contains("pos") && !e["pos"].is_null()) n.pos = e["pos"].get<int>();
      if (!c.add(n)) throw FormatError("duplicate circuit node " + n.to_string());
    }
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad circuit file: ") + e.what());
  } catch (const InputError& e) {
    throw FormatError(std::string("bad circuit file: ") + e.what());
  }
}

}  // namespace cdt
