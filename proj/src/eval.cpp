#include "cdt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>

#include "cdt/error.hpp"
#include "cdt/parallel.hpp"
#include "cdt/random.hpp"

namespace cdt {

namespace {

std::span<const Sample> eval_samples(const TaskSpec& task) {
  if (task.eval.empty()) throw InputError("task " + task.name + " has no evaluation samples");
  return task.eval;
}

int sample_len(std::span<const Sample> samples) {
  return samples.empty() ? 0 : static_cast<int>(samples.front().tokens.size());
}

}  // namespace

double circuit_metric(const Model& model, const TaskSpec& task, std::span<const Sample> samples,
                      const Circuit& circuit, const MeanCache* means) {
  if (samples.empty()) throw InputError("no samples to evaluate");
  const AblationPlan plan = ablation_plan_for(model, circuit, sample_len(samples), means);
  double sum = 0.0;
  for (const Sample& s : samples) sum += task.metric_on(forward(model, s.tokens, plan).logits, s);
  return sum / static_cast<double>(samples.size());
}

double model_metric(const Model& model, const TaskSpec& task, std::span<const Sample> samples) {
  if (samples.empty()) throw InputError("no samples to evaluate");
  double sum = 0.0;
  for (const Sample& s : samples) sum += task.metric_on(forward(model, s.tokens).logits, s);
  return sum / static_cast<double>(samples.size());
}

double correct_rate(const Model& model, const TaskSpec& task, std::span<const Sample> samples,
                    const Circuit* circuit, const MeanCache* means) {
  if (samples.empty()) throw InputError("no samples to evaluate");
  AblationPlan plan;
  if (circuit) plan = ablation_plan_for(model, *circuit, sample_len(samples), means);
  int ok = 0;
  for (const Sample& s : samples) ok += task.correct_on(forward(model, s.tokens, plan).logits, s) ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(samples.size());
}

double faithfulness_ratio(double m_C, double m_empty, double m_M) {
  const double denom = m_M - m_empty;
  if (!(std::fabs(denom) > 1e-12)) {
    throw NumericError("faithfulness undefined: full-model metric equals the all-ablated metric");
  }
  return (m_C - m_empty) / denom;
}

FaithfulnessBaseline faithfulness_baseline(const Model& model, const TaskSpec& task, Granularity granularity,
                                           AblationScheme scheme, const MeanCache* means) {
  const auto samples = eval_samples(task);
  FaithfulnessBaseline b;
  b.m_M = model_metric(model, task, samples);
  b.m_empty = circuit_metric(model, task, samples, Circuit(granularity, scheme), means);
  return b;
}

FaithfulnessReport faithfulness(const Circuit& circuit, const Model& model, const TaskSpec& task, const MeanCache* means) {
  const auto samples = eval_samples(task);
  const auto base = faithfulness_baseline(model, task, circuit.granularity(), circuit.ablation(), means);
  FaithfulnessReport r;
  r.m_M = base.m_M;
  r.m_empty = base.m_empty;
  r.m_C = circuit_metric(model, task, samples, circuit, means);
  r.faithfulness = faithfulness_ratio(r.m_C, r.m_empty, r.m_M);
  return r;
}

RocResult roc_from_points(std::vector<std::pair<double, double>> points) {
  points.emplace_back(0.0, 0.0);
  points.emplace_back(1.0, 1.0);
  std::sort(points.begin(), points.end());
  points.erase(std::unique(points.begin(), points.end()), points.end());
  RocResult r;
  for (std::size_t i = 1; i < points.size(); ++i) {
    const auto [x0, y0] = points[i - 1];
    const auto [x1, y1] = points[i];
    r.auc += (x1 - x0) * (y0 + y1) / 2.0;
  }
  r.points = std::move(points);
  return r;
}

namespace {

std::set<Node> reference_heads(std::span<const Node> reference, const ModelConfig& config) {
  if (reference.empty()) throw InputError("reference circuit is empty");
  std::set<Node> out;
  for (const Node& n : reference) {
    if (n.layer < 0 || n.layer >= config.n_layers || n.head < 0 || n.head >= config.n_heads) {
      throw NodeRangeError("reference node " + n.to_string() + " is outside the model");
    }
    out.insert(n.head_only());
  }
  return out;
}

}  // namespace

RocResult roc_from_scores(const std::map<Node, double>& scores, std::span<const Node> reference,
                          const ModelConfig& config) {
  const auto positives = reference_heads(reference, config);
  std::map<Node, double> pooled;
  for (const Node& n : node_universe(config, Granularity::head)) pooled[n] = -std::numeric_limits<double>::infinity();
  for (const auto& [n, s] : scores) {
    auto it = pooled.find(n.head_only());
    if (it == pooled.end()) throw NodeRangeError("scored node " + n.to_string() + " is outside the model");
    it->second = std::max(it->second, s);
  }
  const double P = static_cast<double>(positives.size());
  const double N = static_cast<double>(pooled.size()) - P;
  std::vector<double> thresholds;
  for (const auto& [n, s] : pooled) thresholds.push_back(s);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  std::vector<std::pair<double, double>> pts;
  for (double t : thresholds) {
    double tp = 0, fp = 0;
    for (const auto& [n, s] : pooled) {
      if (s < t) continue;
      (positives.contains(n) ? tp : fp) += 1.0;
    }
    pts.emplace_back(N > 0 ? fp / N : 0.0, tp / P);
  }
  return roc_from_points(std::move(pts));
}

RocResult roc_from_circuits(std::span<const Circuit> circuits, std::span<const Node> reference,
                            const ModelConfig& config) {
  const auto positives = reference_heads(reference, config);
  const double P = static_cast<double>(positives.size());
  const double N = static_cast<double>(config.n_layers) * config.n_heads - P;
  std::vector<std::pair<double, double>> pts;
  for (const Circuit& c : circuits) {
    std::set<Node> heads;
    for (const Node& n : c.nodes()) heads.insert(n.head_only());
    double tp = 0, fp = 0;
    for (const Node& n : heads) (positives.contains(n) ? tp : fp) += 1.0;
    pts.emplace_back(N > 0 ? fp / N : 0.0, tp / P);
  }
  return roc_from_points(std::move(pts));
}

RandomCircuitTest random_circuit_test(const Circuit& circuit, const Model& model, const TaskSpec& task,
                                      const MeanCache* means, std::span<const int> sizes, int repeats,
                                      std::uint64_t seed, int workers) {
  const auto samples = eval_samples(task);
  const int seq = sample_len(samples);
  const auto universe = node_universe(model.config(), circuit.granularity(), seq);
  for (int s : sizes) {
    if (s < 0 || s > static_cast<int>(universe.size())) {
      throw InputError("random circuit size " + std::to_string(s) + " exceeds the " +
                       std::to_string(universe.size()) + " available nodes");
    }
  }
  if (repeats < 1) throw InputError("random circuit test needs at least one repeat");

  const auto base = faithfulness_baseline(model, task, circuit.granularity(), circuit.ablation(), means);
  RandomCircuitTest out;
  out.sizes.assign(sizes.begin(), sizes.end());
  out.repeats = repeats;
  out.candidate_faithfulness =
      faithfulness_ratio(circuit_metric(model, task, samples, circuit, means), base.m_empty, base.m_M);

  // Draws happen serially so they do not depend on the worker count.
  Rng rng(seed);
  std::vector<Circuit> draws;
  for (int s : sizes)
    for (int r = 0; r < repeats; ++r) {
      Circuit c(circuit.granularity(), circuit.ablation());
      for (int i : rng.sample_distinct(static_cast<int>(universe.size()), s)) c.add(universe[static_cast<std::size_t>(i)]);
      draws.push_back(std::move(c));
    }
  std::vector<double> f(draws.size());
  parallel_for(draws.size(), workers, [&](std::size_t i) {
    f[i] = faithfulness_ratio(circuit_metric(model, task, samples, draws[i], means), base.m_empty, base.m_M);
  });

  out.q_star = 1.0;
  for (std::size_t si = 0; si < sizes.size(); ++si) {
    std::vector<double> fs(f.begin() + static_cast<std::ptrdiff_t>(si * static_cast<std::size_t>(repeats)),
                           f.begin() + static_cast<std::ptrdiff_t>((si + 1) * static_cast<std::size_t>(repeats)));
    const auto beaten = std::count_if(fs.begin(), fs.end(), [&](double x) { return x < out.candidate_faithfulness; });
    const double frac = static_cast<double>(beaten) / repeats;
    out.beaten_fraction.push_back(frac);
    out.random_faithfulness.push_back(std::move(fs));
    out.q_star = std::min(out.q_star, frac);
  }
  return out;
}

std::vector<CurvePoint> faithfulness_curve(std::span<const Node> ranked, const Model& model, const TaskSpec& task,
                                           const MeanCache* means, Granularity granularity, AblationScheme scheme,
                                           int stride, std::uint64_t seed, int workers) {
  if (stride < 1) throw InputError("curve stride must be positive");
  const auto samples = eval_samples(task);
  const auto base = faithfulness_baseline(model, task, granularity, scheme, means);
  const int N = static_cast<int>(ranked.size());
  std::vector<int> ks;
  for (int k = 0; k < N; k += stride) ks.push_back(k);
  ks.push_back(N);

  std::vector<Node> shuffled(ranked.begin(), ranked.end());
  Rng rng(seed);
  rng.shuffle(shuffled);

  auto top = [&](std::span<const Node> order, int k) {
    Circuit c(granularity, scheme);
    for (int i = 0; i < k; ++i) c.add(order[static_cast<std::size_t>(i)]);
    return c;
  };
  auto f_of = [&](const Circuit& c) {
    return faithfulness_ratio(circuit_metric(model, task, samples, c, means), base.m_empty, base.m_M);
  };

  std::vector<CurvePoint> out(ks.size());
  parallel_for(ks.size(), workers, [&](std::size_t i) {
    out[i].k = ks[i];
    out[i].faithfulness = f_of(top(ranked, ks[i]));
    out[i].baseline_faithfulness = f_of(top(shuffled, ks[i]));
  });
  return out;
}

void write_curve_csv(const std::filesystem::path& path, std::span<const CurvePoint> curve) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open " + path.string() + " for writing");
  out.precision(10);
  out << "k,faithfulness,baseline_faithfulness\n";
  for (const auto& p : curve) out << p.k << ',' << p.faithfulness << ',' << p.baseline_faithfulness << '\n';
}

}  // namespace cdt
