#include "cdt/circuit.hpp"

#include <algorithm>

#include "cdt/error.hpp"

namespace cdt {

std::string to_string(Granularity g) { return g == Granularity::head ? "head" : "head_pos"; }
std::string to_string(AblationScheme s) { return s == AblationScheme::mean ? "mean" : "zero"; }

Granularity parse_granularity(const std::string& s) {
  if (s == "head") return Granularity::head;
  if (s == "head_pos") return Granularity::head_pos;
  throw InputError("unknown granularity '" + s + "' (expected head|head_pos)");
}

AblationScheme parse_ablation(const std::string& s) {
  if (s == "mean") return AblationScheme::mean;
  if (s == "zero") return AblationScheme::zero;
  throw InputError("unknown ablation scheme '" + s + "' (expected mean|zero)");
}

Circuit Circuit::full(const ModelConfig& config, Granularity granularity, AblationScheme ablation, int seq_len) {
  Circuit c(granularity, ablation);
  for (const Node& n : node_universe(config, granularity, seq_len)) c.add(n);
  return c;
}

bool Circuit::add(const Node& node, NodeProvenance provenance) {
  if (node.pos.has_value() != (granularity_ == Granularity::head_pos)) {
    throw InputError("node " + node.to_string() + " does not match circuit granularity " + to_string(granularity_));
  }
  if (!provenance_.emplace(node, provenance).second) return false;
  nodes_.push_back(node);
  return true;
}

bool Circuit::remove(const Node& node) {
  if (provenance_.erase(node) == 0) return false;
  nodes_.erase(std::find(nodes_.begin(), nodes_.end(), node));
  return true;
}

std::vector<Node> node_universe(const ModelConfig& config, Granularity granularity, int seq_len) {
  std::vector<Node> out;
  for (int l = 0; l < config.n_layers; ++l)
    for (int h = 0; h < config.n_heads; ++h) {
      if (granularity == Granularity::head) {
        out.push_back(Node{l, h, std::nullopt});
      } else {
        for (int p = 0; p < seq_len; ++p) out.push_back(Node{l, h, p});
      }
    }
  return out;
}

AblationPlan ablation_plan_for(const Model& model, const Circuit& circuit, int seq_len, const MeanCache* means) {
  const auto& cfg = model.config();
  for (const Node& n : circuit.nodes()) {
    if (!model.valid_node(n, seq_len)) throw NodeRangeError("circuit node " + n.to_string() + " is outside the model");
  }
  AblationPlan plan;
  plan.means = means;
  const Replacement repl = circuit.ablation() == AblationScheme::mean ? Replacement::mean() : Replacement::zero();
  if (circuit.ablation() == AblationScheme::mean && !means) {
    throw InputError("mean-ablated circuit evaluation needs mean activations");
  }
  for (int l = 0; l < cfg.n_layers; ++l)
    for (int h = 0; h < cfg.n_heads; ++h) {
      if (circuit.granularity() == Granularity::head) {
        if (!circuit.contains(Node{l, h, std::nullopt})) plan.entries.emplace(Node{l, h, std::nullopt}, repl);
        continue;
      }
      std::vector<int> absent;
      for (int p = 0; p < seq_len; ++p)
        if (!circuit.contains(Node{l, h, p})) absent.push_back(p);
      if (static_cast<int>(absent.size()) == seq_len) {
        plan.entries.emplace(Node{l, h, std::nullopt}, repl);
      } else {
        for (int p : absent) plan.entries.emplace(Node{l, h, p}, repl);
      }
    }
  return plan;
}

ActivationCache run_ablated(const Model& model, std::span<const int> tokens, const Circuit& circuit,
                            const MeanCache* means) {
  const int seq = static_cast<int>(tokens.size());
  return forward(model, tokens, ablation_plan_for(model, circuit, seq, means));
}

}  // namespace cdt
