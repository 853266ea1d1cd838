#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "cdt/model.hpp"

namespace cdt {

enum class Granularity { head, head_pos };
enum class AblationScheme { mean, zero };

std::string to_string(Granularity g);
std::string to_string(AblationScheme s);
Granularity parse_granularity(const std::string& s);
AblationScheme parse_ablation(const std::string& s);

struct NodeProvenance {
  int iteration = -1;
  double score = 0.0;
};

// A set of nodes evaluated by ablating everything outside it. Nodes keep
// their insertion order; all nodes share the circuit's granularity.
class Circuit {
 public:
  Circuit() = default;
  Circuit(Granularity granularity, AblationScheme ablation) : granularity_(granularity), ablation_(ablation) {}

  // Every node of the model at the given granularity.
  static Circuit full(const ModelConfig& config, Granularity granularity, AblationScheme ablation, int seq_len = 0);

  Granularity granularity() const noexcept { return granularity_; }
  AblationScheme ablation() const noexcept { return ablation_; }
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  bool empty() const noexcept { return nodes_.empty(); }

  // Returns false if the node was already present. Throws InputError when the
  // node's granularity does not match the circuit's.
  bool add(const Node& node, NodeProvenance provenance = {});
  bool remove(const Node& node);
  bool contains(const Node& node) const { return provenance_.contains(node); }
  const NodeProvenance& provenance(const Node& node) const { return provenance_.at(node); }

 private:
  Granularity granularity_ = Granularity::head;
  AblationScheme ablation_ = AblationScheme::mean;
  std::vector<Node> nodes_;
  std::map<Node, NodeProvenance> provenance_;
};

// All (layer, head) nodes, or all (layer, head, pos) nodes for pos < seq_len.
std::vector<Node> node_universe(const ModelConfig& config, Granularity granularity, int seq_len = 0);

// Plan that ablates every node outside the circuit under its scheme. At
// position granularity a head is ablated only at the positions it is absent.
AblationPlan ablation_plan_for(const Model& model, const Circuit& circuit, int seq_len, const MeanCache* means);

// C(x): forward with everything outside `circuit` ablated.
ActivationCache run_ablated(const Model& model, std::span<const int> tokens, const Circuit& circuit,
                            const MeanCache* means);

}  // namespace cdt
