#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdt/tensor.hpp"

namespace cdt {

enum class Arch { decoder, encoder };

struct ModelConfig {
  Arch arch = Arch::decoder;
  int n_layers = 1;
  int n_heads = 1;
  int d_model = 1;
  int d_head = 1;
  int d_mlp = 0;  // 0 => attention-only
  int vocab_size = 1;
  int max_seq = 1;
  float ln_eps = 1e-5f;
  bool has_final_ln = true;
  std::string positional = "learned-absolute";

  bool causal() const noexcept { return arch == Arch::decoder; }
  bool has_mlp() const noexcept { return d_mlp > 0; }
  // Throws InputError when the dimensions are inconsistent.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

std::string to_string(Arch arch);
Arch parse_arch(const std::string& s);

// An attention head's output, optionally restricted to one sequence position.
struct Node {
  int layer = 0;
  int head = 0;
  std::optional<int> pos;

  Node head_only() const { return Node{layer, head, std::nullopt}; }
  std::string to_string() const;

  friend bool operator==(const Node&, const Node&) = default;
  friend std::strong_ordering operator<=>(const Node& a, const Node& b) {
    if (auto c = a.layer <=> b.layer; c != 0) return c;
    if (auto c = a.head <=> b.head; c != 0) return c;
    if (auto c = a.pos.has_value() <=> b.pos.has_value(); c != 0) return c;
    return a.pos.value_or(-1) <=> b.pos.value_or(-1);
  }
};

struct HeadWeights {
  Tensor W_Q, W_K, W_V;  // [d_model x d_head]
  Tensor b_Q, b_K, b_V;  // [d_head]
  Tensor W_O;            // [d_head x d_model]
};

struct LayerWeights {
  Tensor ln1_w, ln1_b;  // [d_model]
  std::vector<HeadWeights> heads;
  Tensor b_O;  // [d_model], shared by the layer's heads
  // Present only when d_mlp > 0.
  Tensor ln2_w, ln2_b;
  Tensor W_in, b_in;    // [d_model x d_mlp], [d_mlp]
  Tensor W_out, b_out;  // [d_mlp x d_model], [d_model]
};

struct ModelWeights {
  Tensor W_E;    // [vocab x d_model]
  Tensor W_pos;  // [max_seq x d_model]
  std::vector<LayerWeights> blocks;
  Tensor ln_final_w, ln_final_b;  // present iff has_final_ln
  Tensor W_U;                     // [d_model x vocab]
};

// Zero-filled weights with every shape implied by the config.
ModelWeights zero_weights(const ModelConfig& config);

// Pre-layernorm transformer. Immutable after construction.
class Model {
 public:
  Model(ModelConfig config, ModelWeights weights);

  const ModelConfig& config() const noexcept { return config_; }
  const ModelWeights& weights() const noexcept { return weights_; }
  const LayerWeights& layer(int l) const { return weights_.blocks.at(static_cast<std::size_t>(l)); }
  const HeadWeights& head(int l, int h) const { return layer(l).heads.at(static_cast<std::size_t>(h)); }
  // Each head owns an equal share of the layer's output bias, so that the
  // per-head contributions sum exactly to the attention block output.
  const Tensor& head_bias_share(int l) const { return bias_shares_.at(static_cast<std::size_t>(l)); }

  bool valid_node(const Node& n, std::optional<int> seq_len = std::nullopt) const noexcept;

 private:
  ModelConfig config_;
  ModelWeights weights_;
  std::vector<Tensor> bias_shares_;
};

// ---- activations ----------------------------------------------------------

struct HeadCache {
  Tensor q, k, v;   // [seq x d_head]
  Tensor scores;    // [seq x seq], scaled q.k, before masking
  Tensor pattern;   // [seq x seq]
  Tensor z;         // [seq x d_head]
  Tensor out;       // [seq x d_model] residual contribution, after any ablation
};

struct LayerCache {
  Tensor resid_pre;
  Tensor ln1_out;
  std::vector<HeadCache> heads;
  Tensor resid_mid;
  Tensor ln2_out, mlp_pre, mlp_post, mlp_out;  // empty for attention-only models
  Tensor resid_post;
};

struct ActivationCache {
  std::vector<int> tokens;
  Tensor embed;  // token + position embedding, [seq x d_model]
  std::vector<LayerCache> layers;
  Tensor final_resid;
  Tensor ln_final_out;
  Tensor logits;  // [seq x vocab]

  std::size_t seq_len() const noexcept { return tokens.size(); }
  const Tensor& head_out(int layer, int head) const {
    return layers.at(static_cast<std::size_t>(layer)).heads.at(static_cast<std::size_t>(head)).out;
  }
};

// Per-head mean of cached head outputs over a template-aligned dataset,
// position-wise: head_out[layer][head] is [seq x d_model].
struct MeanCache {
  std::size_t seq_len = 0;
  std::vector<std::vector<Tensor>> head_out;

  const Tensor& at(int layer, int head) const {
    return head_out.at(static_cast<std::size_t>(layer)).at(static_cast<std::size_t>(head));
  }
};

struct Replacement {
  enum class Kind { mean, zero, value };
  Kind kind = Kind::zero;
  // For Kind::value: [seq x d_model] for a whole-head node, [d_model] for a
  // positional node.
  Tensor value;

  static Replacement mean() { return {Kind::mean, {}}; }
  static Replacement zero() { return {Kind::zero, {}}; }
  static Replacement with(Tensor v) { return {Kind::value, std::move(v)}; }
};

// Nodes whose residual contribution is swapped out during forward. An empty
// plan is the unablated model.
struct AblationPlan {
  std::map<Node, Replacement> entries;
  const MeanCache* means = nullptr;  // required when any entry is Kind::mean

  bool empty() const noexcept { return entries.empty(); }
};

ActivationCache forward(const Model& model, std::span<const int> tokens, const AblationPlan& plan = {});

MeanCache mean_activations(const Model& model, std::span<const std::vector<int>> dataset);

}  // namespace cdt
