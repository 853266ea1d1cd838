#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string_view>
#include <vector>

#include "cdt/model.hpp"

namespace cdt {

// Split of an activation into a relevant part (rel, driven by the chosen
// source) and an irrelevant part (irrel, everything else). rel + irrel is
// the activation itself.
struct Decomposition {
  Tensor rel;
  Tensor irrel;

  Decomposition() = default;
  // Throws DimensionError if the shapes differ.
  Decomposition(Tensor rel, Tensor irrel);

  const Shape& shape() const noexcept { return rel.shape(); }
  Tensor sum() const { return add(rel, irrel); }
  // Rows [r] of both parts, as [1 x cols].
  Decomposition rows(std::span<const int> r) const;
};

// x[n x in] * W[in x out] + b[out]. The bias is shared out between rel and
// irrel in proportion to |rel*W| and |irrel*W| elementwise; where both are
// below 1e-12 it is split evenly. An empty `b` means no bias.
Decomposition linear_decomp(const Decomposition& d, const Tensor& W, const Tensor& b);

// Every intermediate of one head's decomposition. `scores` is the scaled
// q.k product before masking; `probs` the masked softmax.
struct AttentionStages {
  Decomposition q, k, v;
  Decomposition scores;
  Decomposition probs;
  Decomposition z;
  Decomposition out;
};

// One head applied to a decomposed [seq x d_model] input. `bias_share` is
// this head's part of the layer output bias.
AttentionStages attention_decomp(const Decomposition& in, const HeadWeights& head, const Tensor& bias_share,
                                 bool causal);

// Layer normalization with statistics frozen from rel + irrel. The bias is
// shared out with the same magnitude rule as linear_decomp.
Decomposition layernorm_decomp(const Decomposition& d, const Tensor& scale, const Tensor& bias, float eps);

// Pointwise nonlinearity: rel' = (f(rel) + f(rel + irrel) - f(irrel)) / 2,
// irrel' = f(rel + irrel) - rel'.
Decomposition nonlin_decomp(const Decomposition& d, const std::function<float(float)>& f);
Decomposition gelu_decomp(const Decomposition& d);

// Where rel and irrel are both nonzero with opposite signs, the larger in
// magnitude takes the sum and the other becomes 0. Returns the number of
// entries changed.
std::size_t stabilize_signs(Decomposition& d);

// Decomposition of a source head's output: rel = a(s) - mean(s) and
// irrel = mean(s). With no means, the mean is taken as 0. A positional node
// puts rel only in its row; the other rows are fully irrelevant.
Decomposition init_source_decomposition(const ActivationCache& cache, const MeanCache* means, const Node& src);

struct TargetSpec {
  // Logits rows to decompose when targeting the model output.
  std::optional<std::vector<int>> output_rows;
  std::vector<Node> nodes;

  static TargetSpec model_output(std::vector<int> rows) { return TargetSpec{std::move(rows), {}}; }
  static TargetSpec of_nodes(std::vector<Node> nodes) { return TargetSpec{std::nullopt, std::move(nodes)}; }

  bool targets_output() const noexcept { return output_rows.has_value(); }
  // Smallest target layer; n_layers for the model output.
  int min_layer(const ModelConfig& config) const;
};

enum class StabilizeMode { by_depth, never, always };

// Identifies an intermediate reported to a propagation observer. head is -1
// for stages that are not per head.
struct StageId {
  int layer = -1;
  int head = -1;
  std::string_view name;
};

struct PropagateOptions {
  StabilizeMode stabilize = StabilizeMode::by_depth;
  // Blocks (attention or MLP) after which stabilization starts, counting the
  // source's own attention block as 1.
  int stabilize_after = 2;
  std::function<void(const StageId&, const Decomposition&)> observer;
};

struct PropagateResult {
  // Keyed by the requested target node. Positional targets hold their row.
  std::map<Node, Decomposition> nodes;
  // Present when the model output was targeted: [rows x vocab].
  std::optional<Decomposition> output;
};

// Propagates a source decomposition through every module downstream of the
// source head. Activations upstream of the source come from `cache`, which
// must be the unablated forward pass of the same input. Throws
// OrderingError when a node target is not in a later layer than the source
// (a target equal to the source returns d_src).
PropagateResult propagate(const Model& model, const ActivationCache& cache, const Node& src,
                          const Decomposition& d_src, const TargetSpec& targets, const PropagateOptions& options = {});

// Same, but starting from a decomposition of the residual stream after the
// attention block of `layer`. Used by propagate and by tests that need a
// residual-level source.
PropagateResult propagate_from_residual(const Model& model, const ActivationCache& cache, int layer,
                                        Decomposition resid_mid, const TargetSpec& targets,
                                        const PropagateOptions& options = {});

}  // namespace cdt
