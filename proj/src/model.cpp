#include "cdt/model.hpp"

#include <cmath>

#include "cdt/error.hpp"

namespace cdt {

std::string to_string(Arch arch) { return arch == Arch::decoder ? "decoder" : "encoder"; }

Arch parse_arch(const std::string& s) {
  if (s == "decoder") return Arch::decoder;
  if (s == "encoder") return Arch::encoder;
  throw InputError("unknown arch '" + s + "'");
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw InputError(std::string("config: ") + name + " must be >= 1, got " + std::to_string(v));
  };
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_model, "d_model");
  positive(d_head, "d_head");
  positive(vocab_size, "vocab_size");
  positive(max_seq, "max_seq");
  if (d_mlp < 0) throw InputError("config: d_mlp must be >= 0");
  if (n_heads * d_head != d_model) {
    throw InputError("config: n_heads * d_head (" + std::to_string(n_heads * d_head) + ") != d_model (" +
                     std::to_string(d_model) + ")");
  }
  if (!(ln_eps > 0.0f)) throw InputError("config: ln_eps must be > 0");
  if (positional != "learned-absolute") throw InputError("config: unsupported positional scheme '" + positional + "'");
}

std::string Node::to_string() const {
  std::string s = "(" + std::to_string(layer) + ", " + std::to_string(head);
  if (pos) s += ", " + std::to_string(*pos);
  return s + ")";
}

ModelWeights zero_weights(const ModelConfig& c) {
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head);
  const auto dm = static_cast<std::size_t>(c.d_mlp);
  ModelWeights w;
  w.W_E = Tensor({static_cast<std::size_t>(c.vocab_size), d});
  w.W_pos = Tensor({static_cast<std::size_t>(c.max_seq), d});
  for (int l = 0; l < c.n_layers; ++l) {
    LayerWeights lw;
    lw.ln1_w = Tensor::filled({d}, 1.0f);
    lw.ln1_b = Tensor({d});
    for (int h = 0; h < c.n_heads; ++h) {
      HeadWeights hw{Tensor({d, dh}), Tensor({d, dh}), Tensor({d, dh}), Tensor({dh}),
                     Tensor({dh}),    Tensor({dh}),    Tensor({dh, d})};
      lw.heads.push_back(std::move(hw));
    }
    lw.b_O = Tensor({d});
    if (c.has_mlp()) {
      lw.ln2_w = Tensor::filled({d}, 1.0f);
      lw.ln2_b = Tensor({d});
      lw.W_in = Tensor({d, dm});
      lw.b_in = Tensor({dm});
      lw.W_out = Tensor({dm, d});
      lw.b_out = Tensor({d});
    }
    w.blocks.push_back(std::move(lw));
  }
  if (c.has_final_ln) {
    w.ln_final_w = Tensor::filled({d}, 1.0f);
    w.ln_final_b = Tensor({d});
  }
  w.W_U = Tensor({d, static_cast<std::size_t>(c.vocab_size)});
  return w;
}

namespace {

void expect_shape(const Tensor& t, const Shape& expected, const std::string& name) {
  if (t.shape() != expected) {
    throw FormatError("shape mismatch for " + name + ": expected " + shape_to_string(expected) + ", got " +
                      shape_to_string(t.shape()));
  }
  t.require_finite(name);
}

}  // namespace

Model::Model(ModelConfig config, ModelWeights weights) : config_(std::move(config)), weights_(std::move(weights)) {
  config_.validate();
  const auto& c = config_;
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto dh = static_cast<std::size_t>(c.d_head);
  const auto dm = static_cast<std::size_t>(c.d_mlp);
  expect_shape(weights_.W_E, {static_cast<std::size_t>(c.vocab_size), d}, "embed.W_E");
  expect_shape(weights_.W_pos, {static_cast<std::size_t>(c.max_seq), d}, "pos.W_pos");
  if (weights_.blocks.size() != static_cast<std::size_t>(c.n_layers)) {
    throw FormatError("expected " + std::to_string(c.n_layers) + " blocks, got " +
                      std::to_string(weights_.blocks.size()));
  }
  for (int l = 0; l < c.n_layers; ++l) {
    const auto& lw = weights_.blocks[static_cast<std::size_t>(l)];
    const std::string p = "blocks." + std::to_string(l) + ".";
    expect_shape(lw.ln1_w, {d}, p + "ln1.w");
    expect_shape(lw.ln1_b, {d}, p + "ln1.b");
    if (lw.heads.size() != static_cast<std::size_t>(c.n_heads)) {
      throw FormatError(p + "attn: expected " + std::to_string(c.n_heads) + " heads");
    }
    for (int h = 0; h < c.n_heads; ++h) {
      const auto& hw = lw.heads[static_cast<std::size_t>(h)];
      const std::string hp = p + "attn.";
      const std::string hs = "[" + std::to_string(h) + "]";
      expect_shape(hw.W_Q, {d, dh}, hp + "W_Q" + hs);
      expect_shape(hw.W_K, {d, dh}, hp + "W_K" + hs);
      expect_shape(hw.W_V, {d, dh}, hp + "W_V" + hs);
      expect_shape(hw.b_Q, {dh}, hp + "b_Q" + hs);
      expect_shape(hw.b_K, {dh}, hp + "b_K" + hs);
      expect_shape(hw.b_V, {dh}, hp + "b_V" + hs);
      expect_shape(hw.W_O, {dh, d}, hp + "W_O" + hs);
    }
    expect_shape(lw.b_O, {d}, p + "attn.b_O");
    if (c.has_mlp()) {
      expect_shape(lw.ln2_w, {d}, p + "ln2.w");
      expect_shape(lw.ln2_b, {d}, p + "ln2.b");
      expect_shape(lw.W_in, {d, dm}, p + "mlp.W_in");
      expect_shape(lw.b_in, {dm}, p + "mlp.b_in");
      expect_shape(lw.W_out, {dm, d}, p + "mlp.W_out");
      expect_shape(lw.b_out, {d}, p + "mlp.b_out");
    }
    bias_shares_.push_back(scale(lw.b_O, 1.0f / static_cast<float>(c.n_heads)));
  }
  if (c.has_final_ln) {
    expect_shape(weights_.ln_final_w, {d}, "ln_final.w");
    expect_shape(weights_.ln_final_b, {d}, "ln_final.b");
  }
  expect_shape(weights_.W_U, {d, static_cast<std::size_t>(c.vocab_size)}, "unembed.W_U");
}

bool Model::valid_node(const Node& n, std::optional<int> seq_len) const noexcept {
  if (n.layer < 0 || n.layer >= config_.n_layers) return false;
  if (n.head < 0 || n.head >= config_.n_heads) return false;
  if (n.pos) {
    if (*n.pos < 0) return false;
    const int limit = seq_len.value_or(config_.max_seq);
    if (*n.pos >= limit) return false;
  }
  return true;
}

namespace {

Tensor replacement_rows(const Replacement& r, const Node& node, const AblationPlan& plan, std::size_t seq,
                        std::size_t d_model) {
  switch (r.kind) {
    case Replacement::Kind::zero:
      return node.pos ? Tensor({d_model}) : Tensor({seq, d_model});
    case Replacement::Kind::mean: {
      if (!plan.means) throw InputError("ablation plan mean-ablates " + node.to_string() + " without a MeanCache");
      if (plan.means->seq_len != seq) {
        throw InputError("mean cache has sequence length " + std::to_string(plan.means->seq_len) + ", input has " +
                         std::to_string(seq));
      }
      const Tensor& m = plan.means->at(node.layer, node.head);
      if (!node.pos) return m;
      const auto row = m.row(static_cast<std::size_t>(*node.pos));
      return Tensor({d_model}, std::vector<float>(row.begin(), row.end()));
    }
    case Replacement::Kind::value: {
      const Shape want = node.pos ? Shape{d_model} : Shape{seq, d_model};
      if (r.value.shape() != want) {
        throw DimensionError("replacement for " + node.to_string() + " has shape " + shape_to_string(r.value.shape()) +
                             ", expected " + shape_to_string(want));
      }
      return r.value;
    }
  }
  return {};
}

}  // namespace

ActivationCache forward(const Model& model, std::span<const int> tokens, const AblationPlan& plan) {
  const auto& c = model.config();
  const auto& w = model.weights();
  const std::size_t seq = tokens.size();
  const auto d = static_cast<std::size_t>(c.d_model);
  if (seq == 0) throw InputError("empty token sequence");
  if (seq > static_cast<std::size_t>(c.max_seq)) {
    throw InputError("sequence length " + std::to_string(seq) + " exceeds max_seq " + std::to_string(c.max_seq));
  }
  for (std::size_t t = 0; t < seq; ++t) {
    if (tokens[t] < 0 || tokens[t] >= c.vocab_size) {
      throw InputError("token id " + std::to_string(tokens[t]) + " at position " + std::to_string(t) +
                       " outside vocabulary of size " + std::to_string(c.vocab_size));
    }
  }
  for (const auto& [node, _] : plan.entries) {
    if (!model.valid_node(node, static_cast<int>(seq))) throw InputError("ablation plan node " + node.to_string() + " is not valid for this model/input");
  }

  ActivationCache cache;
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.embed = Tensor({seq, d});
  for (std::size_t t = 0; t < seq; ++t) {
    auto e = w.W_E.row(static_cast<std::size_t>(tokens[t]));
    auto p = w.W_pos.row(t);
    auto out = cache.embed.row(t);
    for (std::size_t j = 0; j < d; ++j) out[j] = e[j] + p[j];
  }

  const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(c.d_head));
  Tensor resid = cache.embed;
  cache.layers.resize(static_cast<std::size_t>(c.n_layers));
  for (int l = 0; l < c.n_layers; ++l) {
    auto& lc = cache.layers[static_cast<std::size_t>(l)];
    const auto& lw = model.layer(l);
    lc.resid_pre = resid;
    lc.ln1_out = layer_norm(resid, lw.ln1_w, lw.ln1_b, c.ln_eps);
    lc.heads.resize(static_cast<std::size_t>(c.n_heads));
    Tensor mid = resid;
    for (int h = 0; h < c.n_heads; ++h) {
      auto& hc = lc.heads[static_cast<std::size_t>(h)];
      const auto& hw = model.head(l, h);
      hc.q = add_row_vector(matmul(lc.ln1_out, hw.W_Q), hw.b_Q);
      hc.k = add_row_vector(matmul(lc.ln1_out, hw.W_K), hw.b_K);
      hc.v = add_row_vector(matmul(lc.ln1_out, hw.W_V), hw.b_V);
      hc.scores = scale(matmul_transposed(hc.q, hc.k), inv_sqrt_dh);
      hc.pattern = masked_softmax(hc.scores, c.causal());
      hc.z = matmul(hc.pattern, hc.v);
      hc.out = add_row_vector(matmul(hc.z, hw.W_O), model.head_bias_share(l));

      // Whole-head entry first, then any per-position entries on top.
      const Node whole{l, h, std::nullopt};
      if (auto it = plan.entries.find(whole); it != plan.entries.end()) {
        hc.out = replacement_rows(it->second, whole, plan, seq, d);
      }
      for (auto it = plan.entries.lower_bound(Node{l, h, 0}); it != plan.entries.end(); ++it) {
        const Node& n = it->first;
        if (n.layer != l || n.head != h || !n.pos) break;
        const Tensor row = replacement_rows(it->second, n, plan, seq, d);
        auto dst = hc.out.row(static_cast<std::size_t>(*n.pos));
        std::copy(row.data().begin(), row.data().end(), dst.begin());
      }
      add_inplace(mid, hc.out);
    }
    lc.resid_mid = mid;
    if (c.has_mlp()) {
      lc.ln2_out = layer_norm(mid, lw.ln2_w, lw.ln2_b, c.ln_eps);
      lc.mlp_pre = add_row_vector(matmul(lc.ln2_out, lw.W_in), lw.b_in);
      lc.mlp_post = gelu(lc.mlp_pre);
      lc.mlp_out = add_row_vector(matmul(lc.mlp_post, lw.W_out), lw.b_out);
      lc.resid_post = add(mid, lc.mlp_out);
    } else {
      lc.resid_post = mid;
    }
    resid = lc.resid_post;
  }
  cache.final_resid = resid;
  cache.ln_final_out = c.has_final_ln ? layer_norm(resid, w.ln_final_w, w.ln_final_b, c.ln_eps) : resid;
  cache.logits = matmul(cache.ln_final_out, w.W_U);
  cache.logits.require_finite("logits");
  return cache;
}

MeanCache mean_activations(const Model& model, std::span<const std::vector<int>> dataset) {
  if (dataset.empty()) throw InputError("mean_activations: empty dataset");
  const std::size_t seq = dataset.front().size();
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset[i].size() != seq) {
      throw InputError("mean_activations: ragged dataset, sample 0 has length " + std::to_string(seq) + ", sample " +
                       std::to_string(i) + " has " + std::to_string(dataset[i].size()));
    }
  }
  const auto& c = model.config();
  const auto d = static_cast<std::size_t>(c.d_model);
  const auto L = static_cast<std::size_t>(c.n_layers);
  const auto H = static_cast<std::size_t>(c.n_heads);
  std::vector<std::vector<double>> sums(L * H, std::vector<double>(seq * d, 0.0));
  for (const auto& tokens : dataset) {
    const ActivationCache cache = forward(model, tokens);
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t h = 0; h < H; ++h) {
        auto src = cache.layers[l].heads[h].out.data();
        auto& acc = sums[l * H + h];
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += src[i];
      }
  }
  MeanCache m;
  m.seq_len = seq;
  m.head_out.resize(L);
  const double n = static_cast<double>(dataset.size());
  for (std::size_t l = 0; l < L; ++l)
    for (std::size_t h = 0; h < H; ++h) {
      std::vector<float> data(seq * d);
      const auto& acc = sums[l * H + h];
      for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(acc[i] / n);
      m.head_out[l].emplace_back(Shape{seq, d}, std::move(data));
    }
  return m;
}

}  // namespace cdt
