#include "cdt/decomp.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "cdt/error.hpp"

namespace cdt {

namespace {

constexpr double kShareFloor = 1e-12;

// Adds `b` (one value per column) to rel/irrel pre-activations in place,
// shared by magnitude.
void share_bias(Tensor& rel, Tensor& irrel, const Tensor& b) {
  if (b.empty()) return;
  const std::size_t n = rel.shape().back();
  if (b.size() != n) {
    throw DimensionError("bias of length " + std::to_string(b.size()) + " does not match width " + std::to_string(n));
  }
  auto r = rel.data();
  auto g = irrel.data();
  for (std::size_t i = 0; i < r.size(); ++i) {
    const double bias = b[i % n];
    const double ar = std::fabs(static_cast<double>(r[i]));
    const double ag = std::fabs(static_cast<double>(g[i]));
    const double denom = ar + ag;
    double rel_share = 0.5;
    if (denom >= kShareFloor) rel_share = ar / denom;
    const double to_rel = bias * rel_share;
    r[i] = static_cast<float>(r[i] + to_rel);
    g[i] = static_cast<float>(g[i] + (bias - to_rel));
  }
}

void require_same(const Tensor& a, const Tensor& b, std::string_view what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  }
}

Decomposition add_decomp(const Decomposition& a, const Decomposition& b) {
  return Decomposition(add(a.rel, b.rel), add(a.irrel, b.irrel));
}

}  // namespace

Decomposition::Decomposition(Tensor r, Tensor i) : rel(std::move(r)), irrel(std::move(i)) {
  require_same(rel, irrel, "decomposition parts differ in shape");
}

Decomposition Decomposition::rows(std::span<const int> r) const {
  const std::size_t cols = rel.cols();
  std::vector<float> rd, id;
  rd.reserve(r.size() * cols);
  id.reserve(r.size() * cols);
  for (int row : r) {
    if (row < 0 || static_cast<std::size_t>(row) >= rel.rows()) {
      throw InputError("row " + std::to_string(row) + " out of range for " + shape_to_string(rel.shape()));
    }
    auto a = rel.row(static_cast<std::size_t>(row));
    auto b = irrel.row(static_cast<std::size_t>(row));
    rd.insert(rd.end(), a.begin(), a.end());
    id.insert(id.end(), b.begin(), b.end());
  }
  return Decomposition(Tensor({r.size(), cols}, std::move(rd)), Tensor({r.size(), cols}, std::move(id)));
}

Decomposition linear_decomp(const Decomposition& d, const Tensor& W, const Tensor& b) {
  Tensor r = matmul(d.rel, W);
  Tensor g = matmul(d.irrel, W);
  share_bias(r, g, b);
  return Decomposition(std::move(r), std::move(g));
}

AttentionStages attention_decomp(const Decomposition& in, const HeadWeights& head, const Tensor& bias_share,
                                 bool causal) {
  AttentionStages s;
  s.q = linear_decomp(in, head.W_Q, head.b_Q);
  s.k = linear_decomp(in, head.W_K, head.b_K);
  s.v = linear_decomp(in, head.W_V, head.b_V);

  const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(head.W_Q.cols()));
  Tensor rel_scores = scale(matmul_transposed(s.q.rel, s.k.rel), inv_sqrt);
  Tensor full_scores = scale(matmul_transposed(s.q.sum(), s.k.sum()), inv_sqrt);
  Tensor irrel_scores = sub(full_scores, rel_scores);
  s.scores = Decomposition(std::move(rel_scores), std::move(irrel_scores));

  Tensor rel_probs = masked_softmax(s.scores.rel, causal);
  Tensor full_probs = masked_softmax(full_scores, causal);
  Tensor irrel_probs = sub(full_probs, rel_probs);
  s.probs = Decomposition(rel_probs, std::move(irrel_probs));

  Tensor rel_z = matmul(rel_probs, s.v.rel);
  Tensor full_z = matmul(full_probs, s.v.sum());
  Tensor irrel_z = sub(full_z, rel_z);
  s.z = Decomposition(std::move(rel_z), std::move(irrel_z));

  s.out = linear_decomp(s.z, head.W_O, bias_share);
  return s;
}

Decomposition layernorm_decomp(const Decomposition& d, const Tensor& scale_w, const Tensor& bias, float eps) {
  const std::size_t rows = d.rel.rows();
  const std::size_t cols = d.rel.cols();
  if (scale_w.size() != cols) throw DimensionError("layernorm scale width mismatch");
  Tensor r({rows, cols});
  Tensor g({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    auto br = d.rel.row(i);
    auto bg = d.irrel.row(i);
    double mean_full = 0.0, mean_r = 0.0, mean_g = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      mean_full += static_cast<double>(br[j]) + static_cast<double>(bg[j]);
      mean_r += br[j];
      mean_g += bg[j];
    }
    mean_full /= static_cast<double>(cols);
    mean_r /= static_cast<double>(cols);
    mean_g /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      const double c = static_cast<double>(br[j]) + static_cast<double>(bg[j]) - mean_full;
      var += c * c;
    }
    var /= static_cast<double>(cols);
    const double inv_sigma = 1.0 / std::sqrt(var + static_cast<double>(eps));
    auto out_r = r.row(i);
    auto out_g = g.row(i);
    for (std::size_t j = 0; j < cols; ++j) {
      out_r[j] = static_cast<float>(scale_w[j] * (br[j] - mean_r) * inv_sigma);
      out_g[j] = static_cast<float>(scale_w[j] * (bg[j] - mean_g) * inv_sigma);
    }
  }
  share_bias(r, g, bias);
  return Decomposition(std::move(r), std::move(g));
}

Decomposition nonlin_decomp(const Decomposition& d, const std::function<float(float)>& f) {
  Tensor r(d.rel.shape());
  Tensor g(d.rel.shape());
  for (std::size_t i = 0; i < r.size(); ++i) {
    const float b = d.rel[i];
    const float c = d.irrel[i];
    const float full = f(b + c);
    const float rel = 0.5f * (f(b) + (full - f(c)));
    r[i] = rel;
    g[i] = full - rel;
  }
  return Decomposition(std::move(r), std::move(g));
}

Decomposition gelu_decomp(const Decomposition& d) {
  return nonlin_decomp(d, [](float x) { return gelu(x); });
}

std::size_t stabilize_signs(Decomposition& d) {
  std::size_t changed = 0;
  auto r = d.rel.data();
  auto g = d.irrel.data();
  for (std::size_t i = 0; i < r.size(); ++i) {
    if (r[i] == 0.0f || g[i] == 0.0f || (r[i] > 0.0f) == (g[i] > 0.0f)) continue;
    const float s = r[i] + g[i];
    if (std::fabs(r[i]) >= std::fabs(g[i])) {
      r[i] = s;
      g[i] = 0.0f;
    } else {
      r[i] = 0.0f;
      g[i] = s;
    }
    ++changed;
  }
  return changed;
}

Decomposition init_source_decomposition(const ActivationCache& cache, const MeanCache* means, const Node& src) {
  if (src.layer < 0 || static_cast<std::size_t>(src.layer) >= cache.layers.size() || src.head < 0 ||
      static_cast<std::size_t>(src.head) >= cache.layers[static_cast<std::size_t>(src.layer)].heads.size()) {
    throw InputError("source node " + src.to_string() + " is outside the model");
  }
  const Tensor& a = cache.head_out(src.layer, src.head);
  Tensor mu = Tensor::zeros(a.shape());
  if (means) {
    if (means->seq_len != cache.seq_len()) {
      throw InputError("mean activations cover " + std::to_string(means->seq_len) + " positions but the input has " +
                       std::to_string(cache.seq_len()));
    }
    mu = means->at(src.layer, src.head);
  }
  if (!src.pos) return Decomposition(sub(a, mu), mu);
  const int p = *src.pos;
  if (p < 0 || static_cast<std::size_t>(p) >= cache.seq_len()) {
    throw InputError("source position " + std::to_string(p) + " out of range for length " +
                     std::to_string(cache.seq_len()));
  }
  Tensor rel = Tensor::zeros(a.shape());
  auto dst = rel.row(static_cast<std::size_t>(p));
  auto ar = a.row(static_cast<std::size_t>(p));
  auto mr = mu.row(static_cast<std::size_t>(p));
  for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = ar[j] - mr[j];
  Tensor irrel = sub(a, rel);
  return Decomposition(std::move(rel), std::move(irrel));
}

int TargetSpec::min_layer(const ModelConfig& config) const {
  int m = config.n_layers;
  for (const Node& n : nodes) m = std::min(m, n.layer);
  return m;
}

namespace {

struct Propagator {
  const Model& model;
  const ActivationCache& cache;
  const PropagateOptions& opt;
  int depth = 1;

  void emit(int layer, int head, std::string_view name, const Decomposition& d) const {
    if (opt.observer) opt.observer(StageId{layer, head, name}, d);
  }

  void after_block(Decomposition& d) {
    ++depth;
    const bool on = opt.stabilize == StabilizeMode::always ||
                    (opt.stabilize == StabilizeMode::by_depth && depth > opt.stabilize_after);
    if (on) stabilize_signs(d);
  }

  void mlp(int l, Decomposition& resid) {
    const auto& lw = model.layer(l);
    const auto& c = model.config();
    Decomposition ln = layernorm_decomp(resid, lw.ln2_w, lw.ln2_b, c.ln_eps);
    emit(l, -1, "ln2", ln);
    Decomposition pre = linear_decomp(ln, lw.W_in, lw.b_in);
    emit(l, -1, "mlp_pre", pre);
    Decomposition post = gelu_decomp(pre);
    emit(l, -1, "mlp_post", post);
    Decomposition out = linear_decomp(post, lw.W_out, lw.b_out);
    emit(l, -1, "mlp_out", out);
    resid = add_decomp(resid, out);
    after_block(resid);
  }
};

void record_target(PropagateResult& result, const Node& target, const Decomposition& head_out) {
  if (target.pos) {
    const int p = *target.pos;
    result.nodes.emplace(target, head_out.rows(std::span<const int>(&p, 1)));
  } else {
    result.nodes.emplace(target, head_out);
  }
}

}  // namespace

PropagateResult propagate_from_residual(const Model& model, const ActivationCache& cache, int layer,
                                        Decomposition resid, const TargetSpec& targets,
                                        const PropagateOptions& options) {
  const auto& c = model.config();
  const int seq = static_cast<int>(cache.seq_len());
  if (layer < 0 || layer >= c.n_layers) throw InputError("residual layer " + std::to_string(layer) + " out of range");
  if (cache.layers.size() != static_cast<std::size_t>(c.n_layers)) {
    throw InputError("activation cache does not match the model");
  }
  const Shape expect{static_cast<std::size_t>(seq), static_cast<std::size_t>(c.d_model)};
  if (resid.shape() != expect) {
    throw DimensionError("residual decomposition has shape " + shape_to_string(resid.shape()) + ", expected " +
                         shape_to_string(expect));
  }

  int last = layer;
  std::map<int, std::set<int>> wanted;  // layer -> heads
  for (const Node& t : targets.nodes) {
    if (!model.valid_node(t, seq)) throw InputError("target node " + t.to_string() + " is outside the model");
    if (t.layer <= layer) {
      throw OrderingError("target " + t.to_string() + " is not downstream of layer " + std::to_string(layer));
    }
    wanted[t.layer].insert(t.head);
    last = std::max(last, t.layer);
  }
  if (targets.targets_output()) last = c.n_layers - 1;

  PropagateResult result;
  Propagator P{model, cache, options};

  for (int l = layer; l <= last; ++l) {
    if (l > layer) {
      const auto& lw = model.layer(l);
      Decomposition ln = layernorm_decomp(resid, lw.ln1_w, lw.ln1_b, c.ln_eps);
      P.emit(l, -1, "ln1", ln);
      const bool through = l < last || targets.targets_output();
      Decomposition attn_sum;
      for (int h = 0; h < c.n_heads; ++h) {
        if (!through && !wanted[l].contains(h)) continue;
        AttentionStages st = attention_decomp(ln, lw.heads[static_cast<std::size_t>(h)], model.head_bias_share(l),
                                              c.causal());
        P.emit(l, h, "head_q", st.q);
        P.emit(l, h, "head_k", st.k);
        P.emit(l, h, "head_v", st.v);
        P.emit(l, h, "head_scores", st.scores);
        P.emit(l, h, "head_probs", st.probs);
        P.emit(l, h, "head_z", st.z);
        P.emit(l, h, "head_out", st.out);
        if (wanted[l].contains(h)) {
          for (const Node& t : targets.nodes)
            if (t.layer == l && t.head == h) record_target(result, t, st.out);
        }
        if (through) attn_sum = attn_sum.rel.empty() ? std::move(st.out) : add_decomp(attn_sum, st.out);
      }
      if (!through) break;
      resid = add_decomp(resid, attn_sum);
      P.after_block(resid);
      P.emit(l, -1, "resid_mid", resid);
    }
    if (c.has_mlp() && (l < last || targets.targets_output())) P.mlp(l, resid);
    P.emit(l, -1, "resid_post", resid);
  }

  if (targets.targets_output()) {
    Decomposition x = resid.rows(*targets.output_rows);
    const auto& w = model.weights();
    if (c.has_final_ln) {
      x = layernorm_decomp(x, w.ln_final_w, w.ln_final_b, c.ln_eps);
      P.emit(-1, -1, "ln_final", x);
    }
    Decomposition logits = linear_decomp(x, w.W_U, Tensor{});
    P.emit(-1, -1, "logits", logits);
    result.output = std::move(logits);
  }
  return result;
}

PropagateResult propagate(const Model& model, const ActivationCache& cache, const Node& src,
                          const Decomposition& d_src, const TargetSpec& targets, const PropagateOptions& options) {
  const int seq = static_cast<int>(cache.seq_len());
  if (!model.valid_node(src, seq)) throw InputError("source node " + src.to_string() + " is outside the model");
  const Tensor& a = cache.head_out(src.layer, src.head);
  if (d_src.shape() != a.shape()) {
    throw DimensionError("source decomposition has shape " + shape_to_string(d_src.shape()) + ", expected " +
                         shape_to_string(a.shape()));
  }

  PropagateResult self;
  TargetSpec rest;
  rest.output_rows = targets.output_rows;
  for (const Node& t : targets.nodes) {
    if (t == src) {
      record_target(self, t, d_src);
    } else if (t.layer <= src.layer) {
      throw OrderingError("target " + t.to_string() + " is not downstream of source " + src.to_string());
    } else {
      rest.nodes.push_back(t);
    }
  }
  if (rest.nodes.empty() && !rest.targets_output()) return self;

  const Tensor& mid = cache.layers[static_cast<std::size_t>(src.layer)].resid_mid;
  Decomposition resid(d_src.rel, sub(mid, d_src.rel));
  if (options.observer) options.observer(StageId{src.layer, -1, "resid_mid"}, resid);
  PropagateResult result = propagate_from_residual(model, cache, src.layer, std::move(resid), rest, options);
  result.nodes.merge(self.nodes);
  return result;
}

}  // namespace cdt
