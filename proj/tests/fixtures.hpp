#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>

#include "cdt/decomp.hpp"
#include "cdt/model.hpp"
#include "cdt/random.hpp"
#include "cdt/tasks.hpp"

namespace fixtures {

inline cdt::ModelConfig small_config(int n_layers, int n_heads, int d_head, int d_mlp, bool decoder = true,
                                     int vocab = 11, int max_seq = 8) {
  cdt::ModelConfig c;
  c.arch = decoder ? cdt::Arch::decoder : cdt::Arch::encoder;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.d_head = d_head;
  c.d_model = n_heads * d_head;
  c.d_mlp = d_mlp;
  c.vocab_size = vocab;
  c.max_seq = max_seq;
  return c;
}

inline std::vector<int> random_tokens(cdt::Rng& rng, int n, int vocab) {
  std::vector<int> t;
  for (int i = 0; i < n; ++i) t.push_back(rng.below_int(vocab));
  return t;
}

}  // namespace fixtures

namespace fixtures {

// The unablated activation a propagation observer stage corresponds to.
inline cdt::Tensor full_stage(const cdt::ActivationCache& cache, const cdt::StageId& id, const std::vector<int>& out_rows) {
  using cdt::Tensor;
  auto pick_rows = [&](const Tensor& t) {
    Tensor out(cdt::Shape{out_rows.size(), t.cols()});
    for (std::size_t i = 0; i < out_rows.size(); ++i) {
      auto src = t.row(static_cast<std::size_t>(out_rows[i]));
      std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
  };
  const std::string_view n = id.name;
  if (n == "ln_final") return pick_rows(cache.ln_final_out);
  if (n == "logits") return pick_rows(cache.logits);
  const auto& L = cache.layers.at(static_cast<std::size_t>(id.layer));
  if (n == "resid_mid") return L.resid_mid;
  if (n == "resid_post") return L.resid_post;
  if (n == "ln1") return L.ln1_out;
  if (n == "ln2") return L.ln2_out;
  if (n == "mlp_pre") return L.mlp_pre;
  if (n == "mlp_post") return L.mlp_post;
  if (n == "mlp_out") return L.mlp_out;
  const auto& H = L.heads.at(static_cast<std::size_t>(id.head));
  if (n == "head_q") return H.q;
  if (n == "head_k") return H.k;
  if (n == "head_v") return H.v;
  if (n == "head_scores") return H.scores;
  if (n == "head_probs") return H.pattern;
  if (n == "head_z") return H.z;
  if (n == "head_out") return H.out;
  throw std::logic_error("unknown stage " + std::string(n));
}

}  // namespace fixtures
