#include <cmath>

#include "cdt/random.hpp"
#include "cdt/tasks.hpp"

namespace cdt {

namespace {

// Residual directions come in antisymmetric pairs, u_k = (e_{2k} - e_{2k+1})/sqrt(2),
// so every residual vector has mean exactly 0 and layer norm reduces to a
// rescaling.
constexpr int kDModel = 128;
constexpr int kDHead = 32;
constexpr int kTok = 0;    // token identity, one direction per vocab entry
constexpr int kPos = 12;   // position, one per slot
constexpr int kPrev = 24;  // previous token, written by the previous-token head
constexpr int kOut = 36;   // predicted token, read by the unembedding
constexpr int kJunk = 48;  // 16 directions written by the decoy heads
constexpr int kJunkCount = 16;

const float kInvSqrt2 = static_cast<float>(1.0 / std::sqrt(2.0));

// Adds c * u_dir to row r of a [rows x d_model] matrix.
void write_dir(Tensor& m, std::size_t r, int dir, float c) {
  m(r, static_cast<std::size_t>(2 * dir)) += c * kInvSqrt2;
  m(r, static_cast<std::size_t>(2 * dir + 1)) -= c * kInvSqrt2;
}

// Makes column j of a [d_model x cols] matrix read c * <x, u_dir>.
void read_dir(Tensor& m, int dir, std::size_t j, float c) {
  m(static_cast<std::size_t>(2 * dir), j) += c * kInvSqrt2;
  m(static_cast<std::size_t>(2 * dir + 1), j) -= c * kInvSqrt2;
}

void fill_normal(Rng& rng, Tensor& t, double sd) {
  for (float& v : t.data()) v = static_cast<float>(rng.normal() * sd);
}

}  // namespace

PlantedModel build_planted_model(std::uint64_t seed) {
  ModelConfig c;
  c.arch = Arch::decoder;
  c.n_layers = 2;
  c.n_heads = 4;
  c.d_model = kDModel;
  c.d_head = kDHead;
  c.d_mlp = 0;
  c.vocab_size = kPlantedVocab;
  c.max_seq = 12;
  c.has_final_ln = true;

  Rng rng(seed);
  const int prev = rng.below_int(c.n_heads);
  const int ind = rng.below_int(c.n_heads);

  ModelWeights w = zero_weights(c);
  for (int v = 0; v < c.vocab_size; ++v) write_dir(w.W_E, static_cast<std::size_t>(v), kTok + v, 1.0f);
  for (int t = 0; t < c.max_seq; ++t) write_dir(w.W_pos, static_cast<std::size_t>(t), kPos + t, 1.0f);

  // Previous-token head. The first layer norm scales u_tok + u_pos by 8, so
  // the score for key t-1 at query t is 64 * 2 / sqrt(32), about 22.6, and the
  // copied token lands in the prev subspace with unit norm.
  {
    HeadWeights& h = w.blocks[0].heads[static_cast<std::size_t>(prev)];
    const float g = std::sqrt(2.0f);
    for (int t = 1; t < c.max_seq; ++t) read_dir(h.W_Q, kPos + t, static_cast<std::size_t>(t - 1), g);
    for (int t = 0; t < c.max_seq; ++t) read_dir(h.W_K, kPos + t, static_cast<std::size_t>(t), g);
    for (int v = 0; v < c.vocab_size; ++v) {
      read_dir(h.W_V, kTok + v, static_cast<std::size_t>(v), 0.25f);
      write_dir(h.W_O, static_cast<std::size_t>(v), kPrev + v, 0.5f);
    }
  }

  // Induction head. Queries read the current token, keys read the previous
  // token, so the last position attends to the successor of the earlier
  // occurrence of its token. The value copies that successor's identity into
  // the output subspace and, with a small negative gain, the matched token.
  {
    HeadWeights& h = w.blocks[1].heads[static_cast<std::size_t>(ind)];
    const float g = std::sqrt(3.0f);
    const float gain = std::sqrt(3.0f / static_cast<float>(kDModel));
    for (int v = 0; v < c.vocab_size; ++v) {
      read_dir(h.W_Q, kTok + v, static_cast<std::size_t>(v), g);
      read_dir(h.W_K, kPrev + v, static_cast<std::size_t>(v), g);
      read_dir(h.W_V, kTok + v, static_cast<std::size_t>(v), gain);
      read_dir(h.W_V, kPrev + v, static_cast<std::size_t>(c.vocab_size + v), gain);
      write_dir(h.W_O, static_cast<std::size_t>(v), kOut + v, 1.0f);
      write_dir(h.W_O, static_cast<std::size_t>(c.vocab_size + v), kOut + v, -0.3f);
    }
  }

  // Decoys: random reads, output confined to the junk subspace with norm
  // around 0.1.
  const double read_sd = 1.0 / std::sqrt(static_cast<double>(kDModel));
  for (int l = 0; l < c.n_layers; ++l)
    for (int hi = 0; hi < c.n_heads; ++hi) {
      if ((l == 0 && hi == prev) || (l == 1 && hi == ind)) continue;
      HeadWeights& h = w.blocks[static_cast<std::size_t>(l)].heads[static_cast<std::size_t>(hi)];
      fill_normal(rng, h.W_Q, read_sd);
      fill_normal(rng, h.W_K, read_sd);
      fill_normal(rng, h.W_V, read_sd);
      for (int j = 0; j < kDHead; ++j)
        for (int k = 0; k < kJunkCount; ++k)
          write_dir(h.W_O, static_cast<std::size_t>(j), kJunk + k, static_cast<float>(rng.normal() * 0.0045));
    }

  for (int v = 0; v < c.vocab_size; ++v) read_dir(w.W_U, kOut + v, static_cast<std::size_t>(v), 1.0f);

  PlantedModel pm{Model(c, std::move(w)), {}, Node{0, prev, std::nullopt}, Node{1, ind, std::nullopt}};
  pm.circuit = {pm.prev_head, pm.induction_head};
  return pm;
}

}  // namespace cdt
