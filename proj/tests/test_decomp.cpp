#include <doctest.h>

#include <cmath>
#include <limits>

#include "cdt/decomp.hpp"
#include "cdt/error.hpp"
#include "cdt/tasks.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"
#include "properties.hpp"

using namespace cdt;

namespace {

Tensor random_tensor(Rng& rng, Shape s, double sd = 1.0) {
  Tensor t(std::move(s));
  for (float& v : t.data()) v = static_cast<float>(rng.normal() * sd);
  return t;
}

bool close_f32(float got, double want) {
  return std::fabs(got - want) <= 2.0 * std::numeric_limits<float>::epsilon() * std::fabs(want);
}

}  // namespace

TEST_CASE("linear decomposition, hand-derived example") {
  // Row convention: x * W with W = [[1,2],[3,4]]^T is the column form W x.
  const Tensor W = transpose(Tensor::matrix({{1, 2}, {3, 4}}));
  const Decomposition d(Tensor::matrix({{1, 0}}), Tensor::matrix({{0, 1}}));
  const auto out = linear_decomp(d, W, Tensor::vector({1, 1}));
  // W beta = [1, 3], W gamma = [2, 4]; bias shares 1/3, 3/7 and 2/3, 4/7.
  CHECK(close_f32(out.rel(0, 0), 4.0 / 3.0));
  CHECK(close_f32(out.rel(0, 1), 24.0 / 7.0));
  CHECK(close_f32(out.irrel(0, 0), 8.0 / 3.0));
  CHECK(close_f32(out.irrel(0, 1), 32.0 / 7.0));
}

TEST_CASE("linear decomposition with no irrelevant part keeps the whole bias") {
  Rng rng(1);
  const Tensor W = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {4});
  const Tensor x = random_tensor(rng, {2, 3});
  const auto out = linear_decomp(Decomposition(x, Tensor::zeros({2, 3})), W, b);
  CHECK(relative_error(out.rel, add_row_vector(matmul(x, W), b)) < 1e-6);
  CHECK(max_abs(out.irrel) == 0.0);
}

TEST_CASE("linear decomposition with equal parts splits the bias in half") {
  Rng rng(2);
  const Tensor W = random_tensor(rng, {3, 4});
  const Tensor b = random_tensor(rng, {4});
  const Tensor x = random_tensor(rng, {2, 3});
  const auto out = linear_decomp(Decomposition(x, x), W, b);
  const Tensor expect = add_row_vector(matmul(x, W), scale(b, 0.5f));
  CHECK(relative_error(out.rel, expect) < 1e-6);
  CHECK(relative_error(out.irrel, expect) < 1e-6);
}

TEST_CASE("linear decomposition splits the bias evenly where both parts vanish") {
  const auto out = linear_decomp(Decomposition(Tensor::matrix({{0, 0}}), Tensor::matrix({{0, 0}})),
                                 Tensor::identity(2), Tensor::vector({2, -4}));
  CHECK(out.rel(0, 0) == 1.0f);
  CHECK(out.irrel(0, 1) == -2.0f);
}

TEST_CASE("linear decomposition is complete") {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor W = random_tensor(rng, {5, 3});
    const Tensor b = random_tensor(rng, {3});
    const Decomposition d(random_tensor(rng, {4, 5}), random_tensor(rng, {4, 5}));
    const auto out = linear_decomp(d, W, b);
    CHECK(relative_error(out.sum(), add_row_vector(matmul(d.sum(), W), b)) < 1e-5);
  }
}

TEST_CASE("decompositions require matching shapes") {
  CHECK_THROWS_AS(Decomposition(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})), DimensionError);
}

namespace {

HeadWeights random_head(Rng& rng, std::size_t d, std::size_t dh) {
  HeadWeights h;
  h.W_Q = random_tensor(rng, {d, dh});
  h.W_K = random_tensor(rng, {d, dh});
  h.W_V = random_tensor(rng, {d, dh});
  h.W_O = random_tensor(rng, {dh, d});
  h.b_Q = random_tensor(rng, {dh}, 0.1);
  h.b_K = random_tensor(rng, {dh}, 0.1);
  h.b_V = random_tensor(rng, {dh}, 0.1);
  return h;
}

// Head output computed directly in double.
oracle::Mat head_reference(const Tensor& x, const HeadWeights& h, const Tensor& bias, bool causal) {
  const auto X = oracle::to_mat(x);
  const auto q = oracle::add_bias(oracle::matmul(X, oracle::to_mat(h.W_Q)), oracle::to_vec(h.b_Q));
  const auto k = oracle::add_bias(oracle::matmul(X, oracle::to_mat(h.W_K)), oracle::to_vec(h.b_K));
  const auto v = oracle::add_bias(oracle::matmul(X, oracle::to_mat(h.W_V)), oracle::to_vec(h.b_V));
  const auto p = oracle::softmax_rows(oracle::scale(oracle::matmul(q, oracle::transpose(k)), 1.0 / std::sqrt(double(h.W_Q.cols()))), causal);
  return oracle::add_bias(oracle::matmul(oracle::matmul(p, v), oracle::to_mat(h.W_O)), oracle::to_vec(bias));
}

}  // namespace

TEST_CASE("attention decomposition is complete at every stage") {
  Rng rng(4);
  for (bool causal : {true, false}) {
    const HeadWeights h = random_head(rng, 4, 2);
    const Tensor bias = random_tensor(rng, {4}, 0.1);
    const Decomposition in(random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4}));
    const auto st = attention_decomp(in, h, bias, causal);
    CHECK(oracle::rel_err(st.out.sum(), head_reference(in.sum(), h, bias, causal)) < 1e-5);
    const auto full_p = masked_softmax(st.scores.sum(), causal);
    CHECK(relative_error(st.probs.sum(), full_p) < 1e-6);
  }
}

TEST_CASE("attention with no irrelevant input reproduces the head") {
  Rng rng(5);
  const HeadWeights h = random_head(rng, 4, 2);
  const Tensor bias = random_tensor(rng, {4}, 0.1);
  const Tensor x = random_tensor(rng, {3, 4});
  const auto st = attention_decomp(Decomposition(x, Tensor::zeros({3, 4})), h, bias, true);
  CHECK(max_abs(st.probs.irrel) == 0.0);
  CHECK(max_abs(st.z.irrel) == 0.0);
  CHECK(max_abs(st.out.irrel) == 0.0);
  CHECK(oracle::rel_err(st.out.rel, head_reference(x, h, bias, true)) < 1e-5);
}

TEST_CASE("attention with no relevant input attends uniformly and outputs only its bias share") {
  Rng rng(6);
  HeadWeights h = random_head(rng, 4, 2);
  h.b_Q = Tensor::zeros({2});
  h.b_K = Tensor::zeros({2});
  h.b_V = Tensor::zeros({2});
  const Tensor bias = random_tensor(rng, {4}, 0.1);
  const auto st = attention_decomp(Decomposition(Tensor::zeros({3, 4}), random_tensor(rng, {3, 4})), h, bias, true);
  CHECK(max_abs(st.scores.rel) == 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j <= i; ++j) CHECK(st.probs.rel(i, j) == doctest::Approx(1.0 / double(i + 1)));
  CHECK(max_abs(st.z.rel) == 0.0);
  // z.rel == 0, so the bias splits evenly wherever z.irrel * W_O vanishes and
  // otherwise goes entirely to irrel.
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(std::fabs(st.out.rel(i, j)) <= std::fabs(bias[j]) * 0.5f + 1e-7f);
}

TEST_CASE("layer norm decomposition") {
  Rng rng(7);
  const Tensor w = random_tensor(rng, {6});
  const Tensor b = random_tensor(rng, {6});
  const Tensor x = random_tensor(rng, {3, 6});
  const auto reference = oracle::layer_norm(oracle::to_mat(x), oracle::to_vec(w), oracle::to_vec(b), 1e-5);

  SUBCASE("no irrelevant part gives layer norm of rel") {
    const auto out = layernorm_decomp(Decomposition(x, Tensor::zeros({3, 6})), w, b, 1e-5f);
    CHECK(oracle::rel_err(out.rel, reference) < 1e-5);
    CHECK(max_abs(out.irrel) == 0.0);
  }
  SUBCASE("equal halves with no bias give half each") {
    const Tensor zero_b = Tensor::zeros({6});
    const Tensor half = scale(x, 0.5f);
    const auto out = layernorm_decomp(Decomposition(half, half), w, zero_b, 1e-5f);
    const auto full = oracle::layer_norm(oracle::to_mat(x), oracle::to_vec(w), oracle::Vec(6, 0.0), 1e-5);
    CHECK(oracle::rel_err(out.rel, oracle::scale(full, 0.5)) < 1e-5);
    CHECK(oracle::rel_err(out.irrel, oracle::scale(full, 0.5)) < 1e-5);
  }
  SUBCASE("complete for arbitrary splits") {
    const Tensor r = random_tensor(rng, {3, 6});
    const auto out = layernorm_decomp(Decomposition(r, sub(x, r)), w, b, 1e-5f);
    CHECK(oracle::rel_err(out.sum(), reference) < 1e-5);
  }
}

TEST_CASE("gelu decomposition") {
  auto one = [](float b, float g) {
    return gelu_decomp(Decomposition(Tensor::matrix({{b}}), Tensor::matrix({{g}})));
  };
  SUBCASE("equal halves") {
    const auto d = one(1.0f, 1.0f);
    CHECK(d.rel[0] == doctest::Approx(oracle::gelu(2.0) / 2.0).epsilon(1e-6));
    CHECK(d.rel[0] == doctest::Approx(0.97730).epsilon(1e-4));
    CHECK(d.irrel[0] == doctest::Approx(d.rel[0]));
  }
  SUBCASE("no irrelevant part") {
    const auto d = one(1.5f, 0.0f);
    CHECK(d.rel[0] == doctest::Approx(oracle::gelu(1.5)).epsilon(1e-6));
    CHECK(d.irrel[0] == doctest::Approx(0.0).epsilon(1e-7));
  }
  SUBCASE("no relevant part") {
    const auto d = one(0.0f, -0.7f);
    CHECK(d.rel[0] == doctest::Approx(0.0).epsilon(1e-7));
    CHECK(d.irrel[0] == doctest::Approx(oracle::gelu(-0.7)).epsilon(1e-6));
  }
  SUBCASE("complete") {
    Rng rng(8);
    const Decomposition in(random_tensor(rng, {4, 5}, 2.0), random_tensor(rng, {4, 5}, 2.0));
    CHECK(relative_error(gelu_decomp(in).sum(), gelu(in.sum())) < 1e-6);
  }
}

TEST_CASE("sign stabilization") {
  Decomposition d(Tensor::vector({3, -1, 2, 0, -5}), Tensor::vector({-1, 4, 1, -2, 2}));
  const Tensor before = d.sum();
  CHECK(stabilize_signs(d) == 3);
  CHECK(d.sum() == before);
  CHECK(d.rel == Tensor::vector({2, 0, 2, 0, -3}));
  CHECK(d.irrel == Tensor::vector({0, 3, 1, -2, 0}));
}

TEST_CASE("source initialization") {
  const auto c = fixtures::small_config(2, 2, 4, 0);
  const Model m = random_model(c, 30);
  const std::vector<int> toks{1, 2, 3};
  const auto cache = forward(m, toks);
  const Node src{0, 1, std::nullopt};
  const Tensor& a = cache.head_out(0, 1);

  SUBCASE("no means: everything relevant") {
    const auto d = init_source_decomposition(cache, nullptr, src);
    CHECK(d.rel == a);
    CHECK(max_abs(d.irrel) == 0.0);
  }
  SUBCASE("mean equal to the activation: nothing relevant") {
    const auto means = mean_activations(m, std::vector<std::vector<int>>{toks});
    const auto d = init_source_decomposition(cache, &means, src);
    CHECK(max_abs(d.rel) == 0.0);
    CHECK(d.irrel == a);
  }
  SUBCASE("positional source") {
    const auto d = init_source_decomposition(cache, nullptr, Node{0, 1, 2});
    CHECK(relative_error(d.sum(), a) == 0.0);
    for (std::size_t j = 0; j < a.cols(); ++j) {
      CHECK(d.rel(0, j) == 0.0f);
      CHECK(d.rel(2, j) == a(2, j));
    }
    CHECK_THROWS_AS(init_source_decomposition(cache, nullptr, Node{0, 1, 3}), InputError);
  }
}

TEST_CASE("propagation ordering") {
  const auto c = fixtures::small_config(2, 2, 4, 0);
  const Model m = random_model(c, 31);
  const auto cache = forward(m, std::vector<int>{1, 2, 3});
  const Node src{1, 0, std::nullopt};
  const auto d = init_source_decomposition(cache, nullptr, src);
  const auto self = propagate(m, cache, src, d, TargetSpec::of_nodes({src}));
  CHECK(self.nodes.at(src).rel == d.rel);
  CHECK_THROWS_AS(propagate(m, cache, src, d, TargetSpec::of_nodes({Node{0, 0, std::nullopt}})), OrderingError);
  CHECK_THROWS_AS(propagate(m, cache, src, d, TargetSpec::of_nodes({Node{1, 1, std::nullopt}})), OrderingError);
}

TEST_CASE("positional targets hold their row") {
  const auto c = fixtures::small_config(2, 2, 4, 0);
  const Model m = random_model(c, 32);
  const auto cache = forward(m, std::vector<int>{1, 2, 3});
  const Node src{0, 0, std::nullopt};
  const auto d = init_source_decomposition(cache, nullptr, src);
  const Node whole{1, 1, std::nullopt}, row{1, 1, 2};
  const auto res = propagate(m, cache, src, d, TargetSpec::of_nodes({whole, row}));
  const auto& w = res.nodes.at(whole);
  const auto& r = res.nodes.at(row);
  CHECK(r.shape() == Shape{1, 8});
  for (std::size_t j = 0; j < 8; ++j) CHECK(r.rel(0, j) == w.rel(2, j));
}

TEST_CASE("completeness over random models") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    const auto cc = properties::random_completeness_case(seed);
    const auto r = properties::run_completeness(cc);
    INFO("seed " << seed << " stage " << r.stage);
    CHECK(r.worst < 1e-4);
    CHECK(r.stages > 0);
  }
}

TEST_CASE("completeness holds with stabilization always on and always off") {
  for (std::uint64_t seed = 100; seed < 110; ++seed) {
    const auto cc = properties::random_completeness_case(seed);
    CHECK(properties::run_completeness(cc, StabilizeMode::always).worst < 1e-4);
    CHECK(properties::run_completeness(cc, StabilizeMode::never).worst < 1e-4);
  }
}

TEST_CASE("a null source in a bias-free network contributes nothing") {
  auto c = fixtures::small_config(3, 2, 4, 16);
  const Model m = random_model(c, 33, 0.5f, false);
  const auto cache = forward(m, std::vector<int>{1, 2, 3, 4});
  const Node src{0, 1, std::nullopt};
  const auto zero = Tensor::zeros(cache.head_out(0, 1).shape());
  const Decomposition d(zero, cache.head_out(0, 1));
  PropagateOptions opts;
  opts.observer = [](const StageId& id, const Decomposition& s) {
    if (id.name == "head_probs") return;  // softmax of zero scores is uniform, not zero
    INFO(id.name);
    CHECK(max_abs(s.rel) == 0.0);
  };
  const auto res = propagate(m, cache, src, d, TargetSpec::model_output({0, 1, 2, 3}), opts);
  CHECK(max_abs(res.output->rel) == 0.0);
}

TEST_CASE("a full residual source in a bias-free attention-only network leaves nothing irrelevant") {
  auto c = fixtures::small_config(3, 2, 4, 0);
  const Model m = random_model(c, 34, 0.5f, false);
  const auto cache = forward(m, std::vector<int>{1, 2, 3, 4});
  const Tensor& mid = cache.layers[0].resid_mid;
  PropagateOptions opts;
  opts.observer = [](const StageId& id, const Decomposition& s) {
    INFO(id.name);
    CHECK(max_abs(s.irrel) == 0.0);
  };
  const auto res = propagate_from_residual(m, cache, 0, Decomposition(mid, Tensor::zeros(mid.shape())),
                                           TargetSpec::model_output({3}), opts);
  CHECK(max_abs(res.output->irrel) == 0.0);
}

TEST_CASE("propagation matches the closed-form linear contribution") {
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    for (int h = 0; h < 2; ++h) {
      const auto r = properties::run_linear_oracle(seed, h);
      CHECK(r.logits_err < 1e-5);
      CHECK(r.head_err < 1e-5);
    }
}

TEST_CASE("propagation is deterministic") {
  const auto cc = properties::random_completeness_case(5);
  const Model m = random_model(cc.config, cc.model_seed);
  const auto cache = forward(m, cc.tokens);
  const auto d = init_source_decomposition(cache, nullptr, cc.source);
  const auto a = propagate(m, cache, cc.source, d, TargetSpec::model_output({0}));
  const auto b = propagate(m, cache, cc.source, d, TargetSpec::model_output({0}));
  CHECK(a.output->rel == b.output->rel);
  CHECK(a.output->irrel == b.output->irrel);
}
