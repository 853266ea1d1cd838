#include <doctest.h>

#include "cdt/circuit.hpp"
#include "cdt/error.hpp"
#include "cdt/model.hpp"
#include "cdt/tasks.hpp"
#include "fixtures.hpp"
#include "oracle.hpp"

using namespace cdt;
using fixtures::small_config;

TEST_CASE("config validation") {
  ModelConfig c = small_config(2, 2, 4, 0);
  CHECK_NOTHROW(c.validate());
  c.d_model = 9;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = small_config(2, 2, 4, 0);
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), InputError);
  c = small_config(2, 2, 4, 0);
  c.positional = "rotary";
  CHECK_THROWS_AS(c.validate(), InputError);
}

TEST_CASE("forward agrees with the reference forward pass") {
  Rng rng(21);
  for (bool decoder : {true, false})
    for (int d_mlp : {0, 16}) {
      const auto c = small_config(3, 2, 4, d_mlp, decoder);
      const Model m = random_model(c, 100 + static_cast<std::uint64_t>(d_mlp) + (decoder ? 1 : 0));
      const auto toks = fixtures::random_tokens(rng, 6, c.vocab_size);
      const auto cache = forward(m, toks);
      const auto ref = oracle::forward(m, toks);
      CHECK(oracle::rel_err(cache.logits, ref.logits) < 1e-5);
      for (int l = 0; l < c.n_layers; ++l) {
        CHECK(oracle::rel_err(cache.layers[l].resid_mid, ref.resid_mid[l]) < 1e-5);
        CHECK(oracle::rel_err(cache.layers[l].resid_post, ref.resid_post[l]) < 1e-5);
        for (int h = 0; h < c.n_heads; ++h) {
          CHECK(oracle::rel_err(cache.head_out(l, h), ref.head_out[l][h]) < 1e-5);
          CHECK(oracle::rel_err(cache.layers[l].heads[h].pattern, ref.pattern[l][h]) < 1e-5);
        }
      }
    }
}

TEST_CASE("head outputs sum to the attention block output") {
  const auto c = small_config(2, 3, 4, 0);
  const Model m = random_model(c, 4);
  const auto cache = forward(m, std::vector<int>{1, 2, 3, 4});
  for (int l = 0; l < c.n_layers; ++l) {
    Tensor sum = cache.layers[l].resid_pre;
    for (int h = 0; h < c.n_heads; ++h) sum = add(sum, cache.head_out(l, h));
    CHECK(relative_error(sum, cache.layers[l].resid_mid) < 1e-6);
  }
}

TEST_CASE("decoder logits do not depend on later tokens; encoder logits do") {
  for (bool decoder : {true, false}) {
    const auto c = small_config(2, 2, 4, 8, decoder);
    const Model m = random_model(c, 9);
    const auto a = forward(m, std::vector<int>{1, 2, 3, 4});
    const auto b = forward(m, std::vector<int>{1, 2, 3, 7});
    bool row0_same = true;
    for (std::size_t j = 0; j < a.logits.cols(); ++j) row0_same &= a.logits(0, j) == b.logits(0, j);
    CHECK(row0_same == decoder);
  }
}

TEST_CASE("zero ablation matches the reference with that head removed") {
  const auto c = small_config(2, 2, 4, 8);
  const Model m = random_model(c, 12);
  const std::vector<int> toks{3, 1, 4, 1, 5};
  AblationPlan plan;
  plan.entries[Node{0, 1, std::nullopt}] = Replacement::zero();
  const auto cache = forward(m, toks, plan);
  const auto ref = oracle::forward(m, toks, {{0, 1}});
  CHECK(oracle::rel_err(cache.logits, ref.logits) < 1e-5);
  CHECK(max_abs(cache.head_out(0, 1)) == 0.0);
}

TEST_CASE("mean ablation with the input's own activations is the identity") {
  const auto c = small_config(2, 2, 4, 0);
  const Model m = random_model(c, 13);
  const std::vector<std::vector<int>> data{{1, 2, 3, 4}};
  const MeanCache means = mean_activations(m, data);
  const Circuit empty(Granularity::head, AblationScheme::mean);
  const auto plain = forward(m, data[0]);
  const auto ablated = run_ablated(m, data[0], empty, &means);
  CHECK(ablated.logits == plain.logits);
}

TEST_CASE("mean activations average position-wise") {
  const auto c = small_config(1, 2, 4, 0);
  const Model m = random_model(c, 14);
  const std::vector<std::vector<int>> data{{1, 2, 3}, {4, 5, 6}};
  const MeanCache means = mean_activations(m, data);
  const auto a = forward(m, data[0]), b = forward(m, data[1]);
  for (int h = 0; h < 2; ++h) {
    const Tensor avg = scale(add(a.head_out(0, h), b.head_out(0, h)), 0.5f);
    CHECK(relative_error(means.at(0, h), avg) < 1e-6);
  }
  CHECK_THROWS_AS(mean_activations(m, std::vector<std::vector<int>>{}), InputError);
  CHECK_THROWS_AS(mean_activations(m, std::vector<std::vector<int>>{{1, 2}, {1}}), InputError);
}

TEST_CASE("positional ablation replaces only that row") {
  const auto c = small_config(1, 2, 4, 0);
  const Model m = random_model(c, 15);
  const std::vector<int> toks{1, 2, 3, 4};
  AblationPlan plan;
  plan.entries[Node{0, 0, 2}] = Replacement::zero();
  const auto plain = forward(m, toks);
  const auto ablated = forward(m, toks, plan);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < 8; ++j) {
      if (r == 2) CHECK(ablated.head_out(0, 0)(r, j) == 0.0f);
      else CHECK(ablated.head_out(0, 0)(r, j) == plain.head_out(0, 0)(r, j));
    }
}

TEST_CASE("forward rejects bad inputs") {
  const auto c = small_config(1, 1, 4, 0, true, 5, 4);
  const Model m = random_model(c, 16);
  CHECK_THROWS_AS(forward(m, std::vector<int>{1, 5}), InputError);
  CHECK_THROWS_AS(forward(m, std::vector<int>{1, -1}), InputError);
  CHECK_THROWS_AS(forward(m, std::vector<int>{1, 2, 3, 4, 0}), InputError);
  CHECK_THROWS_AS(forward(m, std::vector<int>{}), InputError);
  AblationPlan plan;
  plan.entries[Node{0, 0, std::nullopt}] = Replacement::mean();
  CHECK_THROWS_AS(forward(m, std::vector<int>{1, 2}, plan), InputError);
}

TEST_CASE("each head owns an equal share of the output bias") {
  const auto c = small_config(1, 4, 2, 0);
  const Model m = random_model(c, 17);
  const Tensor& share = m.head_bias_share(0);
  for (std::size_t j = 0; j < share.size(); ++j) CHECK(share[j] * 4.0f == doctest::Approx(m.layer(0).b_O[j]));
}

TEST_CASE("circuits ablate only nodes outside them") {
  const auto c = small_config(2, 2, 4, 0);
  const Model m = random_model(c, 18);
  Circuit circ(Granularity::head, AblationScheme::zero);
  circ.add(Node{1, 0, std::nullopt});
  const auto plan = ablation_plan_for(m, circ, 4, nullptr);
  CHECK(plan.entries.size() == 3);
  CHECK_FALSE(plan.entries.contains(Node{1, 0, std::nullopt}));
  CHECK_THROWS_AS(circ.add(Node{0, 0, 1}), InputError);
  Circuit bad(Granularity::head, AblationScheme::zero);
  bad.add(Node{5, 0, std::nullopt});
  CHECK_THROWS_AS(ablation_plan_for(m, bad, 4, nullptr), NodeRangeError);
  CHECK(node_universe(c, Granularity::head_pos, 3).size() == 12);
}

TEST_CASE("a full circuit is the unablated model") {
  const auto c = small_config(2, 2, 4, 8);
  const Model m = random_model(c, 19);
  const std::vector<int> toks{1, 2, 3};
  const auto full = Circuit::full(c, Granularity::head_pos, AblationScheme::zero, 3);
  CHECK(run_ablated(m, toks, full, nullptr).logits == forward(m, toks).logits);
}
