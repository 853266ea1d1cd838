#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

#include "cdt/circuit.hpp"
#include "cdt/error.hpp"
#include "cdt/eval.hpp"
#include "cdt/tasks.hpp"

using namespace cdt;

namespace {

Sample two_token_sample(int answer, std::vector<int> wrong) {
  Sample s;
  s.tokens = {0};
  s.answer_tokens = {answer};
  s.wrong_tokens = std::move(wrong);
  return s;
}

}  // namespace

TEST_CASE("logit difference") {
  const std::vector<float> logits{3.0f, 1.0f, 0.0f};
  CHECK(logit_diff(logits, two_token_sample(0, {1})) == 2.0);
  // IO logit 2.0, S logit 0.5.
  const std::vector<float> ioi{2.0f, 0.5f};
  CHECK(logit_diff(ioi, two_token_sample(0, {1})) == 1.5);
}

TEST_CASE("logit minus max") {
  const std::vector<float> logits{5.0f, 1.0f, 3.0f};
  CHECK(logit_minus_max(logits, two_token_sample(0, {1, 2})) == 2.0);
  const std::vector<float> tie{4.0f, 4.0f, 4.0f};
  CHECK(logit_minus_max(tie, two_token_sample(0, {1, 2})) == 0.0);
}

TEST_CASE("probability difference") {
  SUBCASE("uniform logits") {
    // 100 year tokens, YY = 40: 59 greater, 40 smaller.
    std::vector<float> logits(130, 0.0f);
    Sample s = two_token_sample(0, {});
    s.answer_tokens.clear();
    for (int y = 41; y < 100; ++y) s.answer_tokens.push_back(30 + y);
    for (int y = 0; y < 40; ++y) s.wrong_tokens.push_back(30 + y);
    CHECK(prob_diff(logits, s) == doctest::Approx((59.0 - 40.0) / 130.0).epsilon(1e-12));
  }
  SUBCASE("all mass on a greater year") {
    std::vector<float> logits(130, -1000.0f);
    logits[100] = 0.0f;
    Sample s = two_token_sample(100, {40, 41});
    CHECK(prob_diff(logits, s) == doctest::Approx(1.0));
  }
}

TEST_CASE("metrics are deterministic") {
  const std::vector<float> logits{0.3f, -1.7f, 2.25f, 0.125f};
  const Sample s = two_token_sample(2, {0, 1, 3});
  for (auto m : {logit_diff, prob_diff, logit_minus_max, logit_vs_mean}) CHECK(m(logits, s) == m(logits, s));
}

TEST_CASE("metrics reject tokens outside the vocabulary") {
  const std::vector<float> logits{1.0f, 2.0f};
  CHECK_THROWS_AS(logit_diff(logits, two_token_sample(0, {5})), InputError);
  CHECK_THROWS_AS(metric_by_name("bleu"), InputError);
}

TEST_CASE("metrics read the end row") {
  TaskSpec t = gen_ioi(1, 3, 1, 1);
  const Sample& s = t.clean[0];
  Tensor logits({14, kIoiVocab});
  logits(13, static_cast<std::size_t>(s.answer_tokens[0])) = 4.0f;
  logits(0, static_cast<std::size_t>(s.wrong_tokens[0])) = 9.0f;
  CHECK(t.metric_on(logits, s) == 4.0);
}

TEST_CASE("IOI samples follow their templates") {
  const TaskSpec t = gen_ioi(40, 11, 8, 40);
  CHECK(t.seq_len() == 14);
  for (std::size_t i = 0; i < t.clean.size(); ++i) {
    const Sample& c = t.clean[i];
    const Sample& x = t.corrupt[i];
    CHECK(c.tokens.size() == x.tokens.size());
    CHECK(c.label_positions == x.label_positions);
    CHECK(c.tokens[static_cast<std::size_t>(c.position("IO"))] == c.answer_tokens[0]);
    CHECK(c.tokens[static_cast<std::size_t>(c.position("S1"))] == c.wrong_tokens[0]);
    CHECK(c.tokens[static_cast<std::size_t>(c.position("S2"))] == c.wrong_tokens[0]);
    CHECK(c.position("S1+1") == c.position("S1") + 1);
    // ABC: three distinct names.
    const std::set<int> names{x.tokens[static_cast<std::size_t>(x.position("IO"))],
                              x.tokens[static_cast<std::size_t>(x.position("S1"))],
                              x.tokens[static_cast<std::size_t>(x.position("S2"))]};
    CHECK(names.size() == 3);
    for (int tok : c.tokens) CHECK(tok < kIoiVocab);
  }
  // Templates rotate.
  CHECK(t.clean[0].position("IO") != t.clean[1].position("IO"));
}

TEST_CASE("greater-than samples list every greater year") {
  const TaskSpec t = gen_greater_than(30, 12, 5, 10);
  for (const Sample& s : t.clean) {
    const int yy = s.tokens[static_cast<std::size_t>(s.position("YY"))] - 30;
    CHECK(yy >= 2);
    CHECK(yy <= 98);
    CHECK(static_cast<int>(s.answer_tokens.size()) == 99 - yy);
    CHECK(static_cast<int>(s.wrong_tokens.size()) == yy);
    CHECK(s.tokens[static_cast<std::size_t>(s.position("XX1"))] == s.tokens[static_cast<std::size_t>(s.position("XX2"))]);
  }
  for (const Sample& s : t.corrupt) CHECK(s.tokens[static_cast<std::size_t>(s.position("YY"))] == 31);
  CHECK(t.corrupt[0].tokens.size() == t.clean[0].tokens.size());
}

TEST_CASE("docstring corruption randomizes the documented names") {
  const TaskSpec t = gen_docstring(30, 13, 5, 30);
  int moved = 0;
  for (std::size_t i = 0; i < t.clean.size(); ++i) {
    const Sample& c = t.clean[i];
    CHECK(c.tokens[static_cast<std::size_t>(c.position("doc_A"))] == c.tokens[static_cast<std::size_t>(c.position("def_A"))]);
    CHECK(c.tokens[static_cast<std::size_t>(c.position("doc_B"))] == c.tokens[static_cast<std::size_t>(c.position("def_B"))]);
    CHECK(c.answer_tokens[0] == c.tokens[static_cast<std::size_t>(c.position("def_C"))]);
    CHECK(c.wrong_tokens.size() == 5);
    const Sample& x = t.corrupt[i];
    CHECK(x.tokens.size() == c.tokens.size());
    moved += x.tokens[static_cast<std::size_t>(x.position("doc_A"))] != x.tokens[static_cast<std::size_t>(x.position("def_A"))];
  }
  CHECK(moved > 20);
}

TEST_CASE("generators are pure functions of their seed") {
  for (const char* name : {"ioi", "greater_than", "docstring", "planted"}) {
    const TaskSpec a = make_task(name, 10, 99, 5, 5);
    const TaskSpec b = make_task(name, 10, 99, 5, 5);
    const TaskSpec c = make_task(name, 10, 100, 5, 5);
    CHECK(a.clean == b.clean);
    CHECK(a.corrupt == b.corrupt);
    CHECK(a.clean != c.clean);
  }
  CHECK_THROWS_AS(make_task("sorting", 1, 1), InputError);
}

TEST_CASE("task directories round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "cdt_test_taskdir";
  std::filesystem::remove_all(dir);
  const TaskSpec t = gen_greater_than(6, 4, 3, 6);
  save_task_dir(t, dir.string());
  const TaskSpec back = load_task_dir(dir.string());
  CHECK(back.name == t.name);
  CHECK(back.metric_name == "prob_diff");
  CHECK(back.clean == t.clean);
  CHECK(back.eval == t.eval);
  CHECK(back.corrupt == t.corrupt);
  CHECK(back.reference == t.reference);
  CHECK_THROWS_AS(load_task_dir((dir / "absent").string()), InputError);
}

TEST_CASE("reference circuits") {
  const auto& refs = reference_circuits();
  CHECK(refs.at("ioi").size() == 26);
  CHECK(refs.at("greater_than").size() == 8);
  CHECK(refs.at("docstring").size() == 8);
  const std::set<Node> ioi(refs.at("ioi").begin(), refs.at("ioi").end());
  CHECK(ioi.size() == 26);
  for (auto [l, h] : {std::pair{9, 9}, std::pair{10, 7}, std::pair{5, 5}}) CHECK(ioi.contains(Node{l, h, std::nullopt}));

  std::ifstream in(std::string(CDT_DATA_DIR) + "/reference_circuits.json");
  REQUIRE(in);
  const auto j = nlohmann::json::parse(in);
  for (const auto& [name, heads] : refs) {
    std::vector<Node> file;
    for (const auto& p : j.at(name)) file.push_back(Node{p.at(0).get<int>(), p.at(1).get<int>(), std::nullopt});
    CHECK(file == heads);
  }
}

TEST_CASE("planted model construction") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    INFO("seed " << seed);
    const PlantedModel pm = build_planted_model(seed);
    const TaskSpec task = gen_planted_task(500, 1000 + seed, 1, 1);
    const auto& c = pm.model.config();
    CHECK(c.n_layers == 2);
    CHECK(c.n_heads == 4);
    CHECK(pm.prev_head.layer == 0);
    CHECK(pm.induction_head.layer == 1);

    CHECK(correct_rate(pm.model, task, task.clean, nullptr, nullptr) >= 0.99);

    Circuit without_decoys(Granularity::head, AblationScheme::zero);
    for (const Node& n : pm.circuit) without_decoys.add(n);
    CHECK(correct_rate(pm.model, task, task.clean, &without_decoys, nullptr) >= 0.99);

    Circuit without_planted = Circuit::full(c, Granularity::head, AblationScheme::zero);
    for (const Node& n : pm.circuit) without_planted.remove(n);
    CHECK(correct_rate(pm.model, task, task.clean, &without_planted, nullptr) <= 1.0 / kPlantedVocab + 0.05);
  }
}

TEST_CASE("planted head placement depends on the seed") {
  std::set<std::pair<int, int>> placements;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const PlantedModel pm = build_planted_model(seed);
    placements.insert({pm.prev_head.head, pm.induction_head.head});
  }
  CHECK(placements.size() > 1);
}

TEST_CASE("task validation against a model") {
  const PlantedModel pm = build_planted_model(0);
  CHECK_NOTHROW(gen_planted_task(4, 1, 2, 2).validate(pm.model.config()));
  CHECK_THROWS_AS(gen_ioi(4, 1, 2, 2).validate(pm.model.config()), InputError);
}
