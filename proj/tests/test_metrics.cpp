#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "idpt/metrics.hpp"
#include "idpt/rng.hpp"

using namespace idpt;
using Catch::Approx;

namespace {
TokenSeq toks(std::initializer_list<const char*> words) {
  TokenSeq out;
  for (const char* w : words) out.emplace_back(w);
  return out;
}
}  // namespace

TEST_CASE("bleu golden values") {
  auto ref = toks({"a", "b", "c"});
  REQUIRE(bleu(ref, ref, 1) == Approx(1.0));
  REQUIRE(bleu(ref, ref, 4) == Approx(1.0));

  REQUIRE(bleu(toks({"a", "b", "c"}), toks({"a", "b", "d"}), 1) == Approx(2.0 / 3.0).epsilon(1e-9));

  // One-token candidate against a four-token reference: BP = e^{1-4/1}.
  REQUIRE(bleu(toks({"a"}), toks({"a", "b", "c", "d"}), 1) == Approx(std::exp(-3.0)).epsilon(1e-9));

  REQUIRE(bleu({}, ref, 1) == 0.0);
  REQUIRE_THROWS_AS(bleu(ref, {}, 1), DataError);
}

TEST_CASE("rouge golden values") {
  auto ref = toks({"a", "c", "b"});
  auto cand = toks({"a", "b", "c"});
  REQUIRE(rouge1(ref, ref) == Approx(1.0));
  REQUIRE(rougeL(ref, ref) == Approx(1.0));
  REQUIRE(rouge1(cand, ref) == Approx(1.0));
  REQUIRE(rougeL(cand, ref) == Approx(2.0 / 3.0).epsilon(1e-9));
  REQUIRE(rouge1({}, ref) == 0.0);
  REQUIRE(rougeL({}, ref) == 0.0);
}

TEST_CASE("metric bounds and rouge dominance on random pairs") {
  Rng rng(31);
  const char* vocabulary[] = {"a", "b", "c", "d", "e"};
  for (int trial = 0; trial < 200; ++trial) {
    TokenSeq cand, ref;
    std::size_t nc = 1 + rng.index(6), nr = 1 + rng.index(6);
    for (std::size_t i = 0; i < nc; ++i) cand.push_back(vocabulary[rng.index(5)]);
    for (std::size_t i = 0; i < nr; ++i) ref.push_back(vocabulary[rng.index(5)]);
    double b1 = bleu(cand, ref, 1), b4 = bleu(cand, ref, 4);
    double r1 = rouge1(cand, ref), rl = rougeL(cand, ref);
    REQUIRE((b1 >= 0.0 && b1 <= 1.0));
    REQUIRE((b4 >= 0.0 && b4 <= 1.0));
    REQUIRE((r1 >= 0.0 && r1 <= 1.0));
    REQUIRE((rl >= 0.0 && rl <= 1.0));
    REQUIRE(r1 >= rl - 1e-12);
  }
}

TEST_CASE("accuracy golden values and permutation matching") {
  REQUIRE(accuracy({3, 2, 1, 0}, {3, 2, 1, 1}) == Approx(0.75));
  REQUIRE(accuracy({1, 1, 2}, {1, 1, 2}) == Approx(1.0));
  REQUIRE_THROWS_AS(accuracy({1}, {1, 2}), DataError);

  auto [acc, perm] = permutation_matched_accuracy({1, 0, 1, 0}, {0, 1, 0, 1}, 4);
  REQUIRE(acc == Approx(1.0));
  REQUIRE(perm[1] == 0);
  REQUIRE(perm[0] == 1);

  // Identity mapping is already optimal here.
  auto [acc2, perm2] = permutation_matched_accuracy({0, 1, 2, 3}, {0, 1, 2, 3}, 4);
  REQUIRE(acc2 == Approx(1.0));
  REQUIRE(perm2 == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("pearson golden values") {
  REQUIRE(pearson({1, 2, 3}, {2, 4, 6}) == Approx(1.0));
  REQUIRE(pearson({1, 2, 3}, {-1, -2, -3}) == Approx(-1.0));
  REQUIRE(pearson({1, 2, 3}, {1, 3, 2}) == Approx(0.5).epsilon(1e-9));
  REQUIRE_THROWS_AS(pearson({1, 1, 1}, {1, 2, 3}), NumericError);
  REQUIRE_THROWS_AS(pearson({1}, {2}), DataError);
}

TEST_CASE("pearson of affine transform is the slope sign") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x, y;
    double a = rng.uniform(-5, 5);
    if (std::abs(a) < 0.1) a = 0.5;
    double b = rng.uniform(-10, 10);
    for (int i = 0; i < 12; ++i) {
      double xi = rng.uniform(-3, 3);
      x.push_back(xi);
      y.push_back(a * xi + b);
    }
    REQUIRE(pearson(x, y) == Approx(a > 0 ? 1.0 : -1.0).epsilon(1e-6));
  }
}

TEST_CASE("controllability counts per-label template hits") {
  auto matcher = [](int label, const TokenSeq& resp) {
    return !resp.empty() && resp[0] == std::to_string(label);
  };
  std::vector<TokenSeq> all_match = {toks({"0"}), toks({"1"}), toks({"2"}), toks({"3"})};
  REQUIRE(controllability(all_match, 4, matcher) == Approx(1.0));

  std::vector<TokenSeq> identical = {toks({"2"}), toks({"2"}), toks({"2"}), toks({"2"})};
  REQUIRE(controllability(identical, 4, matcher) <= 0.25);

  REQUIRE_THROWS_AS(controllability({toks({"0"})}, 4, matcher), ShapeError);
}

TEST_CASE("eval report serializes the documented key set") {
  EvalReport rep;
  rep.accuracy = 0.9;
  rep.bleu1 = 0.5;
  rep.pearson_len_init = std::nullopt;
  auto j = rep.to_json();
  std::vector<std::string> keys;
  for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
  REQUIRE(keys == std::vector<std::string>{"accuracy", "bleu1", "bleu4", "rouge1_f", "rougeL_f",
                                           "pearson_len_init", "controllability", "per_example"});
  REQUIRE(j["pearson_len_init"].is_null());
}
