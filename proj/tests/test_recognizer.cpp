#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "idpt/gradcheck.hpp"
#include "idpt/recognizer.hpp"

using namespace idpt;
using Catch::Approx;

namespace {
template <typename T>
typename Tape<T>::Var unit_proj(Tape<T>& t) {
  return t.leaf(Tensor<T>::full({1, 1}, T(1)));
}
}  // namespace

TEST_CASE("cross_attend hand-computed cases at width one") {
  // Zero query: uniform attention, output is the mean of the values.
  {
    Tape<double> t;
    auto queries = t.leaf(Tensor<double>::zeros({1, 1}));
    auto ctx = t.leaf(Tensor<double>::from_rows({{1.0}, {3.0}}));
    auto out = cross_attend_with(t, queries, ctx, unit_proj(t), unit_proj(t), unit_proj(t), 1);
    REQUIRE(t.val(out).scalar() == Approx(2.0).epsilon(1e-12));
  }
  // Singleton context: attention collapses to that token's value projection.
  {
    Tape<double> t;
    auto queries = t.leaf(Tensor<double>::from_rows({{5.0}}));
    auto ctx = t.leaf(Tensor<double>::from_rows({{0.7}}));
    auto out = cross_attend_with(t, queries, ctx, unit_proj(t), unit_proj(t), unit_proj(t), 1);
    REQUIRE(t.val(out).scalar() == Approx(0.7).epsilon(1e-12));
  }
  // Query 10 against keys {0, 1}: softmax over logits {0, 10}.
  {
    Tape<double> t;
    auto queries = t.leaf(Tensor<double>::from_rows({{10.0}}));
    auto ctx = t.leaf(Tensor<double>::from_rows({{0.0}, {1.0}}));
    auto out = cross_attend_with(t, queries, ctx, unit_proj(t), unit_proj(t), unit_proj(t), 1);
    double expected = std::exp(10.0) / (1.0 + std::exp(10.0));
    REQUIRE(t.val(out).scalar() == Approx(expected).epsilon(1e-9));
  }
  // Empty context is rejected upstream by tensor construction; a mismatatched
  // head count is a configuration error.
  {
    Tape<double> t;
    auto queries = t.leaf(Tensor<double>::zeros({1, 3}));
    auto ctx = t.leaf(Tensor<double>::zeros({2, 3}));
    auto w = t.leaf(Tensor<double>::zeros({3, 3}));
    REQUIRE_THROWS_AS(cross_attend_with(t, queries, ctx, w, w, w, 2), ConfigError);
  }
}

TEST_CASE("fuse with a zeroed output layer is exactly layer_norm of the query") {
  Recognizer<float> rec;
  Rng rng(3);
  rec.init(8, 2, rng);
  for (auto& v : rec.fuse3().w.tensor.data) v = 0;
  for (auto& v : rec.fuse3().b.tensor.data) v = 0;

  Tape<float> t;
  Tensor<float> q({4, 8}), z({4, 8});
  Rng data_rng(5);
  for (auto& v : q.data) v = static_cast<float>(data_rng.uniform(-1, 1));
  for (auto& v : z.data) v = static_cast<float>(data_rng.uniform(-1, 1));
  auto queries = t.leaf(q);
  auto fused = t.val(rec.fuse(t, t.leaf(z), queries));

  auto gain = t.leaf(Tensor<float>::full({8}, 1.0f));
  auto bias = t.leaf(Tensor<float>::zeros({8}));
  auto expected = t.val(t.layer_norm(queries, gain, bias, 1e-5f));
  REQUIRE(fused.data == expected.data);

  // Layer-norm contract: rows have zero mean, unit variance (gain 1, bias 0).
  for (Index i = 0; i < 4; ++i) {
    float mean = 0, var = 0;
    for (Index j = 0; j < 8; ++j) mean += fused.at(i, j);
    mean /= 8;
    for (Index j = 0; j < 8; ++j) var += (fused.at(i, j) - mean) * (fused.at(i, j) - mean);
    var /= 8;
    REQUIRE(mean == Approx(0.0f).margin(1e-5));
    REQUIRE(var == Approx(1.0f).margin(1e-3));
  }
}

TEST_CASE("fuse of cross_attend passes finite differences") {
  Recognizer<double> rec;
  PrefixBank<double> bank;
  Rng rng(7);
  rec.init(8, 2, rng);
  bank.init(4, 2, 8, 1, rng);
  Parameter<double> ctx{"ctx", Tensor<double>({3, 8}), true};
  Rng crng(9);
  for (auto& v : ctx.tensor.data) v = crng.uniform(-1, 1);
  Tensor<double> w({2, 8});
  for (auto& v : w.data) v = crng.uniform(-1, 1);

  CheckFn f = [&](CheckTape& t) {
    auto prefix = bank.materialize(t, 0);
    auto z = rec.cross_attend(t, prefix.queries, t.param(ctx));
    auto fused = rec.fuse(t, z, prefix.queries);
    return t.sum_all(t.mul(fused, t.leaf(w)));
  };
  REQUIRE(grad_check(f, ctx, 1e-4) < 1e-4);
  REQUIRE(grad_check(f, bank.embedding(0), 1e-4) < 1e-4);
}

TEST_CASE("classify: identical prefixes give the uniform distribution") {
  Recognizer<float> rec;
  PrefixBank<float> bank;
  Rng rng(11);
  rec.init(8, 2, rng);
  bank.init(4, 2, 8, 1, rng);
  // Overwrite every table with prefix 0's entries.
  for (Index i = 1; i < 4; ++i) bank.embedding(i).tensor = bank.embedding(0).tensor;

  Tape<float> t;
  Tensor<float> ctx({5, 8});
  Rng crng(13);
  for (auto& v : ctx.data) v = static_cast<float>(crng.uniform(-1, 1));
  auto result = rec.classify(t, t.leaf(ctx), bank);
  const auto& probs = t.val(result.probs);
  const auto& logits = t.val(result.logits);
  float sum = 0;
  for (Index j = 0; j < 4; ++j) {
    REQUIRE(probs[j] == Approx(0.25f).margin(1e-6));
    REQUIRE(logits[j] == logits[0]);  // branches are bit-identical
    sum += probs[j];
  }
  REQUIRE(sum == Approx(1.0f).margin(1e-6));
}

TEST_CASE("classify is equivariant under bank permutation") {
  Recognizer<float> rec;
  PrefixBank<float> bank;
  Rng rng(17);
  rec.init(8, 2, rng);
  bank.init(4, 2, 8, 1, rng);
  Tensor<float> ctx({4, 8});
  Rng crng(19);
  for (auto& v : ctx.data) v = static_cast<float>(crng.uniform(-1, 1));

  Tape<float> t;
  auto before = t.val(rec.classify(t, t.leaf(ctx), bank).logits);

  // Swap prefixes 1 and 3.
  std::swap(bank.embedding(1).tensor, bank.embedding(3).tensor);
  Tape<float> t2;
  auto after = t2.val(rec.classify(t2, t2.leaf(ctx), bank).logits);
  REQUIRE(after[1] == before[3]);
  REQUIRE(after[3] == before[1]);
  REQUIRE(after[0] == before[0]);
  REQUIRE(after[2] == before[2]);
}

TEST_CASE("argmax of probs ignores constant logit shifts") {
  Tape<float> t;
  Rng rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor<float> logits({4});
    for (auto& v : logits.data) v = static_cast<float>(rng.uniform(-3, 3));
    Tensor<float> shifted = logits;
    float c = static_cast<float>(rng.uniform(-40, 40));
    for (auto& v : shifted.data) v += c;
    auto p1 = t.val(t.softmax_vec(t.leaf(logits)));
    auto p2 = t.val(t.softmax_vec(t.leaf(shifted)));
    Index a1 = 0, a2 = 0;
    for (Index j = 1; j < 4; ++j) {
      if (p1[j] > p1[a1]) a1 = j;
      if (p2[j] > p2[a2]) a2 = j;
    }
    REQUIRE(a1 == a2);
  }
}

TEST_CASE("ce_loss golden values and monotonicity") {
  Recognizer<float> rec;
  PrefixBank<float> bank;
  Rng rng(29);
  rec.init(8, 2, rng);
  bank.init(4, 2, 8, 1, rng);
  Tensor<float> ctx({4, 8});
  for (auto& v : ctx.data) v = static_cast<float>(rng.uniform(-1, 1));

  // Uniform distribution from identical branches: loss is ln 4 for any gold.
  for (Index i = 1; i < 4; ++i) bank.embedding(i).tensor = bank.embedding(0).tensor;
  Tape<float> t;
  auto result = rec.classify(t, t.leaf(ctx), bank);
  for (Index gold = 0; gold < 4; ++gold)
    REQUIRE(t.val(rec.ce_loss(t, result, gold)).scalar() == Approx(std::log(4.0f)).margin(1e-5));
  REQUIRE_THROWS_AS(rec.ce_loss(t, result, 7), IndexError);

  // Raising the gold logit with the others fixed lowers the loss.
  Tape<float> t2;
  float prev = 1e30f;
  for (float bump = 0; bump < 3.0f; bump += 0.5f) {
    auto logits = t2.leaf(Tensor<float>::from_vec({0.3f, -0.1f + bump, 0.2f, 0.0f}));
    float loss = t2.val(t2.cross_entropy(logits, 1)).scalar();
    REQUIRE(loss < prev);
    prev = loss;
  }
}

TEST_CASE("classify end-to-end gradients pass finite differences") {
  Recognizer<double> rec;
  PrefixBank<double> bank;
  Rng rng(31);
  rec.init(8, 2, rng);
  bank.init(4, 2, 8, 1, rng);
  Parameter<double> ctx{"ctx", Tensor<double>({3, 8}), true};
  Rng crng(37);
  for (auto& v : ctx.tensor.data) v = crng.uniform(-1, 1);

  CheckFn f = [&](CheckTape& t) {
    auto result = rec.classify(t, t.param(ctx), bank);
    return rec.ce_loss(t, result, 2);
  };
  ParamSet<double> params;
  bank.register_params(params);
  rec.register_params(params);
  std::string worst;
  double err = grad_check_all(params, f, 1e-4, &worst);
  INFO("worst parameter: " << worst);
  REQUIRE(err < 1e-4);
  REQUIRE(grad_check(f, ctx, 1e-4) < 1e-4);
}
