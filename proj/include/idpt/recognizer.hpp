#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "idpt/autodiff.hpp"
#include "idpt/prefix.hpp"
#include "idpt/transformer.hpp"

namespace idpt {

/// Multi-head cross-attention of prefix query rows against an encoded
/// context: e_ij = (q_j W^Q)(h_i W^K)^T / sqrt(d_z), softmax over context
/// positions, heads concatenated back to width h. The projections carry no
/// bias.
template <typename T>
typename Tape<T>::Var cross_attend_with(Tape<T>& t, typename Tape<T>::Var queries,
                                        typename Tape<T>::Var context, typename Tape<T>::Var wq,
                                        typename Tape<T>::Var wk, typename Tape<T>::Var wv,
                                        Index heads) {
  const auto& ctx = t.val(context);
  if (ctx.rank() != 2 || ctx.shape[0] < 1) throw ShapeError("cross_attend: empty context");
  const Index h = ctx.shape[1];
  if (h % heads != 0) throw ConfigError("cross_attend: width not divisible by head count");
  const Index d_z = h / heads;
  auto q = t.matmul(queries, wq);
  auto k = t.matmul(context, wk);
  auto v = t.matmul(context, wv);
  std::vector<typename Tape<T>::Var> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (Index m = 0; m < heads; ++m) {
    auto q_m = t.slice_cols(q, m * d_z, (m + 1) * d_z);
    auto k_m = t.slice_cols(k, m * d_z, (m + 1) * d_z);
    auto v_m = t.slice_cols(v, m * d_z, (m + 1) * d_z);
    auto e = t.scale(t.matmul_bt(q_m, k_m), T(1) / static_cast<T>(std::sqrt(static_cast<double>(d_z))));
    auto alpha = t.softmax_rows(e);
    outs.push_back(t.matmul(alpha, v_m));
  }
  return t.concat_cols(outs);
}

// Classifier output for one example.
template <typename T>
struct ClassifyResult {
  std::vector<MaterializedPrefix<T>> prefixes;  // one per initiative, query source
  typename Tape<T>::Var logits = -1;            // {N}
  typename Tape<T>::Var probs = -1;             // {N}, softmax of logits
};

// Initiative recognizer: per initiative, cross-attend that prefix's query
// rows against the dialogue encoding, fuse with a residual layer norm,
// max-pool, and score with a shared scalar-logit classifier.
template <typename T>
class Recognizer {
 public:
  void init(Index hidden, Index heads, Rng& rng) {
    hidden_ = hidden;
    heads_ = heads;
    if (hidden % heads != 0) throw ConfigError("recognizer: hidden not divisible by heads");
    auto init_proj = [&](Parameter<T>& p, const std::string& name) {
      p.name = name;
      p.tensor = Tensor<T>({hidden, hidden});
      double limit = std::sqrt(6.0 / static_cast<double>(2 * hidden));
      for (auto& v : p.tensor.data) v = static_cast<T>(rng.uniform(-limit, limit));
    };
    init_proj(wq_, "recognizer.wq");
    init_proj(wk_, "recognizer.wk");
    init_proj(wv_, "recognizer.wv");
    fuse1_.init("recognizer.fuse.w1", hidden, hidden, rng);
    fuse2_.init("recognizer.fuse.w2", hidden, hidden, rng);
    fuse3_.init("recognizer.fuse.w3", hidden, hidden, rng);
    fuse_ln_.init("recognizer.fuse_ln", hidden);
    cls1_.init("recognizer.cls.w1", hidden, hidden, rng);
    cls2_.init("recognizer.cls.w2", hidden, hidden, rng);
    cls3_.init("recognizer.cls.w3", hidden, 1, rng);
  }

  void register_params(ParamSet<T>& set) {
    set.add(&wq_);
    set.add(&wk_);
    set.add(&wv_);
    fuse1_.register_params(set);
    fuse2_.register_params(set);
    fuse3_.register_params(set);
    fuse_ln_.register_params(set);
    cls1_.register_params(set);
    cls2_.register_params(set);
    cls3_.register_params(set);
  }

  typename Tape<T>::Var cross_attend(Tape<T>& t, typename Tape<T>::Var queries,
                                     typename Tape<T>::Var context) {
    return cross_attend_with(t, queries, context, t.param(wq_), t.param(wk_), t.param(wv_), heads_);
  }

  /// h'' = Layernorm(MLP(z) + query), row-wise.
  typename Tape<T>::Var fuse(Tape<T>& t, typename Tape<T>::Var z, typename Tape<T>::Var queries) {
    auto h1 = t.tanh_op(fuse1_.forward(t, z));
    auto h2 = t.tanh_op(fuse2_.forward(t, h1));
    auto h3 = fuse3_.forward(t, h2);
    return fuse_ln_.forward(t, t.add(h3, queries));
  }

  /// Full recognizer pass: one logit per initiative from shared weights,
  /// softmax over the N scalars.
  ClassifyResult<T> classify(Tape<T>& t, typename Tape<T>::Var context, PrefixBank<T>& bank) {
    ClassifyResult<T> result;
    std::vector<typename Tape<T>::Var> logit_scalars;
    for (Index i = 0; i < bank.size(); ++i) {
      auto prefix = bank.materialize(t, i);
      auto z = cross_attend(t, prefix.queries, context);
      auto fused = fuse(t, z, prefix.queries);
      auto pooled = t.reshape(t.max_pool_cols(fused), {1, hidden_});
      auto c1 = t.tanh_op(cls1_.forward(t, pooled));
      auto c2 = t.tanh_op(cls2_.forward(t, c1));
      auto logit = cls3_.forward(t, c2);  // 1 x 1
      logit_scalars.push_back(t.reshape(logit, {1}));
      result.prefixes.push_back(std::move(prefix));
    }
    result.logits = t.concat_scalars(logit_scalars);
    result.probs = t.softmax_vec(result.logits);
    return result;
  }

  /// -log probs[gold], computed from the logits for stability.
  typename Tape<T>::Var ce_loss(Tape<T>& t, const ClassifyResult<T>& result, Index gold) {
    return t.cross_entropy(result.logits, gold);
  }

  LinearLayer<T>& fuse3() { return fuse3_; }

 private:
  Index hidden_ = 0, heads_ = 0;
  Parameter<T> wq_, wk_, wv_;
  LinearLayer<T> fuse1_, fuse2_, fuse3_;
  LayerNormLayer<T> fuse_ln_;
  LinearLayer<T> cls1_, cls2_, cls3_;
};

}  // namespace idpt
