#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "idpt/autodiff.hpp"
#include "idpt/transformer.hpp"

namespace idpt {

// One materialization of a prefix: per-layer K/V blocks for the decoder plus
// the stacked key rows the recognizer uses as queries. Both are views of the
// same |P| x 2Lh projection, so they move together.
template <typename T>
struct MaterializedPrefix {
  PrefixVars<T> kv;
  typename Tape<T>::Var queries = -1;    // (|P|*L) x h, key blocks stacked layer-major
  typename Tape<T>::Var projected = -1;  // |P| x 2Lh raw projection output
};

template <typename T>
inline void validate_distribution(const Tensor<T>& probs, Index expected_n) {
  if (probs.rank() != 1 || probs.shape[0] != expected_n)
    throw ShapeError("expected a distribution over " + std::to_string(expected_n) + " entries, got " +
                     shape_str(probs.shape));
  double sum = 0;
  for (T v : probs.data) {
    if (std::isnan(static_cast<double>(v)) || v < T(0))
      throw NumericError("distribution entries must be nonnegative");
    sum += static_cast<double>(v);
  }
  if (std::abs(sum - 1.0) > 1e-5) throw NumericError("distribution sums to " + std::to_string(sum));
}

// N per-initiative prefix embedding tables behind one shared projection MLP
// (h -> 2h -> 2h -> 2Lh, tanh). Only the embeddings differ per initiative.
template <typename T>
class PrefixBank {
 public:
  void init(Index n, Index p_len, Index hidden, Index dec_layers, Rng& rng) {
    if (n < 2) throw ConfigError("prefix bank needs N >= 2, got " + std::to_string(n));
    n_ = n;
    p_len_ = p_len;
    hidden_ = hidden;
    layers_ = dec_layers;
    embeddings_.resize(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) {
      auto& e = embeddings_[static_cast<std::size_t>(i)];
      e.name = "bank.e" + std::to_string(i);
      e.tensor = Tensor<T>({p_len, hidden});
      for (auto& v : e.tensor.data) v = static_cast<T>(rng.uniform(-0.1, 0.1));
    }
    mlp1_.init("bank.mlp.w1", hidden, 2 * hidden, rng);
    mlp2_.init("bank.mlp.w2", 2 * hidden, 2 * hidden, rng);
    mlp3_.init("bank.mlp.w3", 2 * hidden, 2 * layers_ * hidden, rng);
  }

  void register_params(ParamSet<T>& set) {
    for (auto& e : embeddings_) set.add(&e);
    mlp1_.register_params(set);
    mlp2_.register_params(set);
    mlp3_.register_params(set);
  }

  Index size() const { return n_; }
  Index prefix_len() const { return p_len_; }
  Parameter<T>& embedding(Index i) { return embeddings_[static_cast<std::size_t>(i)]; }
  LinearLayer<T>& projection_out() { return mlp3_; }

  /// Projects initiative i's embedding table into per-layer K/V blocks.
  MaterializedPrefix<T> materialize(Tape<T>& t, Index i) {
    if (i < 0 || i >= n_) throw IndexError("initiative index " + std::to_string(i) + " out of range 0.." +
                                           std::to_string(n_ - 1));
    auto projected = project(t, t.param(embeddings_[static_cast<std::size_t>(i)]));
    return views_of(t, projected);
  }

  /// Element-wise convex combination of all N materializations.
  MaterializedPrefix<T> mix(Tape<T>& t, typename Tape<T>::Var probs) {
    validate_distribution(t.val(probs), n_);
    typename Tape<T>::Var mixed = -1;
    for (Index j = 0; j < n_; ++j) {
      auto projected = project(t, t.param(embeddings_[static_cast<std::size_t>(j)]));
      auto scaled = t.mul_scalar(projected, t.pick(probs, j));
      mixed = (j == 0) ? scaled : t.add(mixed, scaled);
    }
    return views_of(t, mixed);
  }

  /// Argmax selection (ties resolve to the lowest index).
  std::pair<Index, MaterializedPrefix<T>> select(Tape<T>& t, const Tensor<T>& probs) {
    validate_distribution(probs, n_);
    Index best = 0;
    for (Index j = 1; j < n_; ++j)
      if (probs[j] > probs[best]) best = j;
    return {best, materialize(t, best)};
  }

 private:
  typename Tape<T>::Var project(Tape<T>& t, typename Tape<T>::Var e) {
    auto h1 = t.tanh_op(mlp1_.forward(t, e));
    auto h2 = t.tanh_op(mlp2_.forward(t, h1));
    return mlp3_.forward(t, h2);
  }

  // Split the |P| x 2Lh projection into layer blocks [K_l | V_l] and stack
  // the key halves into the query view.
  MaterializedPrefix<T> views_of(Tape<T>& t, typename Tape<T>::Var projected) {
    MaterializedPrefix<T> out;
    out.projected = projected;
    std::vector<typename Tape<T>::Var> key_blocks;
    for (Index l = 0; l < layers_; ++l) {
      auto k = t.slice_cols(projected, l * 2 * hidden_, l * 2 * hidden_ + hidden_);
      auto v = t.slice_cols(projected, l * 2 * hidden_ + hidden_, (l + 1) * 2 * hidden_);
      out.kv.keys.push_back(k);
      out.kv.values.push_back(v);
      key_blocks.push_back(k);
    }
    out.queries = t.concat_rows(key_blocks);
    return out;
  }

  Index n_ = 0, p_len_ = 0, hidden_ = 0, layers_ = 0;
  std::vector<Parameter<T>> embeddings_;
  LinearLayer<T> mlp1_, mlp2_, mlp3_;
};

/// Raw K/V tensors of a materialized prefix, for the cached generation path.
template <typename T>
PastKeyValues<T> extract_past_kv(const Tape<T>& t, const MaterializedPrefix<T>& prefix) {
  PastKeyValues<T> out;
  for (std::size_t l = 0; l < prefix.kv.keys.size(); ++l) {
    out.keys.push_back(t.val(prefix.kv.keys[l]));
    out.values.push_back(t.val(prefix.kv.values[l]));
  }
  return out;
}

}  // namespace idpt
