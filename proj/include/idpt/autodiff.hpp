#pragma once

#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "idpt/error.hpp"
#include "idpt/rng.hpp"
#include "idpt/tensor.hpp"

namespace idpt {

// A named model weight. Frozen (trainable=false) parameters never appear in
// gradient maps and never move under an optimizer step.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;
};

// Ordered registry of the parameters of one model. Registration order fixes
// the checkpoint manifest order.
template <typename T>
class ParamSet {
 public:
  void add(Parameter<T>* p) {
    if (by_name_.count(p->name)) throw ConfigError("duplicate parameter name: " + p->name);
    by_name_[p->name] = p;
    ordered_.push_back(p);
  }

  Parameter<T>* find(const std::string& name) const {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : it->second;
  }

  const std::vector<Parameter<T>*>& ordered() const { return ordered_; }

 private:
  std::vector<Parameter<T>*> ordered_;
  std::unordered_map<std::string, Parameter<T>*> by_name_;
};

template <typename T>
using GradMap = std::map<std::string, Tensor<T>>;

namespace detail {

// y[0..n) += a * x[0..n). Innermost loop of every matmul; vectorizable
// because each y[j] is an independent accumulator.
template <typename T>
inline void axpy(T* __restrict y, T a, const T* __restrict x, Index n) {
  for (Index j = 0; j < n; ++j) y[j] += a * x[j];
}

// C += A(m x p) * B(p x n), ikj order: for every C[i][j] the sum over k runs
// k = 0,1,2,... so accumulation order is fixed left to right.
template <typename T>
inline void mm_acc(Tensor<T>& c, const Tensor<T>& a, const Tensor<T>& b) {
  const Index m = a.shape[0], p = a.shape[1], n = b.shape[1];
  for (Index i = 0; i < m; ++i) {
    const T* arow = a.row_ptr(i);
    T* crow = c.row_ptr(i);
    for (Index k = 0; k < p; ++k) axpy(crow, arow[k], b.row_ptr(k), n);
  }
}

template <typename T>
inline Tensor<T> transposed(const Tensor<T>& a) {
  Tensor<T> t({a.shape[1], a.shape[0]});
  for (Index i = 0; i < a.shape[0]; ++i)
    for (Index j = 0; j < a.shape[1]; ++j) t.at(j, i) = a.at(i, j);
  return t;
}

// C += A^T(p x m)^T... i.e. C(p x n) += A(m x p)^T * B(m x n), accumulating
// over rows of A in ascending i.
template <typename T>
inline void mm_aTb_acc(Tensor<T>& c, const Tensor<T>& a, const Tensor<T>& b) {
  const Index m = a.shape[0], p = a.shape[1], n = b.shape[1];
  for (Index i = 0; i < m; ++i) {
    const T* arow = a.row_ptr(i);
    const T* brow = b.row_ptr(i);
    for (Index k = 0; k < p; ++k) axpy(c.row_ptr(k), arow[k], brow, n);
  }
}

}  // namespace detail

// Reverse-mode tape over dense tensors. Define-by-run: every op appends a
// node holding the forward value and, when gradients are enabled and some
// input requires them, a closure that scatters the node's gradient to its
// inputs. Reverse traversal is a single reverse scan of the node list, so
// each recorded operation is visited exactly once.
template <typename T>
class Tape {
 public:
  using Var = std::int32_t;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }

  const Tensor<T>& val(Var v) const { return nodes_[static_cast<std::size_t>(v)].value; }

  // ---- leaves ----

  Var leaf(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  Var param(Parameter<T>& p) {
    auto it = param_cache_.find(&p);
    if (it != param_cache_.end()) return it->second;
    bool needs = grad_enabled_ && p.trainable;
    Var v = push(p.tensor, needs, &p);
    param_cache_[&p] = v;
    return v;
  }

  // ---- arithmetic ----

  Var add(Var a, Var b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    if (!same_shape(ta, tb))
      throw ShapeError("add shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor<T> out = ta;
    for (Index i = 0; i < out.numel(); ++i) out[i] += tb[i];
    return record(std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
      accumulate(a, g);
      accumulate(b, g);
    });
  }

  // y[i][j] = x[i][j] + bias[j]
  Var add_row_broadcast(Var x, Var bias) {
    const auto& tx = val(x);
    const auto& tb = val(bias);
    if (tb.rank() != 1 || tb.shape[0] != tx.shape[1])
      throw ShapeError("bias " + shape_str(tb.shape) + " does not match " + shape_str(tx.shape));
    Tensor<T> out = tx;
    for (Index i = 0; i < tx.shape[0]; ++i)
      for (Index j = 0; j < tx.shape[1]; ++j) out.at(i, j) += tb[j];
    return record(std::move(out), {x, bias}, [this, x, bias](const Tensor<T>& g) {
      accumulate(x, g);
      if (wants_grad(bias)) {
        Tensor<T> gb({g.shape[1]});
        for (Index i = 0; i < g.shape[0]; ++i)
          for (Index j = 0; j < g.shape[1]; ++j) gb[j] += g.at(i, j);
        accumulate_raw(bias, gb);
      }
    });
  }

  Var scale(Var a, T c) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v *= c;
    return record(std::move(out), {a}, [this, a, c](const Tensor<T>& g) {
      if (!wants_grad(a)) return;
      Tensor<T> ga = g;
      for (auto& v : ga.data) v *= c;
      accumulate_raw(a, ga);
    });
  }

  // Elementwise product.
  Var mul(Var a, Var b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    if (!same_shape(ta, tb))
      throw ShapeError("mul shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
    Tensor<T> out = ta;
    for (Index i = 0; i < out.numel(); ++i) out[i] *= tb[i];
    return record(std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
      if (wants_grad(a)) {
        Tensor<T> ga = g;
        const auto& tb2 = val(b);
        for (Index i = 0; i < ga.numel(); ++i) ga[i] *= tb2[i];
        accumulate_raw(a, ga);
      }
      if (wants_grad(b)) {
        Tensor<T> gb = g;
        const auto& ta2 = val(a);
        for (Index i = 0; i < gb.numel(); ++i) gb[i] *= ta2[i];
        accumulate_raw(b, gb);
      }
    });
  }

  // Matrix times tape scalar, used by the soft prefix mix.
  Var mul_scalar(Var a, Var s) {
    const auto& ts = val(s);
    if (!ts.is_scalar()) throw ShapeError("mul_scalar needs scalar, got " + shape_str(ts.shape));
    T sv = ts.data[0];
    Tensor<T> out = val(a);
    for (auto& v : out.data) v *= sv;
    return record(std::move(out), {a, s}, [this, a, s](const Tensor<T>& g) {
      if (wants_grad(a)) {
        T sv2 = val(s).data[0];
        Tensor<T> ga = g;
        for (auto& v : ga.data) v *= sv2;
        accumulate_raw(a, ga);
      }
      if (wants_grad(s)) {
        const auto& ta = val(a);
        T acc = 0;
        for (Index i = 0; i < ta.numel(); ++i) acc += ta[i] * g[i];
        Tensor<T> gs({1});
        gs[0] = acc;
        accumulate_raw(s, gs);
      }
    });
  }

  Var sum_all(Var a) {
    const auto& ta = val(a);
    T acc = 0;
    for (T v : ta.data) acc += v;
    Tensor<T> out({1});
    out[0] = acc;
    return record(std::move(out), {a}, [this, a](const Tensor<T>& g) {
      if (!wants_grad(a)) return;
      Tensor<T> ga(val(a).shape);
      for (auto& v : ga.data) v = g[0];
      accumulate_raw(a, ga);
    });
  }

  // ---- linear algebra ----

  // c[i][j] = sum_t a[i][t] * b[t][j], t ascending.
  Var matmul(Var a, Var b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0])
      throw ShapeError("matmul shape mismatch " + shape_str(ta.shape) + " x " + shape_str(tb.shape));
    Tensor<T> out({ta.shape[0], tb.shape[1]});
    detail::mm_acc(out, ta, tb);
    return record(std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
      if (wants_grad(a)) {
        // dA += dC * B^T
        Tensor<T> bt = detail::transposed(val(b));
        Tensor<T> ga({g.shape[0], bt.shape[1]});
        detail::mm_acc(ga, g, bt);
        accumulate_raw(a, ga);
      }
      if (wants_grad(b)) {
        // dB += A^T * dC
        Tensor<T> gb({val(a).shape[1], g.shape[1]});
        detail::mm_aTb_acc(gb, val(a), g);
        accumulate_raw(b, gb);
      }
    });
  }

  // c = a * b^T; b is (n x p), a is (m x p). Attention scores.
  Var matmul_bt(Var a, Var b) {
    const auto& ta = val(a);
    const auto& tb = val(b);
    if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[1])
      throw ShapeError("matmul_bt shape mismatch " + shape_str(ta.shape) + " x " + shape_str(tb.shape) + "^T");
    Tensor<T> bt = detail::transposed(tb);
    Tensor<T> out({ta.shape[0], tb.shape[0]});
    detail::mm_acc(out, ta, bt);
    return record(std::move(out), {a, b}, [this, a, b](const Tensor<T>& g) {
      if (wants_grad(a)) {
        // dA += dC * B
        Tensor<T> ga({g.shape[0], val(b).shape[1]});
        detail::mm_acc(ga, g, val(b));
        accumulate_raw(a, ga);
      }
      if (wants_grad(b)) {
        // dB += dC^T * A
        Tensor<T> gb({g.shape[1], val(a).shape[1]});
        detail::mm_aTb_acc(gb, g, val(a));
        accumulate_raw(b, gb);
      }
    });
  }

  // ---- nonlinearities ----

  Var tanh_op(Var a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = std::tanh(v);
    return record(std::move(out), {a}, [this, a, self = next_id()](const Tensor<T>& g) {
      if (!wants_grad(a)) return;
      const auto& y = val(self);
      Tensor<T> ga = g;
      for (Index i = 0; i < ga.numel(); ++i) ga[i] *= (T(1) - y[i] * y[i]);
      accumulate_raw(a, ga);
    });
  }

  // tanh-approximation GELU; smooth, so finite differences stay friendly.
  Var gelu(Var a) {
    const T c = T(0.7978845608028654);  // sqrt(2/pi)
    const T k = T(0.044715);
    Tensor<T> out = val(a);
    for (auto& v : out.data) {
      T u = c * (v + k * v * v * v);
      v = T(0.5) * v * (T(1) + std::tanh(u));
    }
    return record(std::move(out), {a}, [this, a, c, k](const Tensor<T>& g) {
      if (!wants_grad(a)) return;
      const auto& x = val(a);
      Tensor<T> ga = g;
      for (Index i = 0; i < ga.numel(); ++i) {
        T xv = x[i];
        T u = c * (xv + k * xv * xv * xv);
        T th = std::tanh(u);
        T d = T(0.5) * (T(1) + th) + T(0.5) * xv * (T(1) - th * th) * c * (T(1) + T(3) * k * xv * xv);
        ga[i] *= d;
      }
      accumulate_raw(a, ga);
    });
  }

  // ---- reductions and normalizations ----

  /// Row-wise softmax with per-row max subtraction. Rows sum to 1.
  Var softmax_rows(Var x) {
    const auto& tx = val(x);
    if (tx.rank() != 2) throw ShapeError("softmax_rows expects a matrix, got " + shape_str(tx.shape));
    if (tx.has_nan()) throw NumericError("softmax_rows: NaN input");
    Tensor<T> out = tx;
    for (Index i = 0; i < tx.shape[0]; ++i) {
      T* row = out.row_ptr(i);
      T mx = row[0];
      for (Index j = 1; j < tx.shape[1]; ++j) mx = std::max(mx, row[j]);
      T denom = 0;
      for (Index j = 0; j < tx.shape[1]; ++j) {
        row[j] = std::exp(row[j] - mx);
        denom += row[j];
      }
      for (Index j = 0; j < tx.shape[1]; ++j) row[j] /= denom;
    }
    return record(std::move(out), {x}, [this, x, self = next_id()](const Tensor<T>& g) {
      if (!wants_grad(x)) return;
      const auto& y = val(self);
      Tensor<T> gx = g;
      for (Index i = 0; i < y.shape[0]; ++i) {
        const T* yrow = y.row_ptr(i);
        T* grow = gx.row_ptr(i);
        T dot = 0;
        for (Index j = 0; j < y.shape[1]; ++j) dot += grow[j] * yrow[j];
        for (Index j = 0; j < y.shape[1]; ++j) grow[j] = yrow[j] * (grow[j] - dot);
      }
      accumulate_raw(x, gx);
    });
  }

  Var softmax_vec(Var x) {
    if (val(x).rank() != 1)
      throw ShapeError("softmax_vec expects a vector, got " + shape_str(val(x).shape));
    const Index n = val(x).shape[0];
    return reshape(softmax_rows(reshape(x, {1, n})), {n});
  }

  /// Per-row zero mean / unit variance (population variance), then gain/bias.
  Var layer_norm(Var x, Var gain, Var bias, T eps) {
    const auto& tx = val(x);
    const auto& tg = val(gain);
    const auto& tb = val(bias);
    if (tx.rank() != 2) throw ShapeError("layer_norm expects a matrix, got " + shape_str(tx.shape));
    const Index h = tx.shape[1];
    if (h < 2) throw ShapeError("layer_norm needs width >= 2, got " + shape_str(tx.shape));
    if (eps <= 0) throw NumericError("layer_norm eps must be positive");
    if (tg.numel() != h || tb.numel() != h)
      throw ShapeError("layer_norm gain/bias width mismatch with " + shape_str(tx.shape));
    const Index m = tx.shape[0];
    Tensor<T> out({m, h});
    Tensor<T> xhat({m, h});
    Tensor<T> inv_std({m});
    for (Index i = 0; i < m; ++i) {
      const T* row = tx.row_ptr(i);
      T mean = 0;
      for (Index j = 0; j < h; ++j) mean += row[j];
      mean /= T(h);
      T var = 0;
      for (Index j = 0; j < h; ++j) {
        T d = row[j] - mean;
        var += d * d;
      }
      var /= T(h);
      T inv = T(1) / std::sqrt(var + eps);
      inv_std[i] = inv;
      for (Index j = 0; j < h; ++j) {
        T xh = (row[j] - mean) * inv;
        xhat.at(i, j) = xh;
        out.at(i, j) = tg[j] * xh + tb[j];
      }
    }
    auto xhat_p = std::make_shared<Tensor<T>>(std::move(xhat));
    auto inv_p = std::make_shared<Tensor<T>>(std::move(inv_std));
    return record(std::move(out), {x, gain, bias},
                  [this, x, gain, bias, xhat_p, inv_p](const Tensor<T>& g) {
      const Index m = g.shape[0], h = g.shape[1];
      const auto& tg = val(gain);
      if (wants_grad(x)) {
        Tensor<T> gx({m, h});
        for (Index i = 0; i < m; ++i) {
          const T* grow = g.row_ptr(i);
          const T* xh = xhat_p->row_ptr(i);
          T inv = (*inv_p)[i];
          T mean_dxhat = 0, mean_dxhat_xhat = 0;
          for (Index j = 0; j < h; ++j) {
            T dxh = grow[j] * tg[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
          }
          mean_dxhat /= T(h);
          mean_dxhat_xhat /= T(h);
          for (Index j = 0; j < h; ++j) {
            T dxh = grow[j] * tg[j];
            gx.at(i, j) = inv * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
          }
        }
        accumulate_raw(x, gx);
      }
      if (wants_grad(gain)) {
        Tensor<T> gg({h});
        for (Index i = 0; i < m; ++i)
          for (Index j = 0; j < h; ++j) gg[j] += g.at(i, j) * xhat_p->at(i, j);
        accumulate_raw(gain, gg);
      }
      if (wants_grad(bias)) {
        Tensor<T> gb({h});
        for (Index i = 0; i < m; ++i)
          for (Index j = 0; j < h; ++j) gb[j] += g.at(i, j);
        accumulate_raw(bias, gb);
      }
    });
  }

  /// Column-wise max over rows. Gradient goes to the first argmax row only.
  Var max_pool_cols(Var x) {
    const auto& tx = val(x);
    if (tx.rank() != 2 || tx.shape[0] < 1)
      throw ShapeError("max_pool_cols expects a nonempty matrix, got " + shape_str(tx.shape));
    const Index m = tx.shape[0], n = tx.shape[1];
    Tensor<T> out({n});
    auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(n), Index(0));
    for (Index j = 0; j < n; ++j) {
      T best = tx.at(0, j);
      Index arg = 0;
      for (Index i = 1; i < m; ++i) {
        if (tx.at(i, j) > best) {
          best = tx.at(i, j);
          arg = i;
        }
      }
      out[j] = best;
      (*argmax)[static_cast<std::size_t>(j)] = arg;
    }
    return record(std::move(out), {x}, [this, x, argmax](const Tensor<T>& g) {
      if (!wants_grad(x)) return;
      Tensor<T> gx(val(x).shape);
      for (Index j = 0; j < gx.shape[1]; ++j)
        gx.at((*argmax)[static_cast<std::size_t>(j)], j) += g[j];
      accumulate_raw(x, gx);
    });
  }

  // ---- losses ----

  /// -log softmax(logits)[gold]
  Var cross_entropy(Var logits, Index gold) {
    const auto& tl = val(logits);
    if (tl.rank() != 1) throw ShapeError("cross_entropy expects a vector, got " + shape_str(tl.shape));
    const Index n = tl.shape[0];
    if (gold < 0 || gold >= n)
      throw IndexError("cross_entropy gold index " + std::to_string(gold) + " out of range 0.." + std::to_string(n - 1));
    T mx = tl[0];
    for (Index j = 1; j < n; ++j) mx = std::max(mx, tl[j]);
    T denom = 0;
    for (Index j = 0; j < n; ++j) denom += std::exp(tl[j] - mx);
    Tensor<T> out({1});
    out[0] = (mx + std::log(denom)) - tl[gold];
    return record(std::move(out), {logits}, [this, logits, gold](const Tensor<T>& g) {
      if (!wants_grad(logits)) return;
      const auto& tl2 = val(logits);
      const Index n2 = tl2.shape[0];
      T mx2 = tl2[0];
      for (Index j = 1; j < n2; ++j) mx2 = std::max(mx2, tl2[j]);
      T denom2 = 0;
      for (Index j = 0; j < n2; ++j) denom2 += std::exp(tl2[j] - mx2);
      Tensor<T> gl({n2});
      for (Index j = 0; j < n2; ++j) {
        T p = std::exp(tl2[j] - mx2) / denom2;
        gl[j] = (p - (j == gold ? T(1) : T(0))) * g[0];
      }
      accumulate_raw(logits, gl);
    });
  }

  /// Mean over rows of -log softmax(logits[i])[targets[i]].
  Var seq_nll(Var logits, const std::vector<Index>& targets) {
    const auto& tl = val(logits);
    if (tl.rank() != 2) throw ShapeError("seq_nll expects a matrix, got " + shape_str(tl.shape));
    const Index m = tl.shape[0], n = tl.shape[1];
    if (static_cast<Index>(targets.size()) != m)
      throw ShapeError("seq_nll target length " + std::to_string(targets.size()) + " != rows " + std::to_string(m));
    for (Index t : targets)
      if (t < 0 || t >= n) throw IndexError("seq_nll target id " + std::to_string(t) + " out of vocab");
    T total = 0;
    for (Index i = 0; i < m; ++i) {
      const T* row = tl.row_ptr(i);
      T mx = row[0];
      for (Index j = 1; j < n; ++j) mx = std::max(mx, row[j]);
      T denom = 0;
      for (Index j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
      total += (mx + std::log(denom)) - row[targets[static_cast<std::size_t>(i)]];
    }
    Tensor<T> out({1});
    out[0] = total / T(m);
    return record(std::move(out), {logits}, [this, logits, targets](const Tensor<T>& g) {
      if (!wants_grad(logits)) return;
      const auto& tl2 = val(logits);
      const Index m2 = tl2.shape[0], n2 = tl2.shape[1];
      Tensor<T> gl({m2, n2});
      const T scale = g[0] / T(m2);
      for (Index i = 0; i < m2; ++i) {
        const T* row = tl2.row_ptr(i);
        T* grow = gl.row_ptr(i);
        T mx = row[0];
        for (Index j = 1; j < n2; ++j) mx = std::max(mx, row[j]);
        T denom = 0;
        for (Index j = 0; j < n2; ++j) denom += std::exp(row[j] - mx);
        for (Index j = 0; j < n2; ++j) grow[j] = std::exp(row[j] - mx) / denom * scale;
        grow[targets[static_cast<std::size_t>(i)]] -= scale;
      }
      accumulate_raw(logits, gl);
    });
  }

  // ---- indexing / reshaping ----

  Var embed_rows(Var table, const std::vector<Index>& ids) {
    const auto& tt = val(table);
    if (tt.rank() != 2) throw ShapeError("embed_rows table must be a matrix");
    if (ids.empty()) throw ShapeError("embed_rows: empty id list");
    const Index h = tt.shape[1];
    for (Index id : ids)
      if (id < 0 || id >= tt.shape[0]) throw IndexError("embedding id " + std::to_string(id) + " out of range");
    Tensor<T> out({static_cast<Index>(ids.size()), h});
    for (std::size_t i = 0; i < ids.size(); ++i)
      std::copy(tt.row_ptr(ids[i]), tt.row_ptr(ids[i]) + h, out.row_ptr(static_cast<Index>(i)));
    return record(std::move(out), {table}, [this, table, ids](const Tensor<T>& g) {
      if (!wants_grad(table)) return;
      Tensor<T> gt(val(table).shape);
      const Index h2 = gt.shape[1];
      for (std::size_t i = 0; i < ids.size(); ++i)
        detail::axpy(gt.row_ptr(ids[i]), T(1), g.row_ptr(static_cast<Index>(i)), h2);
      accumulate_raw(table, gt);
    });
  }

  Var slice_cols(Var x, Index c0, Index c1) {
    const auto& tx = val(x);
    if (tx.rank() != 2 || c0 < 0 || c1 > tx.shape[1] || c0 >= c1)
      throw ShapeError("slice_cols [" + std::to_string(c0) + "," + std::to_string(c1) + ") of " + shape_str(tx.shape));
    Tensor<T> out({tx.shape[0], c1 - c0});
    for (Index i = 0; i < tx.shape[0]; ++i)
      std::copy(tx.row_ptr(i) + c0, tx.row_ptr(i) + c1, out.row_ptr(i));
    return record(std::move(out), {x}, [this, x, c0](const Tensor<T>& g) {
      if (!wants_grad(x)) return;
      Tensor<T> gx(val(x).shape);
      for (Index i = 0; i < g.shape[0]; ++i)
        detail::axpy(gx.row_ptr(i) + c0, T(1), g.row_ptr(i), g.shape[1]);
      accumulate_raw(x, gx);
    });
  }

  Var slice_rows(Var x, Index r0, Index r1) {
    const auto& tx = val(x);
    if (tx.rank() != 2 || r0 < 0 || r1 > tx.shape[0] || r0 >= r1)
      throw ShapeError("slice_rows [" + std::to_string(r0) + "," + std::to_string(r1) + ") of " + shape_str(tx.shape));
    Tensor<T> out({r1 - r0, tx.shape[1]});
    std::copy(tx.row_ptr(r0), tx.row_ptr(r0) + out.numel(), out.data.data());
    return record(std::move(out), {x}, [this, x, r0](const Tensor<T>& g) {
      if (!wants_grad(x)) return;
      Tensor<T> gx(val(x).shape);
      detail::axpy(gx.row_ptr(r0), T(1), g.data.data(), g.numel());
      accumulate_raw(x, gx);
    });
  }

  Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_cols of nothing");
    const Index m = val(xs[0]).shape[0];
    Index total = 0;
    for (Var v : xs) {
      if (val(v).rank() != 2 || val(v).shape[0] != m) throw ShapeError("concat_cols row mismatch");
      total += val(v).shape[1];
    }
    Tensor<T> out({m, total});
    Index off = 0;
    for (Var v : xs) {
      const auto& tv = val(v);
      for (Index i = 0; i < m; ++i)
        std::copy(tv.row_ptr(i), tv.row_ptr(i) + tv.shape[1], out.row_ptr(i) + off);
      off += tv.shape[1];
    }
    return record(std::move(out), xs, [this, xs](const Tensor<T>& g) {
      Index off2 = 0;
      for (Var v : xs) {
        const Index w = val(v).shape[1];
        if (wants_grad(v)) {
          Tensor<T> gv({g.shape[0], w});
          for (Index i = 0; i < g.shape[0]; ++i)
            std::copy(g.row_ptr(i) + off2, g.row_ptr(i) + off2 + w, gv.row_ptr(i));
          accumulate_raw(v, gv);
        }
        off2 += w;
      }
    });
  }

  Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_rows of nothing");
    const Index n = val(xs[0]).shape[1];
    Index total = 0;
    for (Var v : xs) {
      if (val(v).rank() != 2 || val(v).shape[1] != n) throw ShapeError("concat_rows column mismatch");
      total += val(v).shape[0];
    }
    Tensor<T> out({total, n});
    Index off = 0;
    for (Var v : xs) {
      const auto& tv = val(v);
      std::copy(tv.data.begin(), tv.data.end(), out.row_ptr(off));
      off += tv.shape[0];
    }
    return record(std::move(out), xs, [this, xs](const Tensor<T>& g) {
      Index off2 = 0;
      for (Var v : xs) {
        const Index r = val(v).shape[0];
        if (wants_grad(v)) {
          Tensor<T> gv({r, g.shape[1]});
          std::copy(g.row_ptr(off2), g.row_ptr(off2) + gv.numel(), gv.data.data());
          accumulate_raw(v, gv);
        }
        off2 += r;
      }
    });
  }

  Var concat_scalars(const std::vector<Var>& xs) {
    if (xs.empty()) throw ShapeError("concat_scalars of nothing");
    Tensor<T> out({static_cast<Index>(xs.size())});
    for (std::size_t i = 0; i < xs.size(); ++i) out[static_cast<Index>(i)] = val(xs[i]).scalar();
    return record(std::move(out), xs, [this, xs](const Tensor<T>& g) {
      for (std::size_t i = 0; i < xs.size(); ++i) {
        if (!wants_grad(xs[i])) continue;
        Tensor<T> gv({1});
        gv[0] = g[static_cast<Index>(i)];
        accumulate_raw(xs[i], gv);
      }
    });
  }

  Var pick(Var vec, Index i) {
    const auto& tv = val(vec);
    if (tv.rank() != 1) throw ShapeError("pick expects a vector");
    if (i < 0 || i >= tv.shape[0]) throw IndexError("pick index out of range");
    Tensor<T> out({1});
    out[0] = tv[i];
    return record(std::move(out), {vec}, [this, vec, i](const Tensor<T>& g) {
      if (!wants_grad(vec)) return;
      Tensor<T> gv(val(vec).shape);
      gv[i] = g[0];
      accumulate_raw(vec, gv);
    });
  }

  Var reshape(Var x, std::vector<Index> shape) {
    Tensor<T> out = val(x).reshaped(shape);
    return record(std::move(out), {x}, [this, x](const Tensor<T>& g) {
      if (!wants_grad(x)) return;
      accumulate_raw(x, g.reshaped(val(x).shape));
    });
  }

  // ---- backward ----

  /// Reverse pass from a scalar loss. Returns gradients of the trainable
  /// parameters reachable from the loss; frozen parameters are absent.
  GradMap<T> backward(Var loss) {
    if (!grad_enabled_) throw ConfigError("backward on a gradient-disabled tape");
    auto& ln = node(loss);
    if (ln.value.numel() != 1)
      throw ShapeError("backward needs a scalar loss, got " + shape_str(ln.value.shape));
    ln.grad = Tensor<T>::full(ln.value.shape, T(1));
    for (std::size_t i = nodes_.size(); i-- > 0;) {
      Node& nd = nodes_[i];
      if (nd.back && nd.grad.numel() > 0) nd.back(nd.grad);
    }
    GradMap<T> grads;
    for (Node& nd : nodes_) {
      if (nd.param && nd.param->trainable && nd.grad.numel() > 0) {
        auto it = grads.find(nd.param->name);
        if (it == grads.end()) {
          grads.emplace(nd.param->name, std::move(nd.grad));
        } else {
          for (Index j = 0; j < it->second.numel(); ++j) it->second[j] += nd.grad[j];
        }
      }
    }
    return grads;
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool needs_grad = false;
    std::function<void(const Tensor<T>&)> back;
    Parameter<T>* param = nullptr;
  };

  Node& node(Var v) { return nodes_[static_cast<std::size_t>(v)]; }

  bool wants_grad(Var v) { return node(v).needs_grad; }

  Var next_id() const { return static_cast<Var>(nodes_.size()); }

  Var push(Tensor<T> value, bool needs, Parameter<T>* p) {
    Node nd;
    nd.value = std::move(value);
    nd.needs_grad = needs;
    nd.param = p;
    nodes_.push_back(std::move(nd));
    return static_cast<Var>(nodes_.size() - 1);
  }

  template <typename F>
  Var record(Tensor<T> value, const std::vector<Var>& inputs, F&& back_fn) {
    bool needs = false;
    if (grad_enabled_) {
      for (Var v : inputs)
        if (node(v).needs_grad) {
          needs = true;
          break;
        }
    }
    Var id = push(std::move(value), needs, nullptr);
    if (needs) node(id).back = std::forward<F>(back_fn);
    return id;
  }

  void accumulate(Var v, const Tensor<T>& g) {
    if (wants_grad(v)) accumulate_raw(v, g);
  }

  void accumulate_raw(Var v, const Tensor<T>& g) {
    Node& nd = node(v);
    if (nd.grad.numel() == 0) {
      nd.grad = g;
    } else {
      for (Index i = 0; i < g.numel(); ++i) nd.grad[i] += g[i];
    }
  }

  bool grad_enabled_;
  std::deque<Node> nodes_;  // deque: val() references stay valid as ops append
  std::unordered_map<const void*, Var> param_cache_;
};

// ---- optimizer ----

// Plain SGD over a gradient map. clip_norm <= 0 disables clipping; otherwise
// gradients are rescaled so their global L2 norm is at most clip_norm.
template <typename T>
inline void sgd_step(ParamSet<T>& params, GradMap<T>& grads, T lr, T clip_norm = T(0)) {
  if (clip_norm > 0) {
    double sq = 0;
    for (const auto& [name, g] : grads)
      for (T v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
    double norm = std::sqrt(sq);
    if (norm > static_cast<double>(clip_norm)) {
      T s = static_cast<T>(static_cast<double>(clip_norm) / norm);
      for (auto& [name, g] : grads)
        for (T& v : g.data) v *= s;
    }
  }
  for (auto& [name, g] : grads) {
    Parameter<T>* p = params.find(name);
    if (!p) throw ConfigError("gradient for unknown parameter: " + name);
    if (!p->trainable) throw ConfigError("gradient reported for frozen parameter: " + name);
    for (Index i = 0; i < g.numel(); ++i) p->tensor[i] -= lr * g[i];
  }
}

}  // namespace idpt
