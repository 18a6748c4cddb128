#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "idpt/autodiff.hpp"

namespace idpt {

// Gradient checking runs in double precision: central differences at the
// steps used here lose too many bits in f32.
using CheckTape = Tape<double>;
using CheckFn = std::function<typename CheckTape::Var(CheckTape&)>;

inline double eval_loss(const CheckFn& f) {
  CheckTape tape(false);
  return tape.val(f(tape)).scalar();
}

/// Compares the analytic gradient of `f` w.r.t. `p` against central finite
/// differences (f(p+step) - f(p-step)) / (2 step), element-wise. Returns
/// max |analytic - numeric| / max(|numeric|, 1e-8).
inline double grad_check(const CheckFn& f, Parameter<double>& p, double step) {
  CheckTape tape;
  auto grads = tape.backward(f(tape));
  Tensor<double> analytic;
  auto it = grads.find(p.name);
  if (it != grads.end())
    analytic = it->second;
  else
    analytic = Tensor<double>(p.tensor.shape);  // disconnected: zero gradient

  double max_rel = 0;
  for (Index i = 0; i < p.tensor.numel(); ++i) {
    const double orig = p.tensor[i];
    p.tensor[i] = orig + step;
    const double lp = eval_loss(f);
    p.tensor[i] = orig - step;
    const double lm = eval_loss(f);
    p.tensor[i] = orig;
    const double numeric = (lp - lm) / (2.0 * step);
    const double rel = std::abs(analytic[i] - numeric) / std::max(std::abs(numeric), 1e-8);
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

/// Worst-case grad_check over every trainable parameter in the set.
inline double grad_check_all(const ParamSet<double>& params, const CheckFn& f, double step,
                             std::string* worst_name = nullptr) {
  double max_rel = 0;
  for (Parameter<double>* p : params.ordered()) {
    if (!p->trainable) continue;
    double rel = grad_check(f, *p, step);
    if (rel > max_rel) {
      max_rel = rel;
      if (worst_name) *worst_name = p->name;
    }
  }
  return max_rel;
}

}  // namespace idpt
