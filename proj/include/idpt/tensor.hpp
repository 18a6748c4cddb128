#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "idpt/error.hpp"

namespace idpt {

using Index = std::int64_t;

inline std::string shape_str(const std::vector<Index>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// Dense row-major tensor. Rank is 1 or 2 everywhere in this project; the
// shape stays a vector so reshape is just an element-count check.
template <typename T>
struct Tensor {
  std::vector<Index> shape;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<Index> s) : shape(std::move(s)) {
    for (Index d : shape) {
      if (d <= 0) throw ShapeError("tensor dimension must be positive, got shape " + shape_str(shape));
    }
    data.assign(static_cast<std::size_t>(numel_of(shape)), T(0));
  }

  static Tensor zeros(std::vector<Index> s) { return Tensor(std::move(s)); }

  static Tensor full(std::vector<Index> s, T v) {
    Tensor t(std::move(s));
    for (auto& x : t.data) x = v;
    return t;
  }

  static Tensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    Index m = static_cast<Index>(rows.size());
    Index n = m ? static_cast<Index>(rows.begin()->size()) : 0;
    Tensor t({m, n});
    Index i = 0;
    for (const auto& row : rows) {
      if (static_cast<Index>(row.size()) != n) throw ShapeError("ragged initializer");
      Index j = 0;
      for (T v : row) t.at(i, j++) = v;
      ++i;
    }
    return t;
  }

  static Tensor from_vec(std::vector<T> v) {
    Tensor t;
    t.shape = {static_cast<Index>(v.size())};
    t.data = std::move(v);
    if (t.data.empty()) throw ShapeError("empty vector tensor");
    return t;
  }

  static Index numel_of(const std::vector<Index>& s) {
    Index n = 1;
    for (Index d : s) n *= d;
    return n;
  }

  Index numel() const { return static_cast<Index>(data.size()); }
  Index rank() const { return static_cast<Index>(shape.size()); }
  Index rows() const { return shape.empty() ? 0 : shape[0]; }
  Index cols() const { return shape.size() < 2 ? 0 : shape[1]; }

  T& at(Index i, Index j) { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
  T at(Index i, Index j) const { return data[static_cast<std::size_t>(i * shape[1] + j)]; }
  T& operator[](Index i) { return data[static_cast<std::size_t>(i)]; }
  T operator[](Index i) const { return data[static_cast<std::size_t>(i)]; }

  T* row_ptr(Index i) { return data.data() + i * shape[1]; }
  const T* row_ptr(Index i) const { return data.data() + i * shape[1]; }

  bool is_scalar() const { return numel() == 1; }
  T scalar() const {
    if (!is_scalar()) throw ShapeError("expected scalar tensor, got " + shape_str(shape));
    return data[0];
  }

  // Same buffer, new shape; element count must match.
  Tensor reshaped(std::vector<Index> s) const {
    if (numel_of(s) != numel())
      throw ShapeError("reshape " + shape_str(shape) + " -> " + shape_str(s) + " changes element count");
    Tensor t;
    t.shape = std::move(s);
    t.data = data;
    return t;
  }

  bool has_nan() const {
    for (T v : data)
      if (std::isnan(static_cast<double>(v))) return true;
    return false;
  }
};

template <typename T>
bool same_shape(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape == b.shape;
}

}  // namespace idpt
