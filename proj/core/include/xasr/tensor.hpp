// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "xasr/error.hpp"

namespace xasr {

/// Dense row-major tensor. Float32 is used for training, float64 for the
/// finite-difference gradient checks.
template <typename T>
class TensorT {
 public:
  using Scalar = T;

  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), values_(checked_numel(shape_), T(0)) {}

  TensorT(std::vector<std::size_t> shape, std::vector<T> values)
      : shape_(std::move(shape)), values_(std::move(values)) {
    if (checked_numel(shape_) != values_.size()) {
      throw DimensionError("tensor shape/value count mismatch: shape " +
                           shape_string() + " vs " + std::to_string(values_.size()) +
                           " values");
    }
  }

  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  static TensorT full(std::vector<std::size_t> shape, T v) {
    TensorT t(std::move(shape));
    for (auto& x : t.values_) x = v;
    return t;
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  T* data() { return values_.data(); }
  const T* data() const { return values_.data(); }
  std::vector<T>& values() { return values_; }
  const std::vector<T>& values() const { return values_; }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  /// 2-D accessors; most of the codebase works with matrices.
  T& at(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
  const T& at(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }

  std::size_t rows() const { return shape_.at(0); }
  std::size_t cols() const { return shape_.at(1); }

  /// Reshape to a new shape with the same element count; data is shared
  /// layout-wise (row-major), so this is a metadata change only.
  TensorT reshaped(std::vector<std::size_t> shape) const {
    TensorT out(std::move(shape), values_);
    return out;
  }

  bool all_finite() const {
    for (const T& v : values_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  void require_finite(const std::string& what) const {
    if (!all_finite()) throw DataError(what + ": non-finite values");
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  std::string shape_string() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) os << "x";
      os << shape_[i];
    }
    os << "]";
    return os.str();
  }

  template <typename U>
  TensorT<U> cast() const {
    std::vector<U> v(values_.size());
    for (std::size_t i = 0; i < values_.size(); ++i) v[i] = static_cast<U>(values_[i]);
    return TensorT<U>(shape_, std::move(v));
  }

 private:
  static std::size_t checked_numel(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimensions must be positive");
      n *= d;
    }
    return shape.empty() ? 0 : n;
  }

  std::vector<std::size_t> shape_;
  std::vector<T> values_;
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

/// 2-D matrix product: [m x k] . [k x n] -> [m x n]. ikj loop order.
template <typename T>
void matmul_into(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& out,
                 bool accumulate = false) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree, " + a.shape_string() +
                         " . " + b.shape_string());
  }
  if (!accumulate) std::fill(out.values().begin(), out.values().end(), T(0));
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const T av = pa[i * k + kk];
      if (av == T(0)) continue;
      const T* brow = pb + kk * n;
      T* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  TensorT<T> out({a.rows(), b.cols()});
  matmul_into(a, b, out);
  return out;
}

/// a . b^T without materializing the transpose: [m x k] . [n x k]^T -> [m x n].
template <typename T>
void matmul_bt_into(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& out,
                    bool accumulate = false) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) throw DimensionError("matmul_bt: inner dimensions disagree");
  if (!accumulate) std::fill(out.values().begin(), out.values().end(), T(0));
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a.data() + i * k;
    T* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b.data() + j * k;
      T acc = T(0);
      for (std::size_t kk = 0; kk < k; ++kk) acc += arow[kk] * brow[kk];
      orow[j] += acc;
    }
  }
}

/// a^T . b: [k x m]^T . [k x n] -> [m x n].
template <typename T>
void matmul_at_into(const TensorT<T>& a, const TensorT<T>& b, TensorT<T>& out,
                    bool accumulate = false) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  if (b.rows() != k) throw DimensionError("matmul_at: inner dimensions disagree");
  if (!accumulate) std::fill(out.values().begin(), out.values().end(), T(0));
  for (std::size_t kk = 0; kk < k; ++kk) {
    const T* arow = a.data() + kk * m;
    const T* brow = b.data() + kk * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T(0)) continue;
      T* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

}  // namespace xasr
