// Copyright (c) 2026 The dpgrad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "dpgrad/errors.hpp"
#include "dpgrad/rng.hpp"

namespace dpgrad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major tensor. Element count always equals the product of the
/// shape extents (a rank-0 tensor holds exactly one element).
///
/// Tensors are value types; treat them as immutable once shared across
/// threads. All public ops produce new tensors.
template <typename T>
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, T(0)) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), T(0)) {}

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T value) {
    Tensor t(std::move(shape));
    for (T& x : t.data_) x = value;
    return t;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t numel() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_[axis]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i) { return data_[i]; }
  const T& operator()(std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  T& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  T& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }
  const T& operator()(std::size_t i, std::size_t j, std::size_t k, std::size_t l) const {
    return data_[((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (std::size_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(static_cast<double>(t[i]))) return false;
  }
  return true;
}

template <typename U, typename T>
Tensor<U> tensor_cast(const Tensor<T>& t) {
  Tensor<U> out(t.shape());
  for (std::size_t i = 0; i < t.numel(); ++i) out[i] = static_cast<U>(t[i]);
  return out;
}

namespace detail {

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

}  // namespace detail

// ---- elementwise ----

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] - b[i];
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * b[i];
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  Tensor<T> out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
  return out;
}

// ---- reductions (fixed left-to-right order, double accumulator) ----

template <typename T>
T sum(const Tensor<T>& t) {
  double acc = 0.0;
  for (std::size_t i = 0; i < t.numel(); ++i) acc += static_cast<double>(t[i]);
  return static_cast<T>(acc);
}

template <typename T>
T mean(const Tensor<T>& t) {
  if (t.numel() == 0) throw ParameterError("mean of empty tensor");
  return static_cast<T>(static_cast<double>(sum(t)) / static_cast<double>(t.numel()));
}

template <typename T>
double l2_norm(const Tensor<T>& t) {
  double acc = 0.0;
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double x = static_cast<double>(t[i]);
    acc += x * x;
  }
  return std::sqrt(acc);
}

/// Collapse every dim between the first and the last:
/// [n, m1, ..., mk, d] -> [n, d], summing over the middle. Rank >= 2.
template <typename T>
Tensor<T> sum_middle(const Tensor<T>& t) {
  if (t.rank() < 2) {
    throw DimensionError("sum_middle requires rank >= 2, got shape " + shape_str(t.shape()));
  }
  const std::size_t n = t.extent(0);
  const std::size_t d = t.extent(t.rank() - 1);
  const std::size_t mid = t.numel() / (n * d == 0 ? 1 : n * d);
  Tensor<T> out({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::size_t m = 0; m < mid; ++m) {
        acc += static_cast<double>(t[(i * mid + m) * d + j]);
      }
      out(i, j) = static_cast<T>(acc);
    }
  }
  return out;
}

// ---- structure ----

template <typename T>
Tensor<T> reshape(const Tensor<T>& t, Shape new_shape) {
  if (shape_numel(new_shape) != t.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(t.shape()) + " as " +
                         shape_str(new_shape) + " (element counts differ)");
  }
  Tensor<T> out(std::move(new_shape));
  for (std::size_t i = 0; i < t.numel(); ++i) out[i] = t[i];
  return out;
}

/// Drop the leading axis at index i: [n, ...] -> [...].
template <typename T>
Tensor<T> slice_leading(const Tensor<T>& t, std::size_t i) {
  if (t.rank() == 0) throw DimensionError("slice_leading on rank-0 tensor");
  if (i >= t.extent(0)) {
    throw ParameterError("slice_leading index " + std::to_string(i) + " out of range for shape " +
                         shape_str(t.shape()));
  }
  Shape tail(t.shape().begin() + 1, t.shape().end());
  const std::size_t stride = shape_numel(tail);
  Tensor<T> out(tail);
  for (std::size_t j = 0; j < stride; ++j) out[j] = t[i * stride + j];
  return out;
}

/// Gather rows along the leading axis: out.extent(0) == indices.size().
template <typename T>
Tensor<T> gather_leading(const Tensor<T>& t, const std::vector<std::size_t>& indices) {
  if (t.rank() == 0) throw DimensionError("gather_leading on rank-0 tensor");
  Shape out_shape = t.shape();
  out_shape[0] = indices.size();
  const std::size_t stride = t.numel() / (t.extent(0) == 0 ? 1 : t.extent(0));
  Tensor<T> out(out_shape);
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t i = indices[r];
    if (i >= t.extent(0)) {
      throw ParameterError("gather index " + std::to_string(i) + " out of range for shape " +
                           shape_str(t.shape()));
    }
    for (std::size_t j = 0; j < stride; ++j) out[r * stride + j] = t[i * stride + j];
  }
  return out;
}

/// Swap the last two axes; rank >= 2.
template <typename T>
Tensor<T> transpose_last_two(const Tensor<T>& t) {
  if (t.rank() < 2) {
    throw DimensionError("transpose_last_two requires rank >= 2, got " + shape_str(t.shape()));
  }
  Shape out_shape = t.shape();
  const std::size_t a = out_shape[out_shape.size() - 2];
  const std::size_t b = out_shape[out_shape.size() - 1];
  std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
  const std::size_t lead = t.numel() / (a * b == 0 ? 1 : a * b);
  Tensor<T> out(out_shape);
  for (std::size_t l = 0; l < lead; ++l) {
    for (std::size_t i = 0; i < a; ++i) {
      for (std::size_t j = 0; j < b; ++j) {
        out[(l * b + j) * a + i] = t[(l * a + i) * b + j];
      }
    }
  }
  return out;
}

// ---- contractions ----

/// Standard matrix product, [m x k] . [k x n] -> [m x n].
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T av = a(i, p);
      for (std::size_t j = 0; j < n; ++j) {
        out(i, j) += av * b(p, j);
      }
    }
  }
  return out;
}

/// Per-batch-element sum of outer products over the middle dims:
/// b_grads [n, m..., i], acts [n, m..., j] -> out[n, i, j] with
/// out[n,i,j] = sum_m b_grads[n,m,i] * acts[n,m,j].
template <typename T>
Tensor<T> batched_outer(const Tensor<T>& b_grads, const Tensor<T>& acts) {
  if (b_grads.rank() < 2 || acts.rank() < 2) {
    throw DimensionError("batched_outer requires rank >= 2, got " + shape_str(b_grads.shape()) +
                         " and " + shape_str(acts.shape()));
  }
  if (b_grads.rank() != acts.rank() || b_grads.extent(0) != acts.extent(0)) {
    throw DimensionError("batched_outer: leading/middle dims disagree between " +
                         shape_str(b_grads.shape()) + " and " + shape_str(acts.shape()));
  }
  for (std::size_t axis = 1; axis + 1 < b_grads.rank(); ++axis) {
    if (b_grads.extent(axis) != acts.extent(axis)) {
      throw DimensionError("batched_outer: leading/middle dims disagree between " +
                           shape_str(b_grads.shape()) + " and " + shape_str(acts.shape()));
    }
  }
  const std::size_t n = b_grads.extent(0);
  const std::size_t di = b_grads.extent(b_grads.rank() - 1);
  const std::size_t dj = acts.extent(acts.rank() - 1);
  const std::size_t mid = (n * di == 0) ? 0 : b_grads.numel() / (n * di);
  Tensor<T> out({n, di, dj});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t m = 0; m < mid; ++m) {
      const T* brow = b_grads.data() + (s * mid + m) * di;
      const T* arow = acts.data() + (s * mid + m) * dj;
      T* orow = out.data() + s * di * dj;
      for (std::size_t i = 0; i < di; ++i) {
        const T bv = brow[i];
        for (std::size_t j = 0; j < dj; ++j) {
          orow[i * dj + j] += bv * arow[j];
        }
      }
    }
  }
  return out;
}

// ---- sampling ----

/// i.i.d. N(0, std^2) samples. std == 0 yields exact zeros.
template <typename T>
Tensor<T> gaussian(Shape shape, double std, RngStream& rng) {
  if (std < 0.0) {
    throw ParameterError("gaussian: std must be non-negative, got " + std::to_string(std));
  }
  Tensor<T> out(std::move(shape));
  if (std == 0.0) return out;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = static_cast<T>(rng.normal() * std);
  }
  return out;
}

/// i.i.d. U(lo, hi) samples.
template <typename T>
Tensor<T> uniform(Shape shape, double lo, double hi, RngStream& rng) {
  Tensor<T> out(std::move(shape));
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = static_cast<T>(lo + (hi - lo) * rng.uniform());
  }
  return out;
}

}  // namespace dpgrad
