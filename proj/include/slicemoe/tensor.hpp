// Copyright 2026 the slicemoe authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "slicemoe/common.hpp"
#include "slicemoe/rng.hpp"

namespace slicemoe {

/// Dense row-major tensor of rank 1-3. Values are immutable once an
/// operation has returned them; operations are pure functions, so tensors
/// can be shared freely across threads for reading.
///
/// Tests and training run on double; float is an opt-in for benchmarks.
template <typename T>
class TensorT {
 public:
  TensorT() = default;

  explicit TensorT(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), T{0}) {}

  TensorT(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (checked_size(shape_) != data_.size())
      throw DimError("tensor: shape/data size mismatch");
  }

  static TensorT full(std::vector<std::size_t> shape, T v) {
    TensorT t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& raw() { return data_; }
  const std::vector<T>& raw() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t i) { return data_[i]; }
  T& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  T& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  T at(std::size_t i) const { return data_[i]; }
  T at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Same data, new shape; element count must match.
  TensorT reshaped(std::vector<std::size_t> shape) const {
    if (checked_size(shape) != data_.size())
      throw DimError("reshape: element count mismatch");
    return TensorT(std::move(shape), data_);
  }

  bool all_finite() const {
    for (const T& x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i)
      os << (i ? "x" : "") << shape_[i];
    os << ']';
    return os.str();
  }

 private:
  static std::size_t checked_size(const std::vector<std::size_t>& shape) {
    if (shape.empty() || shape.size() > 3)
      throw DimError("tensor rank must be 1-3");
    std::size_t n = 1;
    for (std::size_t d : shape) {
      if (d == 0) throw DimError("tensor extent must be positive");
      n *= d;
    }
    return n;
  }

  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using Tensor = TensorT<double>;

template <typename T>
void ensure_finite(const TensorT<T>& t, const char* op) {
  if (!t.all_finite())
    throw NumericError(std::string(op) + ": non-finite value produced");
}

// ---------------------------------------------------------------------------
// Raw kernels. All reductions fold in a fixed order (contraction index
// ascending per output element) so alternate code paths that replay the same
// fold are bit-identical.

namespace detail {

/// c[m x n] = a[m x k] * b[k x n]; c is overwritten.
template <typename T>
void matmul_into(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                 std::size_t n) {
  FlopCounter::add(2ull * m * k * n);
  parallel_for(m, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] = T{0};
      const T* ai = a + i * k;
      for (std::size_t p = 0; p < k; ++p) {
        const T aip = ai[p];
        const T* bp = b + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  });
}

/// c[m x n] = a^T * b for a[r x m], b[r x n]; per-element fold over r
/// ascending. Used for weight gradients.
template <typename T>
void matmul_tn_into(const T* a, const T* b, T* c, std::size_t r, std::size_t m,
                    std::size_t n) {
  FlopCounter::add(2ull * r * m * n);
  for (std::size_t i = 0; i < m * n; ++i) c[i] = T{0};
  for (std::size_t p = 0; p < r; ++p) {
    const T* ap = a + p * m;
    const T* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T api = ap[i];
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

/// c[m x n] = a * b^T for a[m x k], b[n x k]; per-element fold over k
/// ascending. Used for input gradients.
template <typename T>
void matmul_nt_into(const T* a, const T* b, T* c, std::size_t m, std::size_t k,
                    std::size_t n) {
  FlopCounter::add(2ull * m * k * n);
  parallel_for(m, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const T* ai = a + i * k;
      T* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        const T* bj = b + j * k;
        T acc{0};
        for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
        ci[j] = acc;
      }
    }
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Public operations.

template <typename T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimError("matmul: expected rank-2 operands, got " + a.shape_str() +
                   " and " + b.shape_str());
  if (a.dim(1) != b.dim(0))
    throw DimError("matmul: inner dimensions disagree, " + a.shape_str() +
                   " vs " + b.shape_str());
  TensorT<T> c({a.dim(0), b.dim(1)});
  detail::matmul_into(a.data(), b.data(), c.data(), a.dim(0), a.dim(1),
                      b.dim(1));
  ensure_finite(c, "matmul");
  return c;
}

/// Batched product: a[B x m x k] times either a shared b[k x n] or a
/// per-batch b[B x k x n]. Slice i of the result equals matmul(a[i], b or
/// b[i]) bitwise.
template <typename T>
TensorT<T> batched_matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 3) throw DimError("batched_matmul: lhs must be rank 3");
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  std::size_t n = 0;
  bool shared = false;
  if (b.rank() == 2) {
    shared = true;
    n = b.dim(1);
    if (b.dim(0) != k) throw DimError("batched_matmul: inner dim mismatch");
  } else if (b.rank() == 3) {
    n = b.dim(2);
    if (b.dim(0) != batch || b.dim(1) != k)
      throw DimError("batched_matmul: rhs batch/inner dim mismatch");
  } else {
    throw DimError("batched_matmul: rhs must be rank 2 or 3");
  }
  TensorT<T> c({batch, m, n});
  for (std::size_t i = 0; i < batch; ++i) {
    const T* bi = shared ? b.data() : b.data() + i * k * n;
    detail::matmul_into(a.data() + i * m * k, bi, c.data() + i * m * n, m, k,
                        n);
  }
  ensure_finite(c, "batched_matmul");
  return c;
}

template <typename T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw DimError("add: shape mismatch");
  TensorT<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] += b[i];
  ensure_finite(c, "add");
  return c;
}

template <typename T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (!a.same_shape(b)) throw DimError("mul: shape mismatch");
  TensorT<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= b[i];
  ensure_finite(c, "mul");
  return c;
}

template <typename T>
TensorT<T> scale(const TensorT<T>& a, T s) {
  TensorT<T> c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c[i] *= s;
  ensure_finite(c, "scale");
  return c;
}

/// m[r x n] plus row vector v[n], broadcast over rows.
template <typename T>
TensorT<T> add_rowvec(const TensorT<T>& m, const TensorT<T>& v) {
  if (m.rank() != 2 || v.rank() != 1 || v.dim(0) != m.dim(1))
    throw DimError("add_rowvec: shape mismatch");
  TensorT<T> c = m;
  const std::size_t rows = m.dim(0), n = m.dim(1);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += v[j];
  ensure_finite(c, "add_rowvec");
  return c;
}

template <typename T>
TensorT<T> relu(const TensorT<T>& x) {
  TensorT<T> y = x;
  for (std::size_t i = 0; i < y.size(); ++i)
    y[i] = y[i] > T{0} ? y[i] : T{0};
  return y;
}

template <typename T>
T sum(const TensorT<T>& x) {
  T acc{0};
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
  return acc;
}

namespace detail {

/// In-place stable softmax of one contiguous row, temperature already
/// applied by the caller.
template <typename T>
void softmax_row(T* x, std::size_t n) {
  T mx = x[0];
  for (std::size_t i = 1; i < n; ++i)
    if (x[i] > mx) mx = x[i];
  T s{0};
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = std::exp(x[i] - mx);
    s += x[i];
  }
  const T inv = T{1} / s;
  for (std::size_t i = 0; i < n; ++i) x[i] *= inv;
}

}  // namespace detail

/// Stable softmax of a rank-1 tensor: softmax(logits / temperature) with
/// max subtraction. Output is nonnegative and sums to 1 within 1e-12.
template <typename T>
TensorT<T> softmax(const TensorT<T>& logits, T temperature = T{1}) {
  if (logits.rank() != 1) throw DimError("softmax: expected rank-1 logits");
  if (!(temperature > T{0}))
    throw ConfigError("softmax: temperature must be positive");
  TensorT<T> y = scale(logits, T{1} / temperature);
  detail::softmax_row(y.data(), y.size());
  ensure_finite(y, "softmax");
  return y;
}

/// Row-wise softmax of a rank-2 tensor; each row treated independently.
template <typename T>
TensorT<T> softmax_rows(const TensorT<T>& logits, T temperature = T{1}) {
  if (logits.rank() != 2)
    throw DimError("softmax_rows: expected rank-2 logits");
  if (!(temperature > T{0}))
    throw ConfigError("softmax_rows: temperature must be positive");
  TensorT<T> y = scale(logits, T{1} / temperature);
  const std::size_t rows = y.dim(0), n = y.dim(1);
  for (std::size_t i = 0; i < rows; ++i)
    detail::softmax_row(y.data() + i * n, n);
  ensure_finite(y, "softmax_rows");
  return y;
}

// ---------------------------------------------------------------------------
// Seeded random tensors.

template <typename T = double>
TensorT<T> gaussian(Rng& rng, std::vector<std::size_t> shape,
                    double stddev = 1.0) {
  TensorT<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<T>(rng.gaussian() * stddev);
  ensure_finite(t, "gaussian");
  return t;
}

template <typename T = double>
TensorT<T> uniform(Rng& rng, std::vector<std::size_t> shape, double lo,
                   double hi) {
  TensorT<T> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<T>(rng.uniform(lo, hi));
  ensure_finite(t, "uniform");
  return t;
}

template <typename T>
TensorT<float> to_f32(const TensorT<T>& t) {
  TensorT<float> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i)
    out[i] = static_cast<float>(t[i]);
  return out;
}

}  // namespace slicemoe
