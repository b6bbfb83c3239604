#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mcaforge/error.hpp"

namespace mcaforge {

// Dense row-major float32 tensor. Values are immutable by convention once an
// operation has produced them; all operations below are pure functions.
// Reductions (matmul inner products, softmax denominators, moments)
// accumulate in double and round to float only at the output, in a fixed
// left-to-right order, so identical inputs give bit-identical outputs.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), 0.0f) {}

  Tensor(std::vector<std::size_t> shape, std::vector<float> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape (" + shape_string() + ")");
    }
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<std::size_t> shape, float value) {
    Tensor t(std::move(shape));
    for (float& x : t.data_) x = value;
    return t;
  }

  // 2-D convenience constructor from nested initializer data.
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> data) {
    return Tensor({rows, cols}, std::move(data));
  }

  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  const std::vector<std::size_t>& shape() const { return shape_; }

  std::size_t rows() const { return rank() == 2 ? shape_[0] : throw_not_2d(); }
  std::size_t cols() const { return rank() == 2 ? shape_[1] : throw_not_2d(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<const float> values() const { return data_; }

  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  bool all_finite() const {
    for (float x : data_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  std::string shape_string() const {
    std::string s;
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s.empty() ? "scalar" : s;
  }

  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
  }

 private:
  std::size_t throw_not_2d() const {
    throw ShapeError("expected a 2-D tensor, got shape (" + shape_string() + ")");
  }

  std::vector<std::size_t> shape_;
  std::vector<float> data_;
};

// Bit-level equality (exact float bits, not tolerance-based).
inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  return a.numel() == 0 ||
         std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  }
  return m;
}

namespace detail {

inline void require_2d(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected 2-D tensor, got (" + t.shape_string() + ")");
  }
}

}  // namespace detail

// C = A(m,k) * B(k,n). Inner products accumulate in double, left to right
// over k; blocking would reorder the sums, so there is none.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ, (" + a.shape_string() + ") x (" +
                     b.shape_string() + ")");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      const float* brow = b.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) acc[j] += av * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) c.at(i, j) = static_cast<float>(acc[j]);
  }
  return c;
}

// Row-wise softmax with per-row max subtraction; exp/sum in double.
inline Tensor softmax_rows(const Tensor& x) {
  detail::require_2d(x, "softmax_rows");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor y({m, n});
  std::vector<double> e(n);
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(x.at(i, j)));
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = std::exp(static_cast<double>(x.at(i, j)) - mx);
      denom += e[j];
    }
    for (std::size_t j = 0; j < n; ++j) y.at(i, j) = static_cast<float>(e[j] / denom);
  }
  return y;
}

// Per-row standardization followed by elementwise gain and bias.
// Moments are population moments accumulated in double.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                         double eps = 1e-5) {
  detail::require_2d(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (gain.numel() != n || bias.numel() != n) {
    throw ShapeError("layer_norm: gain/bias length must equal row width " + std::to_string(n));
  }
  if (!(eps > 0.0)) throw ConfigError("layer_norm: eps must be positive");
  Tensor y({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += x.at(i, j);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = x.at(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      const double xhat = (x.at(i, j) - mean) * inv;
      y.at(i, j) = static_cast<float>(xhat * gain[j] + bias[j]);
    }
  }
  return y;
}

// Rows of a followed by rows of b. Either operand may have zero rows.
inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "concat_rows");
  detail::require_2d(b, "concat_rows");
  if (a.cols() != b.cols()) {
    throw ShapeError("concat_rows: trailing dimensions differ, " + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.cols()));
  }
  Tensor c({a.rows() + b.rows(), a.cols()});
  std::memcpy(c.data(), a.data(), a.numel() * sizeof(float));
  std::memcpy(c.data() + a.numel(), b.data(), b.numel() * sizeof(float));
  return c;
}

// Half-open row range [begin, end).
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_2d(x, "slice_rows");
  if (begin > end || end > x.rows()) {
    throw ShapeError("slice_rows: invalid range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") for " + std::to_string(x.rows()) + " rows");
  }
  Tensor y({end - begin, x.cols()});
  std::memcpy(y.data(), x.data() + begin * x.cols(), y.numel() * sizeof(float));
  return y;
}

// Half-open column range [begin, end).
inline Tensor slice_cols(const Tensor& x, std::size_t begin, std::size_t end) {
  detail::require_2d(x, "slice_cols");
  if (begin > end || end > x.cols()) {
    throw ShapeError("slice_cols: invalid range [" + std::to_string(begin) + ", " +
                     std::to_string(end) + ") for " + std::to_string(x.cols()) + " columns");
  }
  Tensor y({x.rows(), end - begin});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = begin; j < end; ++j) y.at(i, j - begin) = x.at(i, j);
  return y;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no operands");
  std::size_t total = 0;
  for (const Tensor& p : parts) {
    detail::require_2d(p, "concat_cols");
    if (p.rows() != parts[0].rows()) throw ShapeError("concat_cols: row counts differ");
    total += p.cols();
  }
  Tensor y({parts[0].rows(), total});
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) y.at(i, off + j) = p.at(i, j);
    off += p.cols();
  }
  return y;
}

inline Tensor transpose(const Tensor& x) {
  detail::require_2d(x, "transpose");
  Tensor y({x.cols(), x.rows()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) y.at(j, i) = x.at(i, j);
  return y;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("add: shape mismatch");
  Tensor c = a;
  for (std::size_t i = 0; i < c.numel(); ++i)
    c[i] = static_cast<float>(static_cast<double>(a[i]) + static_cast<double>(b[i]));
  return c;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw ShapeError("sub: shape mismatch");
  Tensor c = a;
  for (std::size_t i = 0; i < c.numel(); ++i)
    c[i] = static_cast<float>(static_cast<double>(a[i]) - static_cast<double>(b[i]));
  return c;
}

inline Tensor scale(const Tensor& a, double s) {
  Tensor c = a;
  for (std::size_t i = 0; i < c.numel(); ++i)
    c[i] = static_cast<float>(static_cast<double>(a[i]) * s);
  return c;
}

}  // namespace mcaforge
