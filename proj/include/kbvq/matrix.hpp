// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "kbvq/error.hpp"

namespace kbvq {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;

  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, ErrorKind::kShape,
            "matrix data length " + std::to_string(data_.size()) +
                " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }

  Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ ? rows.begin()->size() : 0;
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
      require(r.size() == cols_, ErrorKind::kShape, "ragged matrix literal");
      data_.insert(data_.end(), r.begin(), r.end());
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  static Matrix diagonal(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }

  std::vector<double> column(std::size_t c) const {
    std::vector<double> out(rows_);
    for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
    return out;
  }

  bool same_shape(const Matrix& o) const noexcept {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::string shape_str(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

/// a * b
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.rows(), ErrorKind::kShape,
          "matmul " + shape_str(a) + " * " + shape_str(b));
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

/// aᵀ * b
inline Matrix matmul_tn(const Matrix& a, const Matrix& b) {
  require(a.rows() == b.rows(), ErrorKind::kShape,
          "matmul_tn " + shape_str(a) + "ᵀ * " + shape_str(b));
  Matrix c(a.cols(), b.cols());
  for (std::size_t k = 0; k < a.rows(); ++k) {
    auto arow = a.row(k);
    auto brow = b.row(k);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double aki = arow[i];
      if (aki == 0.0) continue;
      auto crow = c.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) crow[j] += aki * brow[j];
    }
  }
  return c;
}

/// a * bᵀ. Accumulates over k in order for every entry, like a dot product,
/// but through the transposed operand so the inner loop runs along rows.
inline Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  require(a.cols() == b.cols(), ErrorKind::kShape,
          "matmul_nt " + shape_str(a) + " * " + shape_str(b) + "ᵀ");
  const Matrix bt = transpose(b);
  Matrix c(a.rows(), b.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto crow = c.row(i);
    auto arow = a.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = arow[k];
      auto brow = bt.row(k);
      for (std::size_t j = 0; j < crow.size(); ++j) crow[j] += aik * brow[j];
    }
  }
  return c;
}

inline Matrix operator+(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), ErrorKind::kShape, "add " + shape_str(a) + " + " + shape_str(b));
  Matrix c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] += bd[i];
  return c;
}

inline Matrix operator-(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), ErrorKind::kShape, "sub " + shape_str(a) + " - " + shape_str(b));
  Matrix c = a;
  auto cd = c.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < cd.size(); ++i) cd[i] -= bd[i];
  return c;
}

inline Matrix operator*(double s, const Matrix& a) {
  Matrix c = a;
  for (double& v : c.data()) v *= s;
  return c;
}

inline double frobenius_sq(const Matrix& a) {
  double s = 0.0;
  for (double v : a.data()) s += v * v;
  return s;
}

inline double frobenius(const Matrix& a) { return std::sqrt(frobenius_sq(a)); }

inline double max_abs(const Matrix& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), ErrorKind::kShape, "diff " + shape_str(a) + " vs " + shape_str(b));
  double m = 0.0;
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < ad.size(); ++i) m = std::max(m, std::abs(ad[i] - bd[i]));
  return m;
}

inline bool all_finite(const Matrix& a) {
  return std::all_of(a.data().begin(), a.data().end(),
                     [](double v) { return std::isfinite(v); });
}

/// Scales column j of `a` by d[j].
inline Matrix scale_cols(const Matrix& a, std::span<const double> d) {
  require(a.cols() == d.size(), ErrorKind::kShape, "scale_cols length mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.rows(); ++i) {
    auto r = c.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] *= d[j];
  }
  return c;
}

/// Scales row i of `a` by d[i].
inline Matrix scale_rows(const Matrix& a, std::span<const double> d) {
  require(a.rows() == d.size(), ErrorKind::kShape, "scale_rows length mismatch");
  Matrix c = a;
  for (std::size_t i = 0; i < c.rows(); ++i)
    for (double& v : c.row(i)) v *= d[i];
  return c;
}

/// Stacks matrices with equal column count on top of each other.
inline Matrix vstack(std::span<const Matrix> parts) {
  std::size_t rows = 0;
  const std::size_t cols = parts.empty() ? 0 : parts.front().cols();
  for (const auto& p : parts) {
    require(p.cols() == cols, ErrorKind::kShape, "vstack column mismatch");
    rows += p.rows();
  }
  std::vector<double> data;
  data.reserve(rows * cols);
  for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
  return Matrix(rows, cols, std::move(data));
}

/// Rows [first, first + count).
inline Matrix row_block(const Matrix& a, std::size_t first, std::size_t count) {
  require(first + count <= a.rows(), ErrorKind::kShape, "row_block out of range");
  std::vector<double> data(a.data().begin() + static_cast<std::ptrdiff_t>(first * a.cols()),
                           a.data().begin() + static_cast<std::ptrdiff_t>((first + count) * a.cols()));
  return Matrix(count, a.cols(), std::move(data));
}

/// Columns [first, first + count).
inline Matrix col_block(const Matrix& a, std::size_t first, std::size_t count) {
  require(first + count <= a.cols(), ErrorKind::kShape, "col_block out of range");
  Matrix c(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < count; ++j) c(i, j) = a(i, first + j);
  return c;
}

inline double trace(const Matrix& a) {
  require(a.rows() == a.cols(), ErrorKind::kShape, "trace of non-square " + shape_str(a));
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) s += a(i, i);
  return s;
}

}  // namespace kbvq
