// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

// Dense kernels: sample covariance, cyclic-Jacobi symmetric eigensolver,
// Gram-route SVD and the regularised square-root basis pair. Every routine
// is a pure function with a fixed operation order, so results are
// bit-reproducible for identical inputs.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "kbvq/error.hpp"
#include "kbvq/matrix.hpp"

namespace kbvq {

struct SymEig {
  std::vector<double> eigenvalues;  // descending
  Matrix eigenvectors;              // column j pairs with eigenvalues[j]
};

struct Svd {
  Matrix U;                   // rows x r, orthonormal columns
  std::vector<double> sigma;  // r values, descending, non-negative
  Matrix Vt;                  // r x cols, orthonormal rows
};

struct BasisPair {
  Matrix basis;    // Q diag(sqrt(max(λ, eps)))
  Matrix inverse;  // diag(1/sqrt(max(λ, eps))) Qᵀ
};

/// Sample second-moment estimate (1/(B-1)) XᵀX over the rows of X.
inline Matrix covariance(const Matrix& x) {
  require(x.rows() >= 2, ErrorKind::kDegenerate,
          "covariance needs at least 2 samples, got " + std::to_string(x.rows()));
  const std::size_t n = x.cols();
  Matrix c(n, n);
  for (std::size_t s = 0; s < x.rows(); ++s) {
    auto r = x.row(s);
    for (std::size_t i = 0; i < n; ++i) {
      const double ri = r[i];
      if (ri == 0.0) continue;
      auto crow = c.row(i);
      for (std::size_t j = i; j < n; ++j) crow[j] += ri * r[j];
    }
  }
  const double inv = 1.0 / static_cast<double>(x.rows() - 1);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i; j < n; ++j) {
      c(i, j) *= inv;
      c(j, i) = c(i, j);
    }
  return c;
}

namespace detail {

// Flips column j of `v` so its largest-magnitude entry (first one on ties) is positive.
inline void fix_column_sign(Matrix& v, std::size_t j) {
  std::size_t arg = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < v.rows(); ++i) {
    const double a = std::abs(v(i, j));
    if (a > best) {
      best = a;
      arg = i;
    }
  }
  if (v(arg, j) < 0.0)
    for (std::size_t i = 0; i < v.rows(); ++i) v(i, j) = -v(i, j);
}

// Orders eigenpairs by descending value (stable) and applies the sign convention.
inline SymEig sort_eigenpairs(const std::vector<double>& values, const Matrix& vectors) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  SymEig out;
  out.eigenvalues.resize(n);
  out.eigenvectors = Matrix(vectors.rows(), n);
  for (std::size_t j = 0; j < n; ++j) {
    out.eigenvalues[j] = values[order[j]];
    for (std::size_t i = 0; i < vectors.rows(); ++i)
      out.eigenvectors(i, j) = vectors(i, order[j]);
    fix_column_sign(out.eigenvectors, j);
  }
  return out;
}

// Fills column j of `q` with a unit vector orthogonal to columns [0, j).
inline void complete_column(Matrix& q, std::size_t j) {
  const std::size_t m = q.rows();
  std::vector<double> best;
  double best_norm = -1.0;
  for (std::size_t e = 0; e < m; ++e) {
    std::vector<double> cand(m, 0.0);
    cand[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass) {
      for (std::size_t c = 0; c < j; ++c) {
        double d = 0.0;
        for (std::size_t r = 0; r < m; ++r) d += q(r, c) * cand[r];
        for (std::size_t r = 0; r < m; ++r) cand[r] -= d * q(r, c);
      }
    }
    double nrm = 0.0;
    for (double v : cand) nrm += v * v;
    if (nrm > best_norm + 1e-12) {
      best_norm = nrm;
      best = std::move(cand);
    }
  }
  const double inv = 1.0 / std::sqrt(best_norm);
  for (std::size_t r = 0; r < m; ++r) q(r, j) = best[r] * inv;
}

}  // namespace detail

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. The input is
/// symmetrised as (C + Cᵀ)/2 first.
inline SymEig sym_eig(const Matrix& c) {
  require(c.rows() == c.cols(), ErrorKind::kShape, "sym_eig needs a square matrix, got " + shape_str(c));
  require(all_finite(c), ErrorKind::kContract, "sym_eig input has non-finite entries");
  const std::size_t n = c.rows();
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) a(i, j) = 0.5 * (c(i, j) + c(j, i));
  Matrix vt = Matrix::identity(n);  // eigenvectors as rows

  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += std::abs(a(p, q));
    if (off == 0.0) break;

    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p);
        const double aqq = a(q, q);
        // Negligible against both diagonal entries: drop it.
        const double g = 100.0 * std::abs(apq);
        if (sweep > 3 && std::abs(app) + g == std::abs(app) && std::abs(aqq) + g == std::abs(aqq)) {
          a(p, q) = 0.0;
          a(q, p) = 0.0;
          continue;
        }
        double t;
        const double h = aqq - app;
        if (std::abs(h) + g == std::abs(h)) {
          t = apq / h;
        } else {
          const double theta = 0.5 * h / apq;
          t = 1.0 / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
          if (theta < 0.0) t = -t;
        }
        const double cs = 1.0 / std::sqrt(1.0 + t * t);
        const double sn = t * cs;
        a(p, p) = app - t * apq;
        a(q, q) = aqq + t * apq;
        a(p, q) = 0.0;
        a(q, p) = 0.0;
        auto rp = a.row(p);
        auto rq = a.row(q);
        for (std::size_t k = 0; k < n; ++k) {
          if (k == p || k == q) continue;
          const double akp = rp[k];
          const double akq = rq[k];
          rp[k] = cs * akp - sn * akq;
          rq[k] = sn * akp + cs * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          if (k == p || k == q) continue;
          a(k, p) = rp[k];
          a(k, q) = rq[k];
        }
        auto vp = vt.row(p);
        auto vq = vt.row(q);
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vp[k];
          const double vkq = vq[k];
          vp[k] = cs * vkp - sn * vkq;
          vq[k] = sn * vkp + cs * vkq;
        }
      }
    }
  }

  std::vector<double> values(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a(i, i);
  return detail::sort_eigenpairs(values, transpose(vt));
}

/// Thin SVD through the eigendecomposition of the smaller Gram matrix.
/// Singular vectors on the other side are recovered by projection; columns
/// whose singular value vanishes are completed to an orthonormal set.
inline Svd svd(const Matrix& a) {
  require(all_finite(a), ErrorKind::kContract, "svd input has non-finite entries");
  const bool tall = a.cols() <= a.rows();
  const Matrix gram = tall ? matmul_tn(a, a) : matmul_nt(a, a);
  const SymEig eig = sym_eig(gram);
  const std::size_t r = eig.eigenvalues.size();
  const Matrix& basis = eig.eigenvectors;
  const std::size_t other_dim = tall ? a.rows() : a.cols();

  // proj = A v_j (tall) or Aᵀ u_j (wide).
  Matrix proj = tall ? matmul(a, basis) : matmul_tn(a, basis);
  std::vector<double> sigma(r);
  for (std::size_t j = 0; j < r; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < other_dim; ++i) s += proj(i, j) * proj(i, j);
    sigma[j] = std::sqrt(s);
  }

  std::vector<std::size_t> order(r);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  const double smax = r ? sigma[order[0]] : 0.0;
  const double tiny = std::max(smax * 1e-13, 1e-300);
  Matrix solved(basis.rows(), r);
  Matrix projected(other_dim, r);
  Svd out;
  out.sigma.resize(r);
  for (std::size_t j = 0; j < r; ++j) {
    const std::size_t src = order[j];
    out.sigma[j] = sigma[src];
    for (std::size_t i = 0; i < basis.rows(); ++i) solved(i, j) = basis(i, src);
  }
  for (std::size_t j = 0; j < r; ++j) {
    const std::size_t src = order[j];
    if (out.sigma[j] > tiny) {
      for (std::size_t i = 0; i < other_dim; ++i) projected(i, j) = proj(i, src) / out.sigma[j];
    } else {
      out.sigma[j] = std::max(out.sigma[j], 0.0);
      detail::complete_column(projected, j);
    }
  }

  if (tall) {
    out.U = std::move(projected);
    out.Vt = transpose(solved);
  } else {
    out.U = std::move(solved);
    out.Vt = transpose(projected);
  }
  return out;
}

/// Builds Q·diag(max(λ,eps))^{1/2} and its inverse diag(max(λ,eps))^{-1/2}·Qᵀ.
/// Negative eigenvalues within rounding noise are clamped to zero.
inline BasisPair reg_inverse_sqrt_pair(const SymEig& eig, double eps) {
  require(eps >= 0.0 && std::isfinite(eps), ErrorKind::kContract, "eps must be finite and non-negative");
  const std::size_t n = eig.eigenvalues.size();
  require(eig.eigenvectors.rows() == n && eig.eigenvectors.cols() == n, ErrorKind::kShape,
          "eigenvector matrix does not match eigenvalue count");
  const double lmax = n ? std::max(eig.eigenvalues.front(), 0.0) : 0.0;
  const double neg_tol = 1e-9 * std::max(1.0, lmax);
  std::vector<double> root(n), inv_root(n);
  for (std::size_t j = 0; j < n; ++j) {
    double lam = eig.eigenvalues[j];
    require(lam >= -neg_tol, ErrorKind::kContract,
            "eigenvalue " + std::to_string(lam) + " is significantly negative");
    lam = std::max(std::max(lam, 0.0), eps);
    require(lam > 0.0, ErrorKind::kDegenerate, "singular basis: zero eigenvalue with eps = 0");
    root[j] = std::sqrt(lam);
    inv_root[j] = 1.0 / root[j];
  }
  BasisPair out;
  out.basis = scale_cols(eig.eigenvectors, root);
  out.inverse = scale_rows(transpose(eig.eigenvectors), inv_root);
  return out;
}

}  // namespace kbvq
