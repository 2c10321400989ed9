// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

// Channel-wise output correction y_corr = (1 + s) ⊙ ŷ + b fitted on
// calibration outputs of the full-precision and quantized weights.
// Statistics use the population (1/N) convention on both sides.

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "kbvq/error.hpp"
#include "kbvq/matrix.hpp"

namespace kbvq {

enum class BcosMethod { kVarianceMatch, kMmseRegression };

inline const char* to_string(BcosMethod m) {
  return m == BcosMethod::kVarianceMatch ? "variance_match" : "mmse_regression";
}

inline BcosMethod parse_bcos_method(const std::string& s) {
  if (s == "variance_match") return BcosMethod::kVarianceMatch;
  if (s == "mmse_regression") return BcosMethod::kMmseRegression;
  fail(ErrorKind::kConfig, "unknown bcos method '" + s + "'");
}

struct ChannelStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::size_t count = 0;
  std::optional<std::vector<double>> cov_with_ref;  // Cov(y_j, ŷ_j)

  std::size_t channels() const noexcept { return mean.size(); }
};

struct BiasCorrection {
  std::vector<double> s;
  std::vector<double> b;
  BcosMethod method = BcosMethod::kVarianceMatch;

  static BiasCorrection identity(std::size_t oc, BcosMethod method = BcosMethod::kVarianceMatch) {
    return {std::vector<double>(oc, 0.0), std::vector<double>(oc, 0.0), method};
  }

  std::size_t channels() const noexcept { return s.size(); }

  friend bool operator==(const BiasCorrection&, const BiasCorrection&) = default;
};

inline constexpr double kDegenerateStd = 1e-12;

/// Per-channel mean/std of y and ŷ plus their paired covariance, from output
/// matrices whose rows are samples.
inline std::pair<ChannelStats, ChannelStats> paired_stats_from_outputs(const Matrix& y, const Matrix& y_hat) {
  require(y.same_shape(y_hat), ErrorKind::kShape,
          "paired outputs differ in shape: " + shape_str(y) + " vs " + shape_str(y_hat));
  require(y.rows() >= 2, ErrorKind::kDegenerate, "channel statistics need at least 2 samples");
  const std::size_t n = y.rows();
  const std::size_t oc = y.cols();
  const double inv_n = 1.0 / static_cast<double>(n);

  std::vector<double> mu_y(oc, 0.0), mu_h(oc, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto yr = y.row(r);
    auto hr = y_hat.row(r);
    for (std::size_t j = 0; j < oc; ++j) {
      mu_y[j] += yr[j];
      mu_h[j] += hr[j];
    }
  }
  for (std::size_t j = 0; j < oc; ++j) {
    mu_y[j] *= inv_n;
    mu_h[j] *= inv_n;
  }
  std::vector<double> var_y(oc, 0.0), var_h(oc, 0.0), cov(oc, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    auto yr = y.row(r);
    auto hr = y_hat.row(r);
    for (std::size_t j = 0; j < oc; ++j) {
      const double dy = yr[j] - mu_y[j];
      const double dh = hr[j] - mu_h[j];
      var_y[j] += dy * dy;
      var_h[j] += dh * dh;
      cov[j] += dy * dh;
    }
  }
  ChannelStats sy{std::move(mu_y), std::vector<double>(oc), n, std::nullopt};
  ChannelStats sh{std::move(mu_h), std::vector<double>(oc), n, std::vector<double>(oc)};
  for (std::size_t j = 0; j < oc; ++j) {
    sy.std[j] = std::sqrt(var_y[j] * inv_n);
    sh.std[j] = std::sqrt(var_h[j] * inv_n);
    (*sh.cov_with_ref)[j] = cov[j] * inv_n;
  }
  return {std::move(sy), std::move(sh)};
}

/// Statistics of y = x Wᵀ and ŷ = x Ŵᵀ over the calibration rows of X.
inline std::pair<ChannelStats, ChannelStats> collect_paired_stats(const Matrix& w, const Matrix& w_hat,
                                                                  const Matrix& x) {
  require(w.same_shape(w_hat), ErrorKind::kShape, "W and Ŵ differ in shape");
  require(x.cols() == w.cols(), ErrorKind::kShape,
          "calibration width " + std::to_string(x.cols()) + " != weight input dim " + std::to_string(w.cols()));
  require(x.rows() >= 2, ErrorKind::kDegenerate, "channel statistics need at least 2 samples");
  return paired_stats_from_outputs(matmul_nt(x, w), matmul_nt(x, w_hat));
}

namespace detail {
inline void check_pair(const ChannelStats& y, const ChannelStats& h) {
  require(y.channels() == h.channels() && y.std.size() == y.channels() && h.std.size() == h.channels(),
          ErrorKind::kShape, "channel statistics differ in width");
}
}  // namespace detail

/// s_j = σ_y/σ_ŷ - 1, b_j = μ_y - (1 + s_j) μ_ŷ. Flat channels (σ_ŷ < 1e-12)
/// only get the mean shift.
inline BiasCorrection fit_variance_match(const ChannelStats& y, const ChannelStats& y_hat) {
  detail::check_pair(y, y_hat);
  const std::size_t oc = y.channels();
  BiasCorrection c = BiasCorrection::identity(oc, BcosMethod::kVarianceMatch);
  for (std::size_t j = 0; j < oc; ++j) {
    if (y_hat.std[j] < kDegenerateStd) {
      c.s[j] = 0.0;
      c.b[j] = y.mean[j] - y_hat.mean[j];
    } else {
      c.s[j] = y.std[j] / y_hat.std[j] - 1.0;
      c.b[j] = y.mean[j] - (1.0 + c.s[j]) * y_hat.mean[j];
    }
  }
  return c;
}

/// Least-squares slope α = Cov(y, ŷ)/Var(ŷ) per channel; s = α - 1,
/// b = μ_y - α μ_ŷ. Flat channels collapse to α = 0, b = μ_y.
inline BiasCorrection fit_mmse_regression(const ChannelStats& y, const ChannelStats& y_hat) {
  detail::check_pair(y, y_hat);
  require(y_hat.cov_with_ref.has_value() && y_hat.cov_with_ref->size() == y_hat.channels(),
          ErrorKind::kContract, "regression fit needs the paired covariance");
  const std::size_t oc = y.channels();
  const auto& cov = *y_hat.cov_with_ref;
  BiasCorrection c = BiasCorrection::identity(oc, BcosMethod::kMmseRegression);
  for (std::size_t j = 0; j < oc; ++j) {
    double alpha = 0.0;
    if (y_hat.std[j] >= kDegenerateStd) alpha = cov[j] / (y_hat.std[j] * y_hat.std[j]);
    c.s[j] = alpha - 1.0;
    c.b[j] = y.mean[j] - alpha * y_hat.mean[j];
  }
  return c;
}

inline BiasCorrection fit_correction(BcosMethod method, const ChannelStats& y, const ChannelStats& y_hat) {
  return method == BcosMethod::kVarianceMatch ? fit_variance_match(y, y_hat) : fit_mmse_regression(y, y_hat);
}

inline void apply_correction_inplace(Matrix& y_hat, const BiasCorrection& corr) {
  require(y_hat.cols() == corr.channels() && corr.b.size() == corr.channels(), ErrorKind::kShape,
          "correction width " + std::to_string(corr.channels()) + " != output width " +
              std::to_string(y_hat.cols()));
  for (std::size_t r = 0; r < y_hat.rows(); ++r) {
    auto row = y_hat.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) row[j] = (1.0 + corr.s[j]) * row[j] + corr.b[j];
  }
}

inline Matrix apply_correction(const Matrix& y_hat, const BiasCorrection& corr) {
  Matrix out = y_hat;
  apply_correction_inplace(out, corr);
  return out;
}

}  // namespace kbvq
