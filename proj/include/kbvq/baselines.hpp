// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>

#include "kbvq/error.hpp"
#include "kbvq/matrix.hpp"
#include "kbvq/vq.hpp"

namespace kbvq {

struct RtnConfig {
  unsigned bits = 2;
  std::size_t group_size = 128;
  bool symmetric = true;

  void validate() const {
    require(bits >= 2 && bits <= 8, ErrorKind::kConfig, "RTN bits must lie in [2, 8]");
    require(group_size >= 1, ErrorKind::kConfig, "RTN group size must be >= 1");
  }
};

/// Grid step of one RTN group.
inline double rtn_group_scale(std::span<const double> g, const RtnConfig& cfg) {
  if (cfg.symmetric) {
    double mx = 0.0;
    for (double v : g) mx = std::max(mx, std::abs(v));
    return mx / static_cast<double>((1u << (cfg.bits - 1)) - 1);
  }
  const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
  return (*hi - *lo) / static_cast<double>((1u << cfg.bits) - 1);
}

/// Quantize-dequantize over contiguous groups of the row-major flattening.
/// Symmetric: grid {-q..q}·scale with q = 2^{b-1}-1 and scale = max|w|/q.
/// Asymmetric: min + {0..2^b-1}·scale with scale = (max-min)/(2^b-1).
inline Matrix rtn_quantize(const Matrix& w, const RtnConfig& cfg) {
  cfg.validate();
  Matrix out(w.rows(), w.cols());
  const auto src = w.data();
  auto dst = out.data();
  for (std::size_t start = 0; start < src.size(); start += cfg.group_size) {
    const std::size_t len = std::min(cfg.group_size, src.size() - start);
    const auto g = src.subspan(start, len);
    const double scale = rtn_group_scale(g, cfg);
    if (scale == 0.0) {
      std::copy(g.begin(), g.end(), dst.begin() + static_cast<std::ptrdiff_t>(start));
      continue;
    }
    if (cfg.symmetric) {
      const double qmax = static_cast<double>((1u << (cfg.bits - 1)) - 1);
      for (std::size_t i = 0; i < len; ++i)
        dst[start + i] = std::clamp(std::round(g[i] / scale), -qmax, qmax) * scale;
    } else {
      const double lo = *std::min_element(g.begin(), g.end());
      const double qmax = static_cast<double>((1u << cfg.bits) - 1);
      for (std::size_t i = 0; i < len; ++i)
        dst[start + i] = lo + std::clamp(std::round((g[i] - lo) / scale), 0.0, qmax) * scale;
    }
  }
  return out;
}

/// Vector quantization of the whole weight, no shared-part extraction and no
/// output correction.
inline QuantizedTensor plain_vq_quantize(const Matrix& w, const VqConfig& cfg) { return quantize_matrix(w, cfg); }

}  // namespace kbvq
