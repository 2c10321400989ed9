// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <cstdint>
#include <functional>

#include "kbvq/kbvq.hpp"

namespace kbvq::testing {

inline Matrix random_matrix(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (double& v : m.data()) v = scale * rng.normal();
  return m;
}

inline Matrix random_matrix(std::size_t r, std::size_t c, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return random_matrix(r, c, rng, scale);
}

// G Gᵀ / n with G n x (n + extra): full rank almost surely.
inline Matrix random_psd(std::size_t n, Rng& rng, std::size_t extra = 2) {
  const Matrix g = random_matrix(n, n + extra, rng);
  return (1.0 / static_cast<double>(n)) * matmul_nt(g, g);
}

inline Matrix random_symmetric(std::size_t n, Rng& rng) {
  const Matrix a = random_matrix(n, n, rng);
  return 0.5 * (a + transpose(a));
}

inline double relative_gap(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-300});
  return std::abs(a - b) / scale;
}

inline ErrorKind thrown_kind(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected a kbvq::Error";
  return ErrorKind::kContract;
}

inline ExpertGroup random_group(std::size_t n, std::size_t oc, std::size_t ic, std::uint64_t seed) {
  Rng rng(seed);
  ExpertGroup g;
  g.role_label = "w";
  for (std::size_t i = 0; i < n; ++i) g.experts.push_back(random_matrix(oc, ic, rng));
  return g;
}

}  // namespace kbvq::testing
