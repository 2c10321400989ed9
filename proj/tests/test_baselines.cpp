// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <set>

#include "support.hpp"

namespace kbvq {
namespace {

using testing::random_matrix;
using testing::thrown_kind;

TEST(Rtn, TwoBitSymmetricGrid) {
  const Matrix w{{-1, -0.6, -0.4, 0, 0.4, 0.6, 1}};
  const Matrix q = rtn_quantize(w, RtnConfig{2, 7, true});
  EXPECT_EQ(q, (Matrix{{-1, -1, 0, 0, 0, 1, 1}}));
}

TEST(Rtn, AsymmetricGrid) {
  // Range [0, 3] with 2 bits: levels 0, 1, 2, 3.
  const Matrix w{{0, 0.4, 1.6, 2.2, 3}};
  EXPECT_EQ(rtn_quantize(w, RtnConfig{2, 5, false}), (Matrix{{0, 0, 2, 2, 3}}));
}

TEST(Rtn, ZeroGroupIsCopied) {
  Matrix w(2, 4);
  w(1, 0) = 0.5;
  const Matrix q = rtn_quantize(w, RtnConfig{2, 4, true});
  for (std::size_t c = 0; c < 4; ++c) EXPECT_EQ(q(0, c), 0.0);
  EXPECT_EQ(q(1, 0), 0.5);
}

TEST(Rtn, ErrorWithinHalfStep) {
  for (bool sym : {true, false})
    for (unsigned bits : {2u, 3u, 4u, 8u}) {
      const RtnConfig cfg{bits, 16, sym};
      const Matrix w = random_matrix(8, 10, bits + 17 * sym);
      const Matrix q = rtn_quantize(w, cfg);
      // 80 values, group size 16, the last group ragged.
      for (std::size_t start = 0; start < w.size(); start += 16) {
        const std::size_t len = std::min<std::size_t>(16, w.size() - start);
        const auto g = w.data().subspan(start, len);
        const double scale = rtn_group_scale(g, cfg);
        for (std::size_t i = 0; i < len; ++i)
          EXPECT_LE(std::abs(q.data()[start + i] - g[i]), 0.5 * scale * (1 + 1e-12));
      }
    }
}

TEST(Rtn, LevelCount) {
  const Matrix w = random_matrix(1, 512, 3);
  for (bool sym : {true, false}) {
    const Matrix q = rtn_quantize(w, RtnConfig{3, 512, sym});
    std::set<double> levels(q.data().begin(), q.data().end());
    EXPECT_LE(levels.size(), sym ? 7u : 8u);
    EXPECT_GE(levels.size(), sym ? 6u : 7u);
  }
}

TEST(Rtn, Idempotent) {
  for (bool sym : {true, false}) {
    const RtnConfig cfg{2, 32, sym};
    const Matrix q = rtn_quantize(random_matrix(16, 16, 5), cfg);
    EXPECT_LE(max_abs_diff(rtn_quantize(q, cfg), q), 1e-12);
  }
}

TEST(Rtn, Validation) {
  const Matrix w(2, 2);
  EXPECT_EQ(thrown_kind([&] { rtn_quantize(w, RtnConfig{1, 4, true}); }), ErrorKind::kConfig);
  EXPECT_EQ(thrown_kind([&] { rtn_quantize(w, RtnConfig{9, 4, true}); }), ErrorKind::kConfig);
  EXPECT_EQ(thrown_kind([&] { rtn_quantize(w, RtnConfig{2, 0, true}); }), ErrorKind::kConfig);
}

TEST(PlainVq, SameAsQuantizeMatrix) {
  const Matrix w = random_matrix(16, 32, 9);
  VqConfig cfg;
  cfg.iters = 10;
  const QuantizedTensor a = plain_vq_quantize(w, cfg);
  const QuantizedTensor b = quantize_matrix(w, cfg);
  EXPECT_EQ(a.indices, b.indices);
  EXPECT_EQ(a.codebook.words, b.codebook.words);
}

TEST(PlainVq, BeatsTwoBitRtnOnGaussianWeights) {
  const Matrix w = random_matrix(64, 128, 10);
  VqConfig cfg;
  cfg.iters = 30;
  const double vq = frobenius_sq(reconstruct(plain_vq_quantize(w, cfg)) - w);
  const double rtn = frobenius_sq(rtn_quantize(w, RtnConfig{2, 128, true}) - w);
  EXPECT_LT(vq, rtn);
}

}  // namespace
}  // namespace kbvq
