// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "kbvq/error.hpp"
#include "kbvq/matrix.hpp"
#include "kbvq/rng.hpp"

namespace kbvq {

struct VqConfig {
  std::size_t d = 4;
  unsigned bits = 2;  // bits per weight; one index costs bits * d bits
  std::size_t iters = 100;
  std::uint64_t seed = 42;

  unsigned index_bits() const { return bits * static_cast<unsigned>(d); }
  std::size_t codebook_size() const { return std::size_t{1} << index_bits(); }

  void validate() const {
    require(d >= 1, ErrorKind::kConfig, "sub-vector length must be >= 1");
    require(bits >= 1, ErrorKind::kConfig, "bits per weight must be >= 1");
    require(iters >= 1, ErrorKind::kConfig, "Lloyd iteration count must be >= 1");
    require(bits * d <= 24, ErrorKind::kConfig,
            "codebook of 2^" + std::to_string(bits * d) + " entries exceeds the 2^24 guard");
  }
};

struct Codebook {
  std::size_t d = 0;
  std::vector<double> words;  // K rows of length d

  std::size_t size() const noexcept { return d ? words.size() / d : 0; }
  std::span<const double> word(std::size_t j) const { return {words.data() + j * d, d}; }
  std::span<double> word(std::size_t j) { return {words.data() + j * d, d}; }

  friend bool operator==(const Codebook&, const Codebook&) = default;
};

struct QuantizedTensor {
  std::size_t oc = 0;
  std::size_t ic = 0;
  std::size_t d = 0;
  std::vector<std::uint32_t> indices;
  Codebook codebook;
  std::size_t pad_count = 0;

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

/// Contiguous length-d chunks of a row-major flattening. Only the last chunk
/// can be padded; its padded tail is excluded from every distance and mean.
struct SubvectorSet {
  std::size_t d = 0;
  std::vector<double> data;
  std::size_t pad_count = 0;

  std::size_t count() const noexcept { return d ? data.size() / d : 0; }
  std::span<const double> at(std::size_t i) const { return {data.data() + i * d, d}; }
  std::size_t valid_len(std::size_t i) const {
    return i + 1 == count() ? d - pad_count : d;
  }
};

struct LloydResult {
  Codebook codebook;
  std::vector<double> inertia_trace;  // one entry per assignment pass
  std::size_t iterations = 0;         // update steps performed
};

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t len) {
  double s = 0.0;
  for (std::size_t t = 0; t < len; ++t) {
    const double diff = a[t] - b[t];
    s += diff * diff;
  }
  return s;
}

// Lowest index wins ties.
inline std::uint32_t nearest(const double* z, std::size_t len, const Codebook& cb, double* best_out) {
  const std::size_t k = cb.size();
  const double* w = cb.words.data();
  double best = std::numeric_limits<double>::infinity();
  std::uint32_t arg = 0;
  if (len == 4 && cb.d == 4) {
    const double z0 = z[0], z1 = z[1], z2 = z[2], z3 = z[3];
    for (std::size_t j = 0; j < k; ++j, w += 4) {
      const double a = z0 - w[0], b = z1 - w[1], c = z2 - w[2], e = z3 - w[3];
      const double s = a * a + b * b + c * c + e * e;
      if (s < best) {
        best = s;
        arg = static_cast<std::uint32_t>(j);
      }
    }
  } else {
    for (std::size_t j = 0; j < k; ++j, w += cb.d) {
      const double s = sq_dist(z, w, len);
      if (s < best) {
        best = s;
        arg = static_cast<std::uint32_t>(j);
      }
    }
  }
  if (best_out) *best_out = best;
  return arg;
}

inline double assign_all(const SubvectorSet& v, const Codebook& cb, std::vector<std::uint32_t>& idx,
                         std::vector<double>& dist) {
  const std::size_t n = v.count();
  idx.resize(n);
  dist.resize(n);
  double inertia = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    idx[i] = nearest(v.data.data() + i * v.d, v.valid_len(i), cb, &dist[i]);
    inertia += dist[i];
  }
  return inertia;
}

}  // namespace detail

inline SubvectorSet partition_subvectors(const Matrix& w, std::size_t d) {
  require(d >= 1, ErrorKind::kConfig, "sub-vector length must be >= 1");
  SubvectorSet out;
  out.d = d;
  const std::size_t total = w.size();
  const std::size_t chunks = (total + d - 1) / d;
  out.pad_count = chunks * d - total;
  out.data.assign(w.data().begin(), w.data().end());
  out.data.resize(chunks * d, 0.0);
  return out;
}

/// k-means++ seeding. When the data has fewer distinct vectors than K, the
/// extra centres are copies of data points nudged by 1e-9 * max|x|.
inline Codebook kmeanspp_init(const SubvectorSet& v, std::size_t k, std::uint64_t seed) {
  const std::size_t n = v.count();
  require(n >= 1, ErrorKind::kContract, "k-means++ needs at least one vector");
  require(k >= 1, ErrorKind::kConfig, "codebook size must be >= 1");
  const std::size_t d = v.d;
  Rng rng(seed);

  double scale = 0.0;
  for (double x : v.data) scale = std::max(scale, std::abs(x));
  if (scale == 0.0) scale = 1.0;
  const double nudge = 1e-9 * scale;

  Codebook cb;
  cb.d = d;
  cb.words.reserve(k * d);
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  std::size_t duplicates = 0;

  auto add_center = [&](std::size_t src, bool perturb) {
    const std::size_t base = cb.words.size();
    auto z = v.at(src);
    cb.words.insert(cb.words.end(), z.begin(), z.end());
    if (perturb) {
      cb.words[base + duplicates % d] += nudge * static_cast<double>(1 + duplicates / d);
      ++duplicates;
    }
    const double* c = cb.words.data() + base;
    for (std::size_t i = 0; i < n; ++i)
      dist[i] = std::min(dist[i], detail::sq_dist(v.data.data() + i * d, c, v.valid_len(i)));
  };

  add_center(rng.below(n), false);
  while (cb.size() < k) {
    double total = 0.0;
    for (double x : dist) total += x;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      std::size_t pick = n;
      std::size_t last_positive = 0;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (dist[i] <= 0.0) continue;
        last_positive = i;
        acc += dist[i];
        if (acc > target) {
          pick = i;
          break;
        }
      }
      add_center(pick == n ? last_positive : pick, false);
    } else {
      add_center(rng.below(n), true);
    }
  }
  return cb;
}

/// Lloyd iterations: nearest-centre assignment (ties to the lowest index),
/// per-coordinate means, empty clusters re-seeded at the farthest points.
/// Stops after `iters` updates, once assignments stop changing, or at zero
/// inertia (every sub-vector already equals its codeword, and averaging equal
/// values could only add rounding).
inline LloydResult lloyd_train(const SubvectorSet& v, const Codebook& init, std::size_t iters) {
  require(init.d == v.d, ErrorKind::kShape, "codebook and sub-vector lengths differ");
  require(init.size() >= 1, ErrorKind::kContract, "empty initial codebook");
  const std::size_t n = v.count();
  const std::size_t k = init.size();
  const std::size_t d = v.d;

  LloydResult out;
  out.codebook = init;
  Codebook& cb = out.codebook;
  std::vector<std::uint32_t> idx, next_idx;
  std::vector<double> dist;
  out.inertia_trace.push_back(detail::assign_all(v, cb, idx, dist));

  std::vector<double> sums(k * d);
  std::vector<std::size_t> counts(k * d);
  std::vector<std::size_t> members(k);
  for (std::size_t it = 0; it < iters && out.inertia_trace.back() > 0.0; ++it) {
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    std::fill(members.begin(), members.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = idx[i];
      ++members[c];
      const std::size_t len = v.valid_len(i);
      const double* z = v.data.data() + i * d;
      for (std::size_t t = 0; t < len; ++t) {
        sums[c * d + t] += z[t];
        ++counts[c * d + t];
      }
    }
    for (std::size_t c = 0; c < k; ++c)
      for (std::size_t t = 0; t < d; ++t)
        if (counts[c * d + t]) cb.words[c * d + t] = sums[c * d + t] / static_cast<double>(counts[c * d + t]);

    bool any_empty = false;
    for (std::size_t c = 0; c < k; ++c) any_empty = any_empty || members[c] == 0;
    if (any_empty) {
      for (std::size_t i = 0; i < n; ++i)
        dist[i] = detail::sq_dist(v.data.data() + i * d, cb.words.data() + idx[i] * d, v.valid_len(i));
      for (std::size_t c = 0; c < k; ++c) {
        if (members[c]) continue;
        std::size_t far = 0;
        for (std::size_t i = 1; i < n; ++i)
          if (dist[i] > dist[far]) far = i;
        auto z = v.at(far);
        std::copy(z.begin(), z.end(), cb.words.begin() + static_cast<std::ptrdiff_t>(c * d));
        dist[far] = -1.0;
      }
    }

    out.inertia_trace.push_back(detail::assign_all(v, cb, next_idx, dist));
    ++out.iterations;
    const bool stable = next_idx == idx;
    idx.swap(next_idx);
    if (stable) break;
  }
  return out;
}

/// Nearest codeword for one sub-vector.
inline std::uint32_t assign(std::span<const double> z, const Codebook& cb) {
  require(z.size() == cb.d, ErrorKind::kShape,
          "sub-vector length " + std::to_string(z.size()) + " != codeword length " + std::to_string(cb.d));
  require(cb.size() >= 1, ErrorKind::kContract, "empty codebook");
  return detail::nearest(z.data(), z.size(), cb, nullptr);
}

/// Indices for every sub-vector of W under a fixed codebook.
inline QuantizedTensor encode_with_codebook(const Matrix& w, const Codebook& cb) {
  const SubvectorSet v = partition_subvectors(w, cb.d);
  QuantizedTensor q;
  q.oc = w.rows();
  q.ic = w.cols();
  q.d = cb.d;
  q.pad_count = v.pad_count;
  q.codebook = cb;
  q.indices.resize(v.count());
  for (std::size_t i = 0; i < v.count(); ++i)
    q.indices[i] = detail::nearest(v.data.data() + i * v.d, v.valid_len(i), cb, nullptr);
  return q;
}

struct VqResult {
  QuantizedTensor tensor;
  std::vector<double> inertia_trace;
  std::size_t iterations = 0;
};

inline VqResult quantize_matrix_traced(const Matrix& w, const VqConfig& cfg) {
  cfg.validate();
  require(w.size() >= 1, ErrorKind::kShape, "cannot quantize an empty matrix");
  const SubvectorSet v = partition_subvectors(w, cfg.d);
  const Codebook init = kmeanspp_init(v, cfg.codebook_size(), cfg.seed);
  LloydResult trained = lloyd_train(v, init, cfg.iters);
  VqResult out;
  out.tensor = encode_with_codebook(w, trained.codebook);
  out.inertia_trace = std::move(trained.inertia_trace);
  out.iterations = trained.iterations;
  return out;
}

/// partition -> k-means++ -> Lloyd -> assignment.
inline QuantizedTensor quantize_matrix(const Matrix& w, const VqConfig& cfg) {
  return quantize_matrix_traced(w, cfg).tensor;
}

inline Matrix reconstruct(const QuantizedTensor& q) {
  const std::size_t k = q.codebook.size();
  require(q.codebook.d == q.d && q.d >= 1, ErrorKind::kIntegrity, "codebook length does not match tensor");
  const std::size_t total = q.oc * q.ic;
  require(q.indices.size() * q.d == total + q.pad_count && q.pad_count < q.d, ErrorKind::kIntegrity,
          "index count does not cover the tensor shape");
  Matrix w(q.oc, q.ic);
  auto out = w.data();
  for (std::size_t i = 0; i < q.indices.size(); ++i) {
    const std::uint32_t c = q.indices[i];
    require(c < k, ErrorKind::kIntegrity,
            "codeword index " + std::to_string(c) + " out of range for K=" + std::to_string(k));
    auto word = q.codebook.word(c);
    const std::size_t base = i * q.d;
    const std::size_t len = std::min(q.d, total - base);
    std::copy_n(word.begin(), len, out.begin() + static_cast<std::ptrdiff_t>(base));
  }
  return w;
}

/// Packs `bits`-wide indices LSB-first: bit j of the stream is bit j%8 of byte j/8.
inline std::vector<std::uint8_t> pack_indices(std::span<const std::uint32_t> idx, unsigned bits) {
  require(bits >= 1 && bits <= 32, ErrorKind::kConfig, "index width must be in [1, 32]");
  std::vector<std::uint8_t> out((idx.size() * bits + 7) / 8, 0);
  std::size_t pos = 0;
  for (std::uint32_t v : idx) {
    require(bits == 32 || v < (std::uint64_t{1} << bits), ErrorKind::kIntegrity, "index exceeds packed width");
    for (unsigned b = 0; b < bits; ++b, ++pos)
      if ((v >> b) & 1u) out[pos / 8] |= static_cast<std::uint8_t>(1u << (pos % 8));
  }
  return out;
}

inline std::vector<std::uint32_t> unpack_indices(std::span<const std::uint8_t> bytes, std::size_t count,
                                                 unsigned bits) {
  require(bits >= 1 && bits <= 32, ErrorKind::kConfig, "index width must be in [1, 32]");
  require(bytes.size() == (count * bits + 7) / 8, ErrorKind::kIntegrity, "packed index length mismatch");
  std::vector<std::uint32_t> out(count, 0);
  std::size_t pos = 0;
  for (std::size_t i = 0; i < count; ++i)
    for (unsigned b = 0; b < bits; ++b, ++pos)
      if ((bytes[pos / 8] >> (pos % 8)) & 1u) out[i] |= (1u << b);
  return out;
}

}  // namespace kbvq
