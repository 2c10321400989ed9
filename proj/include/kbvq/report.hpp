// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

// Storage accounting for a compressed expert group:
//
//   shared   = 16 (m + l n) min(m, l) k
//   indices  = m l b n
//   codebook = 2^{b v} v 16 n
//   bcos     = 2 l n 16
//   fp16     = 16 n m l
//
// m is the dimension spanned by the shared factor (stored once per group)
// and l the per-expert dimension (stored per expert and per output channel);
// for an oc x ic expert that is m = ic, l = oc.

#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <sstream>
#include <string>

#include <json.hpp>

#include "kbvq/bundle.hpp"
#include "kbvq/error.hpp"
#include "kbvq/moesim.hpp"

namespace kbvq {

struct BitBudget {
  std::uint64_t m = 0;
  std::uint64_t l = 0;
  std::uint64_t n = 0;
  std::uint64_t k_num = 1;  // k_ratio = k_num / k_den
  std::uint64_t k_den = 128;
  std::uint64_t v = 4;
  std::uint64_t b = 2;
  bool include_bcos = true;
  bool include_codebook = true;
  std::uint64_t bcos_param_bits = 16;  // bits per stored s_j / b_j

  double k_ratio() const { return static_cast<double>(k_num) / static_cast<double>(k_den); }

  void validate() const {
    require(m > 0 && l > 0 && n > 0 && v > 0 && b > 0, ErrorKind::kConfig, "budget counts must be positive");
    require(k_den > 0 && k_num <= k_den, ErrorKind::kConfig, "k_ratio must lie in [0, 1]");
    require(!include_codebook || b * v <= 24, ErrorKind::kConfig,
            "codebook of 2^" + std::to_string(b * v) + " entries exceeds the 2^24 guard");
  }
};

struct CompressionReport {
  double fp16_bits = 0.0;
  double shared_bits = 0.0;
  double index_bits = 0.0;
  double codebook_bits = 0.0;
  double bcos_bits = 0.0;
  double overhead_bits = 0.0;  // headers, lengths, checksums (measured only)
  double weight_count = 0.0;

  double total_bits() const { return shared_bits + index_bits + codebook_bits + bcos_bits + overhead_bits; }
  double effective_bits() const { return weight_count > 0 ? total_bits() / weight_count : 0.0; }
  double compression_ratio() const { return fp16_bits > 0 ? 1.0 - total_bits() / fp16_bits : 0.0; }
  double total_gib() const { return total_bits() / 8.0 / 1073741824.0; }

  /// Bits per weight implied by a compression ratio quoted in whole percent:
  /// 16 * (1 - round(ratio, 2)). This is how "87 %" becomes "2.08 bits".
  double effective_bits_from_rounded_ratio() const {
    return 16.0 * (1.0 - std::round(compression_ratio() * 100.0) / 100.0);
  }

  CompressionReport& operator+=(const CompressionReport& o) {
    fp16_bits += o.fp16_bits;
    shared_bits += o.shared_bits;
    index_bits += o.index_bits;
    codebook_bits += o.codebook_bits;
    bcos_bits += o.bcos_bits;
    overhead_bits += o.overhead_bits;
    weight_count += o.weight_count;
    return *this;
  }
};

inline CompressionReport effective_bits(const BitBudget& bb) {
  bb.validate();
  CompressionReport r;
  const std::uint64_t mn = std::min(bb.m, bb.l);
  // Integer numerator; one division at the end.
  const std::uint64_t shared_num = 16 * (bb.m + bb.l * bb.n) * mn * bb.k_num;
  r.shared_bits = static_cast<double>(shared_num) / static_cast<double>(bb.k_den);
  r.index_bits = static_cast<double>(bb.m * bb.l * bb.b * bb.n);
  if (bb.include_codebook) r.codebook_bits = static_cast<double>((std::uint64_t{1} << (bb.b * bb.v)) * bb.v * 16 * bb.n);
  if (bb.include_bcos) r.bcos_bits = static_cast<double>(2 * bb.l * bb.n * bb.bcos_param_bits);
  r.fp16_bits = static_cast<double>(16 * bb.n * bb.m * bb.l);
  r.weight_count = static_cast<double>(bb.n * bb.m * bb.l);
  return r;
}

/// Formula evaluated at what a bundle actually stores: its realised integer
/// rank and 32-bit scale/bias entries.
inline CompressionReport predicted_for_bundle(const QuantizedBundle& b) {
  CompressionReport total;
  for (const auto& g : b.groups) {
    if (g.experts.empty()) continue;
    BitBudget bb;
    bb.m = g.ic;
    bb.l = g.oc;
    bb.n = g.experts.size();
    bb.k_num = 0;
    bb.v = b.manifest.d;
    bb.b = b.manifest.bits;
    bb.include_bcos = b.manifest.bcos_on();
    bb.bcos_param_bits = 32;
    CompressionReport r = effective_bits(bb);
    // Same shared term with the integer rank in place of min(m, l) * k_ratio.
    r.shared_bits = static_cast<double>(16 * (bb.m + bb.l * bb.n) * g.k);
    total += r;
  }
  return total;
}

/// Attribution of the serialized bytes of a bundle.
inline CompressionReport measure_actual(std::span<const std::uint8_t> bytes) {
  BundleLayout lay;
  parse_bundle(bytes, &lay);
  CompressionReport r;
  r.shared_bits = 8.0 * static_cast<double>(lay.shared_bytes);
  r.index_bits = 8.0 * static_cast<double>(lay.index_bytes);
  r.codebook_bits = 8.0 * static_cast<double>(lay.codebook_bytes);
  r.bcos_bits = 8.0 * static_cast<double>(lay.bcos_bytes);
  r.overhead_bits = 8.0 * static_cast<double>(lay.overhead_bytes());
  r.weight_count = static_cast<double>(lay.weight_count);
  r.fp16_bits = 16.0 * r.weight_count;
  return r;
}

inline CompressionReport measure_actual(const QuantizedBundle& b) { return measure_actual(serialize_bundle(b)); }

/// Scalar round-to-nearest storage: b bits per weight plus one 16-bit scale
/// per group (and a 16-bit zero point when asymmetric).
inline double rtn_effective_bits(unsigned bits, std::size_t group_size, bool symmetric) {
  require(group_size >= 1, ErrorKind::kConfig, "group size must be >= 1");
  return static_cast<double>(bits) + (symmetric ? 16.0 : 32.0) / static_cast<double>(group_size);
}

inline nlohmann::ordered_json compression_json(const CompressionReport& r) {
  nlohmann::ordered_json j;
  j["effective_bits"] = r.effective_bits();
  j["compression_ratio"] = r.compression_ratio();
  j["total_bits"] = r.total_bits();
  j["total_gib"] = r.total_gib();
  j["fp16_bits"] = r.fp16_bits;
  j["shared_bits"] = r.shared_bits;
  j["index_bits"] = r.index_bits;
  j["codebook_bits"] = r.codebook_bits;
  j["bcos_bits"] = r.bcos_bits;
  j["overhead_bits"] = r.overhead_bits;
  j["weight_count"] = r.weight_count;
  return j;
}

/// Report document with the fixed top-level keys consumed by tooling.
inline nlohmann::ordered_json report_json(const CompressionReport& c, const std::optional<DriftReport>& drift,
                                          std::optional<double> rho_k) {
  nlohmann::ordered_json j;
  j["effective_bits"] = c.effective_bits();
  j["compression_ratio"] = c.compression_ratio();
  j["output_mse"] = drift ? nlohmann::ordered_json(drift->output_mse) : nlohmann::ordered_json(nullptr);
  j["mean_shift_median"] = drift ? nlohmann::ordered_json(drift->mean_shift_median()) : nlohmann::ordered_json(nullptr);
  j["var_ratio_median"] = drift ? nlohmann::ordered_json(drift->var_ratio_median()) : nlohmann::ordered_json(nullptr);
  j["rho_k"] = rho_k ? nlohmann::ordered_json(*rho_k) : nlohmann::ordered_json(nullptr);
  j["compression"] = compression_json(c);
  return j;
}

/// key=value lines, one per top-level scalar.
inline std::string report_kv(const nlohmann::ordered_json& j) {
  std::ostringstream os;
  for (const auto& [key, value] : j.items()) {
    if (value.is_object()) continue;
    os << key << '=' << value.dump() << '\n';
  }
  return os.str();
}

}  // namespace kbvq
