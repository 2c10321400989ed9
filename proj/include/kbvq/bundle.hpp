// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

// Quantized bundle and its on-disk format.
//
// Layout (all integers little-endian):
//
//   "KBVQMOE1"
//   section*            u64 payload length | payload | u32 CRC-32C(payload)
//   u32 CRC-32C of every preceding byte
//
// The first section is the manifest; then, per group, a group section followed by
// one section per expert.
//
//   manifest : u32 version | u32 flags | u64 seed | u64 config hash |
//              u32 d | u32 bits | u32 iters | f64 k_ratio | u32 group count
//   group    : u16 label length | label | u32 n | u32 oc | u32 ic | u32 k |
//              u64 weights fingerprint | f64 rho_k | f16[k*ic] U_share
//   expert   : f16[oc*k] V_private | u32 pad count | f16[K*d] codebook |
//              packed indices (bits*d per index, LSB first) |
//              [f32[oc] s | f32[oc] b]   (present when BCOS is on)
//
// Factors and codewords are kept in double precision in memory and rounded
// to 16-bit floats on save; a loaded bundle holds the rounded values.

#pragma once

#include <Eigen/Core>
#include <boost/crc.hpp>

#include <array>
#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kbvq/bcos.hpp"
#include "kbvq/error.hpp"
#include "kbvq/matrix.hpp"
#include "kbvq/vq.hpp"

namespace kbvq {

inline constexpr std::array<char, 8> kBundleMagic = {'K', 'B', 'V', 'Q', 'M', 'O', 'E', '1'};
inline constexpr std::uint32_t kBundleVersion = 1;

namespace flags {
inline constexpr std::uint32_t kIdre = 1u << 0;
inline constexpr std::uint32_t kBcos = 1u << 1;
inline constexpr std::uint32_t kKlt = 1u << 2;
inline constexpr std::uint32_t kMmse = 1u << 3;
}  // namespace flags

struct BundleManifest {
  std::uint32_t version = kBundleVersion;
  std::uint32_t flags = 0;
  std::uint64_t seed = 42;
  std::uint64_t config_hash = 0;
  std::uint32_t d = 4;
  std::uint32_t bits = 2;
  std::uint32_t iters = 100;
  double k_ratio = 0.0;

  bool bcos_on() const noexcept { return flags & flags::kBcos; }
  friend bool operator==(const BundleManifest&, const BundleManifest&) = default;
};

struct ExpertPayload {
  Matrix V_private;  // oc x k; 0 columns when nothing is shared
  QuantizedTensor specific;
  std::optional<BiasCorrection> correction;

  friend bool operator==(const ExpertPayload&, const ExpertPayload&) = default;
};

struct GroupPayload {
  std::string role;
  std::size_t oc = 0;
  std::size_t ic = 0;
  std::size_t k = 0;
  std::uint64_t weights_fingerprint = 0;
  double rho_k = 0.0;
  Matrix U_share;  // k x ic
  std::vector<ExpertPayload> experts;

  friend bool operator==(const GroupPayload&, const GroupPayload&) = default;
};

struct QuantizedBundle {
  BundleManifest manifest;
  std::vector<GroupPayload> groups;

  friend bool operator==(const QuantizedBundle&, const QuantizedBundle&) = default;
};

/// Byte attribution of a serialized bundle.
struct BundleLayout {
  std::size_t total_bytes = 0;
  std::size_t shared_bytes = 0;
  std::size_t index_bytes = 0;
  std::size_t codebook_bytes = 0;
  std::size_t bcos_bytes = 0;
  std::size_t weight_count = 0;

  std::size_t overhead_bytes() const {
    return total_bytes - shared_bytes - index_bytes - codebook_bytes - bcos_bytes;
  }
};

inline std::uint32_t crc32c(std::span<const std::uint8_t> bytes) {
  boost::crc_optimal<32, 0x1EDC6F41, 0xFFFFFFFF, 0xFFFFFFFF, true, true> crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

/// FNV-1a over the IEEE-754 bits of every weight, in expert order.
inline std::uint64_t weights_fingerprint(std::span<const Matrix> experts) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xffu;
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& w : experts) {
    mix(w.rows());
    mix(w.cols());
    for (double v : w.data()) mix(std::bit_cast<std::uint64_t>(v));
  }
  return h;
}

inline double round_to_half(double v) {
  return static_cast<double>(static_cast<float>(Eigen::half(static_cast<float>(v))));
}

/// Rounds every stored real to its serialized precision.
inline QuantizedBundle round_to_storage(QuantizedBundle b) {
  for (auto& g : b.groups) {
    for (double& v : g.U_share.data()) v = round_to_half(v);
    for (auto& e : g.experts) {
      for (double& v : e.V_private.data()) v = round_to_half(v);
      for (double& v : e.specific.codebook.words) v = round_to_half(v);
      if (e.correction) {
        for (double& v : e.correction->s) v = static_cast<float>(v);
        for (double& v : e.correction->b) v = static_cast<float>(v);
      }
    }
  }
  return b;
}

namespace detail {

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f16(double v) { u16(std::bit_cast<std::uint16_t>(Eigen::half(static_cast<float>(v)))); }
  void f32(double v) { u32(std::bit_cast<std::uint32_t>(static_cast<float>(v))); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void str(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t>& buffer() { return buf_; }
  std::size_t size() const { return buf_.size(); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  double f16() { return static_cast<double>(static_cast<float>(std::bit_cast<Eigen::half>(u16()))); }
  double f32() { return static_cast<double>(std::bit_cast<float>(u32())); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::span<const std::uint8_t> take(std::size_t n) {
    require(n <= data_.size() - pos_, ErrorKind::kIntegrity, "bundle truncated");
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  std::uint64_t le(int n) {
    auto s = take(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(s[static_cast<std::size_t>(i)]) << (8 * i);
    return v;
  }
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

inline void put_section(ByteWriter& out, ByteWriter& payload) {
  out.u64(payload.size());
  out.bytes(payload.buffer());
  out.u32(crc32c(payload.buffer()));
}

inline std::span<const std::uint8_t> get_section(ByteReader& in) {
  const std::uint64_t len = in.u64();
  require(len <= in.remaining(), ErrorKind::kIntegrity, "section length exceeds bundle size");
  auto payload = in.take(static_cast<std::size_t>(len));
  const std::uint32_t crc = in.u32();
  require(crc == crc32c(payload), ErrorKind::kIntegrity, "section checksum mismatch");
  return payload;
}

inline std::uint32_t narrow32(std::size_t v) {
  require(v <= 0xffffffffu, ErrorKind::kConfig, "dimension does not fit in 32 bits");
  return static_cast<std::uint32_t>(v);
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_bundle(const QuantizedBundle& b) {
  detail::ByteWriter out;
  for (char c : kBundleMagic) out.u8(static_cast<std::uint8_t>(c));
  const auto& m = b.manifest;
  {
    detail::ByteWriter p;
    p.u32(m.version);
    p.u32(m.flags);
    p.u64(m.seed);
    p.u64(m.config_hash);
    p.u32(m.d);
    p.u32(m.bits);
    p.u32(m.iters);
    p.f64(m.k_ratio);
    p.u32(detail::narrow32(b.groups.size()));
    detail::put_section(out, p);
  }
  const std::size_t k_words = std::size_t{1} << (m.bits * m.d);
  for (const auto& g : b.groups) {
    detail::ByteWriter p;
    require(g.role.size() <= 0xffff, ErrorKind::kConfig, "role label too long");
    p.u16(static_cast<std::uint16_t>(g.role.size()));
    p.str(g.role);
    p.u32(detail::narrow32(g.experts.size()));
    p.u32(detail::narrow32(g.oc));
    p.u32(detail::narrow32(g.ic));
    p.u32(detail::narrow32(g.k));
    p.u64(g.weights_fingerprint);
    p.f64(g.rho_k);
    require(g.U_share.rows() == g.k && (g.k == 0 || g.U_share.cols() == g.ic), ErrorKind::kShape,
            "U_share shape does not match group");
    for (double v : g.U_share.data()) p.f16(v);
    detail::put_section(out, p);

    for (const auto& e : g.experts) {
      detail::ByteWriter q;
      require(e.V_private.rows() * e.V_private.cols() == g.oc * g.k, ErrorKind::kShape,
              "V_private shape does not match group");
      for (double v : e.V_private.data()) q.f16(v);
      q.u32(detail::narrow32(e.specific.pad_count));
      require(e.specific.codebook.size() == k_words && e.specific.d == m.d, ErrorKind::kShape,
              "codebook size does not match manifest");
      for (double v : e.specific.codebook.words) q.f16(v);
      q.bytes(pack_indices(e.specific.indices, m.bits * m.d));
      require(e.correction.has_value() == m.bcos_on(), ErrorKind::kContract,
              "correction presence disagrees with the BCOS flag");
      if (e.correction) {
        for (double v : e.correction->s) q.f32(v);
        for (double v : e.correction->b) q.f32(v);
      }
      detail::put_section(out, q);
    }
  }
  out.u32(crc32c(out.buffer()));
  return std::move(out.buffer());
}

/// Parses and verifies a serialized bundle; `layout` receives the byte attribution.
inline QuantizedBundle parse_bundle(std::span<const std::uint8_t> bytes, BundleLayout* layout = nullptr) {
  require(bytes.size() >= kBundleMagic.size() + 4, ErrorKind::kIntegrity, "bundle too short");
  require(std::memcmp(bytes.data(), kBundleMagic.data(), kBundleMagic.size()) == 0, ErrorKind::kIntegrity,
          "bad bundle magic");
  const auto body = bytes.first(bytes.size() - 4);
  detail::ByteReader tail(bytes.last(4));
  require(tail.u32() == crc32c(body), ErrorKind::kIntegrity, "bundle checksum mismatch");

  BundleLayout lay;
  lay.total_bytes = bytes.size();
  detail::ByteReader in(body);
  in.take(kBundleMagic.size());

  QuantizedBundle b;
  std::size_t group_count = 0;
  {
    detail::ByteReader p(detail::get_section(in));
    auto& m = b.manifest;
    m.version = p.u32();
    require(m.version == kBundleVersion, ErrorKind::kIntegrity,
            "unsupported bundle version " + std::to_string(m.version));
    m.flags = p.u32();
    m.seed = p.u64();
    m.config_hash = p.u64();
    m.d = p.u32();
    m.bits = p.u32();
    m.iters = p.u32();
    m.k_ratio = p.f64();
    group_count = p.u32();
    require(m.d >= 1 && m.bits >= 1 && m.bits * m.d <= 24, ErrorKind::kIntegrity, "manifest VQ shape invalid");
  }
  const auto& m = b.manifest;
  const std::size_t k_words = std::size_t{1} << (m.bits * m.d);
  const unsigned index_bits = m.bits * m.d;
  for (std::size_t gi = 0; gi < group_count; ++gi) {
    GroupPayload g;
    std::size_t n = 0;
    {
      detail::ByteReader p(detail::get_section(in));
      const std::size_t len = p.u16();
      auto label = p.take(len);
      g.role.assign(label.begin(), label.end());
      n = p.u32();
      g.oc = p.u32();
      g.ic = p.u32();
      g.k = p.u32();
      g.weights_fingerprint = p.u64();
      g.rho_k = p.f64();
      require(g.k <= g.ic, ErrorKind::kIntegrity, "group rank exceeds input dimension");
      require(p.remaining() == g.k * g.ic * 2, ErrorKind::kIntegrity, "group section size mismatch");
      g.U_share = Matrix(g.k, g.k ? g.ic : 0);
      for (double& v : g.U_share.data()) v = p.f16();
      lay.shared_bytes += g.k * g.ic * 2;
    }
    const std::size_t total = g.oc * g.ic;
    const std::size_t count = (total + m.d - 1) / m.d;
    for (std::size_t e = 0; e < n; ++e) {
      detail::ByteReader p(detail::get_section(in));
      ExpertPayload x;
      x.V_private = Matrix(g.oc, g.k);
      for (double& v : x.V_private.data()) v = p.f16();
      x.specific.oc = g.oc;
      x.specific.ic = g.ic;
      x.specific.d = m.d;
      x.specific.pad_count = p.u32();
      require(x.specific.pad_count == count * m.d - total, ErrorKind::kIntegrity, "pad count mismatch");
      x.specific.codebook.d = m.d;
      x.specific.codebook.words.resize(k_words * m.d);
      for (double& v : x.specific.codebook.words) v = p.f16();
      const std::size_t packed = (count * index_bits + 7) / 8;
      x.specific.indices = unpack_indices(p.take(packed), count, index_bits);
      if (m.bcos_on()) {
        BiasCorrection c;
        c.method = (m.flags & flags::kMmse) ? BcosMethod::kMmseRegression : BcosMethod::kVarianceMatch;
        c.s.resize(g.oc);
        c.b.resize(g.oc);
        for (double& v : c.s) v = p.f32();
        for (double& v : c.b) v = p.f32();
        x.correction = std::move(c);
        lay.bcos_bytes += g.oc * 8;
      }
      require(p.remaining() == 0, ErrorKind::kIntegrity, "trailing bytes in expert section");
      lay.shared_bytes += g.oc * g.k * 2;
      lay.codebook_bytes += k_words * m.d * 2;
      lay.index_bytes += packed;
      lay.weight_count += total;
      g.experts.push_back(std::move(x));
    }
    b.groups.push_back(std::move(g));
  }
  require(in.remaining() == 0, ErrorKind::kIntegrity, "trailing bytes after last section");
  if (layout) *layout = lay;
  return b;
}

inline void save_bundle(const QuantizedBundle& b, const std::filesystem::path& path) {
  const auto bytes = serialize_bundle(b);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(f), ErrorKind::kIo, "write to '" + path.string() + "' failed");
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline QuantizedBundle load_bundle(const std::filesystem::path& path, BundleLayout* layout = nullptr) {
  const auto bytes = read_file_bytes(path);
  return parse_bundle(bytes, layout);
}

/// Ŵ = V_private U_share + reconstruct(specific), uncorrected.
inline Matrix reconstruct_expert(const GroupPayload& g, std::size_t expert) {
  const ExpertPayload& e = g.experts.at(expert);
  Matrix w = reconstruct(e.specific);
  if (g.k > 0) w = w + matmul(e.V_private, g.U_share);
  return w;
}

}  // namespace kbvq
