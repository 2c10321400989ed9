// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>

#include "support.hpp"

namespace kbvq {
namespace {

using testing::random_matrix;
using testing::thrown_kind;

namespace fs = std::filesystem;

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("kbvq_test_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

QuantizedBundle small_bundle(bool bcos, double k_ratio = 0.25) {
  SynthConfig sc;
  sc.d_model = 8;
  sc.oc = 6;
  sc.n = 3;
  sc.top_k = 1;
  sc.shared_rank = 2;
  sc.calib_rows = 32;
  sc.eval_rows = 4;
  const SynthLayer s = synth_layer(sc);
  PipelineConfig cfg;
  cfg.k_ratio = k_ratio;
  cfg.vq.d = 2;
  cfg.vq.bits = 2;
  cfg.vq.iters = 10;
  cfg.bcos_on = bcos;
  return quantize_layer(cfg, s.layer, s.calib);
}

TEST(Crc32c, KnownVector) {
  const std::string s = "123456789";
  const std::vector<std::uint8_t> b(s.begin(), s.end());
  EXPECT_EQ(crc32c(b), 0xE3069283u);
  EXPECT_EQ(crc32c({}), 0u);
}

TEST(Bundle, RoundTripEqualsStoragePrecision) {
  for (bool bcos : {false, true})
    for (double kr : {0.0, 0.25}) {
      const QuantizedBundle b = small_bundle(bcos, kr);
      const auto bytes = serialize_bundle(b);
      const QuantizedBundle parsed = parse_bundle(bytes);
      EXPECT_EQ(parsed, round_to_storage(b));
      EXPECT_EQ(serialize_bundle(parsed), bytes);
    }
}

TEST(Bundle, StoragePrecision) {
  EXPECT_EQ(round_to_half(1.0), 1.0);
  EXPECT_EQ(round_to_half(1.0 + 1.0 / 4096.0), 1.0);
  EXPECT_EQ(round_to_half(65504.0), 65504.0);
  const QuantizedBundle once = round_to_storage(small_bundle(true));
  EXPECT_EQ(round_to_storage(once), once);
}

TEST(Bundle, HeaderLayoutIsLittleEndian) {
  const auto bytes = serialize_bundle(small_bundle(true));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "KBVQMOE1");
  // Manifest section: u64 length, then version, flags, seed.
  const std::vector<std::uint8_t> len(bytes.begin() + 8, bytes.begin() + 16);
  EXPECT_EQ(len, (std::vector<std::uint8_t>{48, 0, 0, 0, 0, 0, 0, 0}));
  EXPECT_EQ(bytes[16], 1);
  EXPECT_EQ(bytes[17], 0);
  EXPECT_EQ(bytes[24], 42);
  for (int i = 25; i < 32; ++i) EXPECT_EQ(bytes[static_cast<std::size_t>(i)], 0);
  // Trailing CRC-32C over everything before it.
  const std::size_t n = bytes.size();
  const std::uint32_t crc = crc32c(std::span<const std::uint8_t>(bytes).first(n - 4));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(bytes[n - 4 + static_cast<std::size_t>(i)], (crc >> (8 * i)) & 0xffu);
}

TEST(Bundle, EveryFlippedBitIsDetected) {
  const auto bytes = serialize_bundle(small_bundle(true));
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    auto bad = bytes;
    bad[i] ^= static_cast<std::uint8_t>(1u << (i % 8));
    EXPECT_EQ(thrown_kind([&] { parse_bundle(bad); }), ErrorKind::kIntegrity) << "byte " << i;
  }
}

TEST(Bundle, TruncationAndTrailingBytes) {
  const auto bytes = serialize_bundle(small_bundle(false));
  for (std::size_t cut : {std::size_t{0}, std::size_t{5}, std::size_t{12}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_EQ(thrown_kind([&] { parse_bundle(t); }), ErrorKind::kIntegrity) << "cut " << cut;
  }
  auto longer = bytes;
  longer.push_back(0);
  EXPECT_EQ(thrown_kind([&] { parse_bundle(longer); }), ErrorKind::kIntegrity);
}

TEST(Bundle, UnknownVersionRejected) {
  QuantizedBundle b = small_bundle(false);
  b.manifest.version = 2;
  EXPECT_EQ(thrown_kind([&] { parse_bundle(serialize_bundle(b)); }), ErrorKind::kIntegrity);
}

TEST(Bundle, InconsistentPayloadRefusedOnWrite) {
  QuantizedBundle b = small_bundle(true);
  b.groups[0].experts[1].correction.reset();
  EXPECT_EQ(thrown_kind([&] { serialize_bundle(b); }), ErrorKind::kContract);
  b = small_bundle(false);
  b.groups[0].experts[0].specific.codebook.words.pop_back();
  EXPECT_EQ(thrown_kind([&] { serialize_bundle(b); }), ErrorKind::kShape);
}

TEST(Bundle, FileRoundTripAndIoErrors) {
  TempDir dir;
  const QuantizedBundle b = small_bundle(true);
  const fs::path p = dir.path / "layer.kbvq";
  save_bundle(b, p);
  BundleLayout lay;
  EXPECT_EQ(load_bundle(p, &lay), round_to_storage(b));
  EXPECT_EQ(lay.total_bytes, fs::file_size(p));
  EXPECT_EQ(read_file_bytes(p), serialize_bundle(b));
  EXPECT_EQ(thrown_kind([&] { load_bundle(dir.path / "missing.kbvq"); }), ErrorKind::kIo);
  EXPECT_EQ(thrown_kind([&] { save_bundle(b, dir.path / "no" / "such" / "dir.kbvq"); }), ErrorKind::kIo);
}

TEST(Bundle, ReconstructExpert) {
  const QuantizedBundle b = small_bundle(false);
  const GroupPayload& g = b.groups[0];
  ASSERT_GT(g.k, 0u);
  for (std::size_t e = 0; e < g.experts.size(); ++e) {
    const Matrix want = reconstruct(g.experts[e].specific) + matmul(g.experts[e].V_private, g.U_share);
    EXPECT_EQ(reconstruct_expert(g, e), want);
  }
}

TEST(WeightsFingerprint, SensitiveToValuesAndShape) {
  std::vector<Matrix> a = {random_matrix(2, 3, 1), random_matrix(2, 3, 2)};
  const std::uint64_t h = weights_fingerprint(a);
  EXPECT_EQ(weights_fingerprint(a), h);
  auto b = a;
  b[1](1, 2) = std::nextafter(b[1](1, 2), 10.0);
  EXPECT_NE(weights_fingerprint(b), h);
  std::vector<Matrix> swapped = {a[1], a[0]};
  EXPECT_NE(weights_fingerprint(swapped), h);
  std::vector<Matrix> reshaped = {Matrix(3, 2, std::vector<double>(a[0].data().begin(), a[0].data().end())), a[1]};
  EXPECT_NE(weights_fingerprint(reshaped), h);
}

TEST(TensorFile, RoundTripAtF32) {
  TempDir dir;
  TensorFile tf;
  tf.add("router", random_matrix(3, 5, 1));
  tf.add("w.0", random_matrix(4, 5, 2));
  tf.add("bias", Matrix{{1.5, -2.25}});
  save_tensor_file(tf, dir.path / "weights.json");
  EXPECT_TRUE(fs::exists(dir.path / "weights.bin"));
  const TensorFile back = load_tensor_file(dir.path / "weights.json");
  ASSERT_EQ(back.tensors().size(), 3u);
  for (const auto& t : tf.tensors()) {
    const Matrix& got = back.at(t.name);
    ASSERT_TRUE(got.same_shape(t.value));
    for (std::size_t i = 0; i < got.size(); ++i)
      EXPECT_EQ(got.data()[i], static_cast<double>(static_cast<float>(t.value.data()[i])));
  }
  EXPECT_TRUE(back.contains("bias"));
  EXPECT_FALSE(back.contains("gate"));
  EXPECT_EQ(thrown_kind([&] { back.at("gate"); }), ErrorKind::kConfig);
  EXPECT_EQ(fs::file_size(dir.path / "weights.bin"), 4u * (15 + 20 + 2));
}

TEST(TensorFile, OneDimensionalShape) {
  TempDir dir;
  {
    std::ofstream(dir.path / "v.bin", std::ios::binary).write("\x00\x00\x80\x3f\x00\x00\x00\x40", 8);
    std::ofstream(dir.path / "v.json")
        << R"({"format":"kbvq-tensors","version":1,"blob":"v.bin","tensors":[{"name":"x","dtype":"f32","shape":[2],"offset":0}]})";
  }
  const TensorFile tf = load_tensor_file(dir.path / "v.json");
  EXPECT_EQ(tf.at("x"), (Matrix{{1.0, 2.0}}));
}

TEST(TensorFile, Errors) {
  TempDir dir;
  EXPECT_EQ(thrown_kind([&] { load_tensor_file(dir.path / "none.json"); }), ErrorKind::kIo);

  auto write = [&](const std::string& manifest) { std::ofstream(dir.path / "t.json") << manifest; };
  std::ofstream(dir.path / "t.bin", std::ios::binary).write("\x00\x00\x80\x3f\x00\x00\xc0\x7f", 8);

  write("{not json");
  EXPECT_EQ(thrown_kind([&] { load_tensor_file(dir.path / "t.json"); }), ErrorKind::kIntegrity);
  write(R"({"format":"other","version":1,"blob":"t.bin","tensors":[]})");
  EXPECT_EQ(thrown_kind([&] { load_tensor_file(dir.path / "t.json"); }), ErrorKind::kIntegrity);
  write(R"({"format":"kbvq-tensors","version":1,"blob":"t.bin","tensors":[{"name":"a","dtype":"f16","shape":[1],"offset":0}]})");
  EXPECT_EQ(thrown_kind([&] { load_tensor_file(dir.path / "t.json"); }), ErrorKind::kIntegrity);
  write(R"({"format":"kbvq-tensors","version":1,"blob":"t.bin","tensors":[{"name":"a","dtype":"f32","shape":[3],"offset":0}]})");
  EXPECT_EQ(thrown_kind([&] { load_tensor_file(dir.path / "t.json"); }), ErrorKind::kIntegrity);
  // Second float is a NaN.
  write(R"({"format":"kbvq-tensors","version":1,"blob":"t.bin","tensors":[{"name":"a","dtype":"f32","shape":[2],"offset":0}]})");
  EXPECT_EQ(thrown_kind([&] { load_tensor_file(dir.path / "t.json"); }), ErrorKind::kIntegrity);
  write(R"({"format":"kbvq-tensors","version":1,"blob":"t.bin","tensors":[{"name":"a","dtype":"f32","shape":[1],"offset":0}]})");
  EXPECT_EQ(load_tensor_file(dir.path / "t.json").at("a"), (Matrix{{1.0}}));
  write(R"({"format":"kbvq-tensors","version":1,"blob":"gone.bin","tensors":[]})");
  EXPECT_EQ(thrown_kind([&] { load_tensor_file(dir.path / "t.json"); }), ErrorKind::kIo);
}

}  // namespace
}  // namespace kbvq
