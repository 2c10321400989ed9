// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

// Tensor interchange: a JSON manifest next to a raw blob of little-endian
// f32 values, row-major.
//
//   {"format": "kbvq-tensors", "version": 1, "blob": "weights.bin",
//    "tensors": [{"name": "w.0", "dtype": "f32", "shape": [64, 128], "offset": 0}, ...]}
//
// "blob" is resolved relative to the manifest; "offset" is in bytes.

#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "kbvq/bundle.hpp"
#include "kbvq/error.hpp"
#include "kbvq/matrix.hpp"

namespace kbvq {

inline constexpr const char* kTensorFormat = "kbvq-tensors";

struct NamedTensor {
  std::string name;
  Matrix value;
};

class TensorFile {
 public:
  TensorFile() = default;
  explicit TensorFile(std::vector<NamedTensor> tensors) : tensors_(std::move(tensors)) {}

  const std::vector<NamedTensor>& tensors() const noexcept { return tensors_; }
  void add(std::string name, Matrix value) { tensors_.push_back({std::move(name), std::move(value)}); }

  bool contains(const std::string& name) const { return find(name) != nullptr; }

  const Matrix& at(const std::string& name) const {
    const NamedTensor* t = find(name);
    require(t != nullptr, ErrorKind::kConfig, "tensor '" + name + "' not found");
    return t->value;
  }

 private:
  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors_)
      if (t.name == name) return &t;
    return nullptr;
  }
  std::vector<NamedTensor> tensors_;
};

/// Writes `<manifest>` and the blob `<manifest stem>.bin` beside it.
inline void save_tensor_file(const TensorFile& tf, const std::filesystem::path& manifest_path) {
  std::filesystem::path blob_path = manifest_path;
  blob_path.replace_extension(".bin");
  nlohmann::json j;
  j["format"] = kTensorFormat;
  j["version"] = 1;
  j["blob"] = blob_path.filename().string();
  j["tensors"] = nlohmann::json::array();
  detail::ByteWriter blob;
  for (const auto& t : tf.tensors()) {
    j["tensors"].push_back({{"name", t.name},
                            {"dtype", "f32"},
                            {"shape", {t.value.rows(), t.value.cols()}},
                            {"offset", blob.size()}});
    for (double v : t.value.data()) blob.f32(v);
  }
  {
    std::ofstream f(blob_path, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(f), ErrorKind::kIo, "cannot open '" + blob_path.string() + "' for writing");
    f.write(reinterpret_cast<const char*>(blob.buffer().data()), static_cast<std::streamsize>(blob.size()));
    require(static_cast<bool>(f), ErrorKind::kIo, "write to '" + blob_path.string() + "' failed");
  }
  std::ofstream f(manifest_path, std::ios::trunc);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open '" + manifest_path.string() + "' for writing");
  f << j.dump(2) << '\n';
  require(static_cast<bool>(f), ErrorKind::kIo, "write to '" + manifest_path.string() + "' failed");
}

inline TensorFile load_tensor_file(const std::filesystem::path& manifest_path) {
  std::ifstream f(manifest_path);
  require(static_cast<bool>(f), ErrorKind::kIo, "cannot open '" + manifest_path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kIntegrity, "tensor manifest is not valid JSON: " + std::string(e.what()));
  }
  TensorFile out;
  try {
    require(j.at("format").get<std::string>() == kTensorFormat, ErrorKind::kIntegrity,
            "unexpected tensor manifest format");
    require(j.at("version").get<int>() == 1, ErrorKind::kIntegrity, "unsupported tensor manifest version");
    const auto blob_path = manifest_path.parent_path() / j.at("blob").get<std::string>();
    const std::vector<std::uint8_t> blob = read_file_bytes(blob_path);
    for (const auto& t : j.at("tensors")) {
      const auto name = t.at("name").get<std::string>();
      require(t.at("dtype").get<std::string>() == "f32", ErrorKind::kIntegrity,
              "tensor '" + name + "' has unsupported dtype");
      const auto shape = t.at("shape").get<std::vector<std::size_t>>();
      require(shape.size() == 1 || shape.size() == 2, ErrorKind::kIntegrity,
              "tensor '" + name + "' must be 1-D or 2-D");
      const std::size_t rows = shape.size() == 2 ? shape[0] : 1;
      const std::size_t cols = shape.back();
      const auto offset = t.at("offset").get<std::size_t>();
      require(offset % 4 == 0 && offset <= blob.size() && rows * cols <= (blob.size() - offset) / 4,
              ErrorKind::kIntegrity, "tensor '" + name + "' extends past the blob");
      Matrix m(rows, cols);
      detail::ByteReader in(std::span<const std::uint8_t>(blob).subspan(offset, rows * cols * 4));
      for (double& v : m.data()) v = in.f32();
      require(all_finite(m), ErrorKind::kIntegrity, "tensor '" + name + "' contains non-finite values");
      out.add(name, std::move(m));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kIntegrity, "malformed tensor manifest: " + std::string(e.what()));
  }
  return out;
}

}  // namespace kbvq
