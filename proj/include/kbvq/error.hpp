// Copyright 2026 The kbvq-moe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace kbvq {

/// Failure categories. The CLI maps them onto process exit codes.
enum class ErrorKind {
  kShape,        // dimension mismatch between operands
  kDegenerate,   // too few samples, singular basis, all-zero spectrum
  kRank,         // truncation rank outside [1, ic]
  kConfig,       // contradictory or out-of-range configuration
  kIntegrity,    // corrupt bundle, bad checksum, out-of-range index
  kIo,           // unreadable or unwritable file
  kContract,     // caller violated an operation precondition
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Exit code convention: 0 success, 2 config error, 3 integrity error, 4 IO error.
inline int exit_code_for(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::kIntegrity:
      return 3;
    case ErrorKind::kIo:
      return 4;
    default:
      return 2;
  }
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace kbvq
