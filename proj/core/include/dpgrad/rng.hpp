// Copyright (c) 2026 The dpgrad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <memory>
#include <random>

namespace dpgrad {

/// Random stream with two kinds: a deterministic, seedable stream
/// (mt19937_64, reproducible bit-for-bit for a given seed) and a secure
/// stream drawing from OS entropy that cannot be seeded.
///
/// Streams are single-owner: not safe for concurrent draws.
class RngStream {
 public:
  enum class Kind { standard, secure };

  static RngStream standard(std::uint64_t seed);
  static RngStream secure();

  Kind kind() const { return kind_; }

  std::uint64_t next_u64();

  /// Uniform in [0, 1), 53-bit resolution.
  double uniform();

  /// Standard normal via Box-Muller on this stream's uniforms.
  /// One transform for both stream kinds.
  double normal();

  /// Uniform integer in [0, n). n must be > 0.
  std::uint64_t below(std::uint64_t n);

 private:
  explicit RngStream(Kind kind);

  Kind kind_;
  std::mt19937_64 engine_;
  std::unique_ptr<std::random_device> device_;
  bool has_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace dpgrad
