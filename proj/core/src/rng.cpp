// Copyright (c) 2026 The dpgrad authors
// SPDX-License-Identifier: Apache-2.0

#include "dpgrad/rng.hpp"

#include <cmath>
#include <numbers>

#include "dpgrad/errors.hpp"

namespace dpgrad {

RngStream::RngStream(Kind kind) : kind_(kind) {}

RngStream RngStream::standard(std::uint64_t seed) {
  RngStream s(Kind::standard);
  s.engine_.seed(seed);
  return s;
}

RngStream RngStream::secure() {
  RngStream s(Kind::secure);
  s.device_ = std::make_unique<std::random_device>();
  return s;
}

std::uint64_t RngStream::next_u64() {
  if (kind_ == Kind::standard) {
    return engine_();
  }
  const std::uint64_t hi = (*device_)();
  const std::uint64_t lo = (*device_)();
  return (hi << 32) | (lo & 0xffffffffu);
}

double RngStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  if (has_spare_normal_) {
    has_spare_normal_ = false;
    return spare_normal_;
  }
  // u1 in (0, 1] so log(u1) is finite.
  const double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_normal_ = r * std::sin(theta);
  has_spare_normal_ = true;
  return r * std::cos(theta);
}

std::uint64_t RngStream::below(std::uint64_t n) {
  if (n == 0) {
    throw ParameterError("RngStream::below requires n > 0");
  }
  // Rejection sampling to avoid modulo bias.
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  std::uint64_t x = next_u64();
  while (x >= limit) {
    x = next_u64();
  }
  return x % n;
}

}  // namespace dpgrad
