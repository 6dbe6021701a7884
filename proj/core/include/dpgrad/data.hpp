// Copyright (c) 2026 The dpgrad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpgrad/rng.hpp"
#include "dpgrad/tensor.hpp"

namespace dpgrad {

/// In-memory dataset: features [N, ...], targets [N] (class indices) or
/// [N, k] (regression). Read-shared.
struct Dataset {
  Tensor<float> features;
  Tensor<float> targets;

  std::size_t size() const { return features.rank() == 0 ? 0 : features.extent(0); }
};

/// DP-correct batch sampler: every index is included independently with
/// probability sample_rate, so empty batches are a legal outcome and are
/// delivered to the trainer rather than redrawn.
class PoissonSampler {
 public:
  PoissonSampler(double sample_rate, std::size_t dataset_size, RngStream rng);

  /// Ascending index list; may be empty.
  std::vector<std::size_t> next_batch();

  double sample_rate() const { return sample_rate_; }
  /// Batch size may vary over training; the accountant records q per step.
  void set_sample_rate(double q);
  std::size_t dataset_size() const { return n_; }
  double expected_batch_size() const { return sample_rate_ * static_cast<double>(n_); }

 private:
  double sample_rate_;
  std::size_t n_;
  RngStream rng_;
};

/// Non-DP baseline loader: a seeded permutation split into fixed-size
/// batches covering every index exactly once.
std::vector<std::vector<std::size_t>> uniform_batches(std::size_t n, std::size_t batch_size,
                                                      std::uint64_t shuffle_seed);

/// RFC-4180-style CSV with a required header row. Selected columns are
/// parsed as floats; parse failures report the 1-based line number.
Dataset load_csv(const std::string& path, const std::vector<std::string>& feature_columns,
                 const std::string& target_column);

/// IDX image/label pair (big-endian magics 0x00000803 / 0x00000801).
/// Pixels are scaled to [0, 1]; features come out as [N, rows, cols].
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

/// Synthetic Gaussian blob classification task; deterministic per seed.
Dataset make_blobs(std::size_t n, std::size_t features, std::size_t classes, std::uint64_t seed,
                   double spread = 0.5);

}  // namespace dpgrad
