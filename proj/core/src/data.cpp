// Copyright (c) 2026 The dpgrad authors
// SPDX-License-Identifier: Apache-2.0

#include "dpgrad/data.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "dpgrad/errors.hpp"

namespace dpgrad {

PoissonSampler::PoissonSampler(double sample_rate, std::size_t dataset_size, RngStream rng)
    : sample_rate_(sample_rate), n_(dataset_size), rng_(std::move(rng)) {
  if (!(sample_rate > 0.0) || sample_rate > 1.0) {
    throw ParameterError("Poisson sample rate must lie in (0, 1], got " +
                         std::to_string(sample_rate));
  }
  if (dataset_size == 0) throw ParameterError("Poisson sampler needs a non-empty dataset");
}

void PoissonSampler::set_sample_rate(double q) {
  if (!(q > 0.0) || q > 1.0) {
    throw ParameterError("Poisson sample rate must lie in (0, 1], got " + std::to_string(q));
  }
  sample_rate_ = q;
}

std::vector<std::size_t> PoissonSampler::next_batch() {
  std::vector<std::size_t> batch;
  for (std::size_t i = 0; i < n_; ++i) {
    if (rng_.uniform() < sample_rate_) batch.push_back(i);
  }
  return batch;
}

std::vector<std::vector<std::size_t>> uniform_batches(std::size_t n, std::size_t batch_size,
                                                      std::uint64_t shuffle_seed) {
  if (batch_size == 0) throw ParameterError("uniform_batches: batch size must be positive");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  RngStream rng = RngStream::standard(shuffle_seed);
  // Fisher-Yates so the permutation does not depend on the stdlib's shuffle.
  for (std::size_t i = n; i > 1; --i) {
    std::swap(perm[i - 1], perm[rng.below(i)]);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t end = std::min(n, start + batch_size);
    batches.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(start),
                         perm.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

namespace {

// Splits one CSV record, honoring double-quoted fields with "" escapes.
std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  if (quoted) {
    throw IngestionError("csv line " + std::to_string(line_no) + ": unterminated quoted field");
  }
  fields.push_back(std::move(cur));
  return fields;
}

float parse_float_field(const std::string& field, std::size_t line_no, const std::string& col) {
  try {
    std::size_t consumed = 0;
    const float v = std::stof(field, &consumed);
    if (consumed != field.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw IngestionError("csv line " + std::to_string(line_no) + ": column '" + col +
                         "' value '" + field + "' is not numeric");
  }
}

std::uint32_t read_be_u32(std::ifstream& f, const std::string& path, const char* what) {
  unsigned char buf[4];
  if (!f.read(reinterpret_cast<char*>(buf), 4)) {
    throw IngestionError(path + ": truncated while reading " + what + " at offset " +
                         std::to_string(static_cast<long long>(f.tellg())));
  }
  return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
         (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

}  // namespace

Dataset load_csv(const std::string& path, const std::vector<std::string>& feature_columns,
                 const std::string& target_column) {
  std::ifstream f(path);
  if (!f) throw IngestionError("cannot open csv file '" + path + "'");
  std::string line;
  if (!std::getline(f, line)) throw IngestionError(path + ": missing header row");
  const std::vector<std::string> header = split_csv_line(line, 1);

  auto column_index = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (header[i] == name) return i;
    }
    throw IngestionError(path + ": header has no column '" + name + "'");
  };
  std::vector<std::size_t> feat_idx;
  for (const auto& c : feature_columns) feat_idx.push_back(column_index(c));
  const std::size_t target_idx = column_index(target_column);

  std::vector<float> features;
  std::vector<float> targets;
  std::size_t line_no = 1;
  while (std::getline(f, line)) {
    ++line_no;
    if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
    const std::vector<std::string> fields = split_csv_line(line, line_no);
    if (fields.size() != header.size()) {
      throw IngestionError("csv line " + std::to_string(line_no) + ": expected " +
                           std::to_string(header.size()) + " fields, got " +
                           std::to_string(fields.size()));
    }
    for (std::size_t i = 0; i < feat_idx.size(); ++i) {
      features.push_back(
          parse_float_field(fields[feat_idx[i]], line_no, feature_columns[i]));
    }
    targets.push_back(parse_float_field(fields[target_idx], line_no, target_column));
  }
  const std::size_t rows = targets.size();
  Dataset ds;
  ds.features = Tensor<float>({rows, feature_columns.size()}, std::move(features));
  ds.targets = Tensor<float>({rows}, std::move(targets));
  return ds;
}

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream imgs(images_path, std::ios::binary);
  if (!imgs) throw IngestionError("cannot open idx image file '" + images_path + "'");
  const std::uint32_t img_magic = read_be_u32(imgs, images_path, "magic");
  if (img_magic != 0x00000803u) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "0x%08x", img_magic);
    throw IngestionError(images_path + ": bad image magic " + buf + ", expected 0x00000803");
  }
  const std::uint32_t count = read_be_u32(imgs, images_path, "image count");
  const std::uint32_t rows = read_be_u32(imgs, images_path, "row count");
  const std::uint32_t cols = read_be_u32(imgs, images_path, "column count");
  const std::size_t pixels = std::size_t(count) * rows * cols;
  std::vector<unsigned char> raw(pixels);
  if (!imgs.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(pixels))) {
    throw IngestionError(images_path + ": truncated pixel data; expected " +
                         std::to_string(pixels) + " bytes");
  }

  std::ifstream labels(labels_path, std::ios::binary);
  if (!labels) throw IngestionError("cannot open idx label file '" + labels_path + "'");
  const std::uint32_t lab_magic = read_be_u32(labels, labels_path, "magic");
  if (lab_magic != 0x00000801u) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "0x%08x", lab_magic);
    throw IngestionError(labels_path + ": bad label magic " + buf + ", expected 0x00000801");
  }
  const std::uint32_t lab_count = read_be_u32(labels, labels_path, "label count");
  if (lab_count != count) {
    throw IngestionError(labels_path + ": label count " + std::to_string(lab_count) +
                         " does not match image count " + std::to_string(count));
  }
  std::vector<unsigned char> raw_labels(lab_count);
  if (!labels.read(reinterpret_cast<char*>(raw_labels.data()),
                   static_cast<std::streamsize>(lab_count))) {
    throw IngestionError(labels_path + ": truncated label data; expected " +
                         std::to_string(lab_count) + " bytes");
  }

  Dataset ds;
  ds.features = Tensor<float>({count, rows, cols});
  for (std::size_t i = 0; i < pixels; ++i) {
    ds.features[i] = static_cast<float>(raw[i]) / 255.0f;
  }
  ds.targets = Tensor<float>({lab_count});
  for (std::size_t i = 0; i < lab_count; ++i) {
    ds.targets[i] = static_cast<float>(raw_labels[i]);
  }
  return ds;
}

Dataset make_blobs(std::size_t n, std::size_t features, std::size_t classes, std::uint64_t seed,
                   double spread) {
  if (n == 0 || features == 0 || classes == 0) {
    throw ParameterError("make_blobs: extents must be positive");
  }
  RngStream rng = RngStream::standard(seed);
  Tensor<float> centers = uniform<float>({classes, features}, -2.0, 2.0, rng);
  Dataset ds;
  ds.features = Tensor<float>({n, features});
  ds.targets = Tensor<float>({n});
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t cls = i % classes;
    for (std::size_t j = 0; j < features; ++j) {
      ds.features(i, j) =
          centers(cls, j) + static_cast<float>(rng.normal() * spread);
    }
    ds.targets[i] = static_cast<float>(cls);
  }
  return ds;
}

}  // namespace dpgrad
