// Copyright (c) 2026 The dpgrad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace dpgrad {

// Base class for all dpgrad errors.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape or extent mismatch between tensors or layers.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid argument value: negative std, out-of-range index, bad hyperparameter.
class ParameterError : public Error {
 public:
  using Error::Error;
};

// Operation called out of order in the gradient lifecycle
// (grad_sample -> summed_grad -> grad -> cleared).
class LifecycleError : public Error {
 public:
  using Error::Error;
};

// Grad-sample rule registry misuse: missing rule or duplicate registration.
class RegistryError : public Error {
 public:
  using Error::Error;
};

// Non-finite values where finite ones are required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Malformed input file: CSV, IDX, model description.
class IngestionError : public Error {
 public:
  using Error::Error;
};

// Noise calibration could not reach the target privacy budget.
class CalibrationError : public Error {
 public:
  using Error::Error;
};

// Model failed DP-compatibility validation. Carries the violation lines
// exactly as the validator reports them.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& what, std::vector<std::string> violation_lines)
      : Error(what), violation_lines_(std::move(violation_lines)) {}

  const std::vector<std::string>& violation_lines() const { return violation_lines_; }

 private:
  std::vector<std::string> violation_lines_;
};

}  // namespace dpgrad
