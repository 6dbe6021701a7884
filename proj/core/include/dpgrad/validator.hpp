// Copyright (c) 2026 The dpgrad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dpgrad/grad_sample.hpp"
#include "dpgrad/layers.hpp"

namespace dpgrad {

/// One DP-incompatibility found in a model. Violations are data, not
/// errors; an empty list means the model is trainable.
struct Violation {
  std::size_t layer_index = 0;
  LayerKind kind = LayerKind::relu;
  std::string reason;
  bool fixable = false;
  std::optional<LayerDescriptor> suggested_replacement;
};

/// `layer=<i> kind=<k> reason=<text>`, the CLI line format.
std::string violation_line(const Violation& v);

/// Check a descriptor stack for configurations that break per-sample
/// gradient semantics. The checks mirror the documented ones and are not
/// exhaustive; sample-independence of custom computations is not verifiable
/// here.
///
/// registered_rule_keys lists the grad-sample rules available for custom
/// kinds; built-in kinds are covered by the default registry.
std::vector<Violation> validate(const std::vector<LayerDescriptor>& layers,
                                const std::vector<std::string>& registered_rule_keys);

std::vector<Violation> validate(const std::vector<LayerDescriptor>& layers);

template <typename T>
std::vector<Violation> validate(const ModelGraph<T>& model,
                                const GradSamplerRegistry<T>& registry = default_registry<T>()) {
  return validate(model.descriptors(), registry.rule_keys());
}

/// Rewrite the fixable violations: batch_norm becomes group_norm with the
/// same channel count (groups = largest divisor of channels that is <= 32),
/// and instance_norm has its running-stats flag cleared. Anything else is
/// left untouched.
std::vector<LayerDescriptor> suggest_fix(const std::vector<LayerDescriptor>& layers);

/// Same rewrite on a built model; parameters of replaced layers are
/// re-initialized, all others are copied through.
template <typename T>
ModelGraph<T> suggest_fix(const ModelGraph<T>& model, RngStream& rng) {
  const std::vector<LayerDescriptor> fixed = suggest_fix(model.descriptors());
  ModelGraph<T> out;
  out.layers.reserve(fixed.size());
  for (std::size_t i = 0; i < fixed.size(); ++i) {
    if (fixed[i].kind == model.layers[i].desc.kind &&
        fixed[i].track_running_stats == model.layers[i].desc.track_running_stats) {
      out.layers.push_back(model.layers[i]);
    } else {
      out.layers.push_back(build_model<T>({fixed[i]}, rng).layers[0]);
    }
  }
  return out;
}

}  // namespace dpgrad
