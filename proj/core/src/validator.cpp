// Copyright (c) 2026 The dpgrad authors
// SPDX-License-Identifier: Apache-2.0

#include "dpgrad/validator.hpp"

#include <algorithm>

namespace dpgrad {

std::string violation_line(const Violation& v) {
  return "layer=" + std::to_string(v.layer_index) + " kind=" + layer_kind_name(v.kind) +
         " reason=" + v.reason;
}

namespace {

std::size_t group_count_for(std::size_t channels) {
  // Largest divisor of the channel count not exceeding 32.
  for (std::size_t g = std::min<std::size_t>(32, channels); g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

}  // namespace

std::vector<Violation> validate(const std::vector<LayerDescriptor>& layers,
                                const std::vector<std::string>& registered_rule_keys) {
  std::vector<Violation> out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerDescriptor& d = layers[i];
    switch (d.kind) {
      case LayerKind::batch_norm: {
        Violation v;
        v.layer_index = i;
        v.kind = d.kind;
        v.reason = "batch normalization mixes information across samples of a batch, so "
                   "per-sample gradients are undefined";
        v.fixable = true;
        v.suggested_replacement =
            LayerDescriptor::group_norm(group_count_for(d.channels), d.channels);
        out.push_back(std::move(v));
        break;
      }
      case LayerKind::instance_norm: {
        if (d.track_running_stats) {
          Violation v;
          v.layer_index = i;
          v.kind = d.kind;
          v.reason = "instance normalization with running statistics tracks state that is "
                     "not covered by the privacy guarantee";
          v.fixable = true;
          LayerDescriptor fixed = d;
          fixed.track_running_stats = false;
          v.suggested_replacement = fixed;
          out.push_back(std::move(v));
        }
        break;
      }
      case LayerKind::custom: {
        const bool covered =
            std::find(registered_rule_keys.begin(), registered_rule_keys.end(),
                      d.custom_name) != registered_rule_keys.end();
        if (!covered) {
          Violation v;
          v.layer_index = i;
          v.kind = d.kind;
          v.reason = "no per-sample gradient rule is registered for kind '" + d.custom_name + "'";
          v.fixable = false;
          out.push_back(std::move(v));
        }
        break;
      }
      default:
        break;
    }
  }
  return out;
}

std::vector<Violation> validate(const std::vector<LayerDescriptor>& layers) {
  return validate(layers, {});
}

std::vector<LayerDescriptor> suggest_fix(const std::vector<LayerDescriptor>& layers) {
  std::vector<LayerDescriptor> out;
  out.reserve(layers.size());
  for (const LayerDescriptor& d : layers) {
    if (d.kind == LayerKind::batch_norm) {
      out.push_back(LayerDescriptor::group_norm(group_count_for(d.channels), d.channels));
    } else if (d.kind == LayerKind::instance_norm && d.track_running_stats) {
      LayerDescriptor fixed = d;
      fixed.track_running_stats = false;
      out.push_back(fixed);
    } else {
      out.push_back(d);
    }
  }
  return out;
}

}  // namespace dpgrad
