// Copyright (c) 2026 The dpgrad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "dpgrad/errors.hpp"
#include "dpgrad/layers.hpp"
#include "dpgrad/tensor.hpp"

namespace dpgrad {

/// Per-sample gradients for every trainable parameter: entry [l][k] has
/// shape [batch, ...param shape] and lines up with model.layers[l].params[k].
template <typename T>
struct GradSampleRecord {
  std::size_t batch_size = 0;
  std::vector<std::vector<Tensor<T>>> per_layer;
  std::vector<std::vector<std::string>> param_names;

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& layer : per_layer) {
      for (const auto& t : layer) n += t.numel();
    }
    return n;
  }
};

/// Loss gradients with respect to each layer's output activations,
/// captured while walking the stack backwards.
template <typename T>
struct HighwayGradients {
  std::vector<Tensor<T>> per_layer;
};

/// A per-sample gradient rule: (layer, cached activations, highway gradient)
/// -> one [batch, ...param shape] tensor per trainable parameter, in the
/// layer's parameter order.
template <typename T>
using GradSampleRule = std::function<std::vector<Tensor<T>>(
    const Layer<T>&, const LayerCache<T>&, const Tensor<T>&)>;

// ---- built-in rules ----

/// Linear: weight grad sample = batched outer product of highway gradients
/// and input activations; bias grad sample = highway summed over middle dims.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> per_sample_rule_linear(const Tensor<T>& acts,
                                                       const Tensor<T>& highway) {
  Tensor<T> weight = batched_outer(highway, acts);
  Tensor<T> bias = sum_middle(highway);
  return {std::move(weight), std::move(bias)};
}

/// Embedding: scatter-add of highway rows into each sample's own copy of the
/// table: out[n, indices[n,s], :] += highway[n, s, :]. Dense on purpose; it
/// makes the per-sample storage blow-up of wide tables directly measurable.
template <typename T>
Tensor<T> per_sample_rule_embedding(const Tensor<T>& indices, const Tensor<T>& highway,
                                    std::size_t vocab) {
  if (indices.rank() != 2 || highway.rank() != 3 || indices.extent(0) != highway.extent(0) ||
      indices.extent(1) != highway.extent(1)) {
    throw DimensionError("embedding rule: index shape " + shape_str(indices.shape()) +
                         " does not match highway shape " + shape_str(highway.shape()));
  }
  const std::size_t b = indices.extent(0), t = indices.extent(1), dim = highway.extent(2);
  Tensor<T> out({b, vocab, dim});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t s = 0; s < t; ++s) {
      const std::size_t idx = detail::require_integral_index(indices(n, s), vocab,
                                                             "embedding index");
      for (std::size_t j = 0; j < dim; ++j) out(n, idx, j) += highway(n, s, j);
    }
  }
  return out;
}

/// Normalization layers: gamma grad sample = highway * normalized input
/// summed over positions within the sample; beta grad sample = highway summed
/// over positions within the sample.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> per_sample_rule_layer_norm(const LayerDescriptor& desc,
                                                           const LayerCache<T>& cache,
                                                           const Tensor<T>& highway) {
  const std::size_t m = shape_numel(desc.normalized_shape);
  const std::size_t b = cache.input.extent(0);
  const std::size_t per_sample_positions = cache.input.numel() / (b * m);
  Shape gshape = desc.normalized_shape;
  gshape.insert(gshape.begin(), b);
  Tensor<T> ggamma(gshape);
  Tensor<T> gbeta(gshape);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t p = 0; p < per_sample_positions; ++p) {
      const std::size_t base = (n * per_sample_positions + p) * m;
      for (std::size_t j = 0; j < m; ++j) {
        ggamma[n * m + j] += highway[base + j] * cache.normalized[base + j];
        gbeta[n * m + j] += highway[base + j];
      }
    }
  }
  return {std::move(ggamma), std::move(gbeta)};
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> per_sample_rule_group_norm(const LayerDescriptor& desc,
                                                           const LayerCache<T>& cache,
                                                           const Tensor<T>& highway) {
  const std::size_t b = cache.input.extent(0);
  const std::size_t spatial = cache.input.numel() / (b * desc.channels);
  Tensor<T> ggamma({b, desc.channels});
  Tensor<T> gbeta({b, desc.channels});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < desc.channels; ++ch) {
      const std::size_t base = (n * desc.channels + ch) * spatial;
      T acc_g = T(0), acc_b = T(0);
      for (std::size_t s = 0; s < spatial; ++s) {
        acc_g += highway[base + s] * cache.normalized[base + s];
        acc_b += highway[base + s];
      }
      ggamma(n, ch) = acc_g;
      gbeta(n, ch) = acc_b;
    }
  }
  return {std::move(ggamma), std::move(gbeta)};
}

/// Conv2d: im2col-unfold the cached input, then reuse the linear-layer
/// contraction with spatial positions as the middle dimension.
template <typename T>
std::pair<Tensor<T>, Tensor<T>> per_sample_rule_conv2d(const LayerDescriptor& desc,
                                                       const LayerCache<T>& cache,
                                                       const Tensor<T>& highway) {
  const Conv2dSpec& c = desc.conv;
  const std::size_t b = cache.input.extent(0);
  const std::size_t k = c.in_channels * c.kernel_h * c.kernel_w;
  const std::size_t positions = highway.extent(2) * highway.extent(3);
  const Tensor<T> cols = detail::im2col(cache.input, c);
  // [b, oc, positions] -> [b, positions, oc]; [b, k, positions] -> [b, positions, k]
  const Tensor<T> hw = transpose_last_two(reshape(highway, {b, c.out_channels, positions}));
  const Tensor<T> acts = transpose_last_two(cols);
  auto [gw_flat, gb] = per_sample_rule_linear(acts, hw);
  Tensor<T> gw = reshape(gw_flat, {b, c.out_channels, c.in_channels, c.kernel_h, c.kernel_w});
  return {std::move(gw), std::move(gb)};
}

// ---- registry ----

/// Maps layer rule keys to per-sample gradient rules. Write the registry
/// once, then share it read-only across training runs.
template <typename T>
class GradSamplerRegistry {
 public:
  void register_rule(const std::string& kind, GradSampleRule<T> rule,
                     bool override_existing = false) {
    auto it = rules_.find(kind);
    if (it != rules_.end() && !override_existing) {
      throw RegistryError("a grad-sample rule for kind '" + kind +
                          "' is already registered (pass override to replace it)");
    }
    rules_[kind] = std::move(rule);
  }

  bool has_rule(const std::string& kind) const { return rules_.count(kind) != 0; }

  const GradSampleRule<T>& rule(const std::string& kind) const {
    auto it = rules_.find(kind);
    if (it == rules_.end()) {
      throw RegistryError("no grad-sample rule registered for kind '" + kind + "'");
    }
    return it->second;
  }

  std::vector<std::string> rule_keys() const {
    std::vector<std::string> keys;
    keys.reserve(rules_.size());
    for (const auto& [k, v] : rules_) keys.push_back(k);
    return keys;
  }

  static GradSamplerRegistry with_defaults() {
    GradSamplerRegistry reg;
    reg.register_rule("linear", [](const Layer<T>& layer, const LayerCache<T>& cache,
                                   const Tensor<T>& hw) {
      const std::size_t dim = layer.desc.in_features;
      const std::size_t out_dim = layer.desc.out_features;
      const std::size_t b = cache.input.extent(0);
      const std::size_t mid = cache.input.numel() / (b * dim);
      const Tensor<T> acts = reshape(cache.input, {b, mid, dim});
      const Tensor<T> grads = reshape(hw, {b, mid, out_dim});
      auto [gw, gb] = per_sample_rule_linear(acts, grads);
      std::vector<Tensor<T>> out;
      out.push_back(std::move(gw));
      if (layer.desc.has_bias) out.push_back(std::move(gb));
      return out;
    });
    reg.register_rule("embedding", [](const Layer<T>& layer, const LayerCache<T>& cache,
                                      const Tensor<T>& hw) {
      std::vector<Tensor<T>> out;
      out.push_back(per_sample_rule_embedding(cache.input, hw, layer.desc.vocab_size));
      return out;
    });
    reg.register_rule("conv2d", [](const Layer<T>& layer, const LayerCache<T>& cache,
                                   const Tensor<T>& hw) {
      auto [gw, gb] = per_sample_rule_conv2d(layer.desc, cache, hw);
      std::vector<Tensor<T>> out;
      out.push_back(std::move(gw));
      if (layer.desc.has_bias) out.push_back(std::move(gb));
      return out;
    });
    reg.register_rule("layer_norm", [](const Layer<T>& layer, const LayerCache<T>& cache,
                                       const Tensor<T>& hw) {
      auto [gg, gb] = per_sample_rule_layer_norm(layer.desc, cache, hw);
      return std::vector<Tensor<T>>{std::move(gg), std::move(gb)};
    });
    reg.register_rule("group_norm", [](const Layer<T>& layer, const LayerCache<T>& cache,
                                       const Tensor<T>& hw) {
      auto [gg, gb] = per_sample_rule_group_norm(layer.desc, cache, hw);
      return std::vector<Tensor<T>>{std::move(gg), std::move(gb)};
    });
    // Parameterless kinds still need an entry so the registry can vouch for
    // every kind in a trainable model.
    auto empty_rule = [](const Layer<T>&, const LayerCache<T>&, const Tensor<T>&) {
      return std::vector<Tensor<T>>{};
    };
    reg.register_rule("relu", empty_rule);
    reg.register_rule("flatten", empty_rule);
    return reg;
  }

 private:
  std::map<std::string, GradSampleRule<T>> rules_;
};

template <typename T>
const GradSamplerRegistry<T>& default_registry() {
  static const GradSamplerRegistry<T> reg = GradSamplerRegistry<T>::with_defaults();
  return reg;
}

// ---- engine ----

template <typename T>
struct EngineResult {
  Tensor<T> output;
  Tensor<T> per_sample_loss;
  GradSampleRecord<T> record;
  HighwayGradients<T> highway;
};

namespace detail {

template <typename T>
void check_record_batch(const GradSampleRecord<T>& rec, const ModelGraph<T>& model) {
  for (std::size_t l = 0; l < rec.per_layer.size(); ++l) {
    for (std::size_t k = 0; k < rec.per_layer[l].size(); ++k) {
      const Tensor<T>& g = rec.per_layer[l][k];
      const Tensor<T>& p = model.layers[l].params[k].value;
      if (g.rank() == 0 || g.extent(0) != rec.batch_size || g.numel() != rec.batch_size * p.numel()) {
        throw DimensionError("grad sample for layer " + std::to_string(l) + " parameter '" +
                             model.layers[l].params[k].name + "' has shape " +
                             shape_str(g.shape()) + ", expected leading batch extent " +
                             std::to_string(rec.batch_size) + " over parameter shape " +
                             shape_str(p.shape()));
      }
    }
  }
}

/// Reverse walk shared by both engine entry points: captures highway
/// gradients and applies the registered rule at every layer.
template <typename T>
void grad_sample_walk(const ModelGraph<T>& model, const ForwardCache<T>& cache,
                      const Tensor<T>& output_grad, const GradSamplerRegistry<T>& registry,
                      EngineResult<T>& res) {
  const std::size_t n_layers = model.layers.size();
  res.record.batch_size = cache.batch;
  res.record.per_layer.resize(n_layers);
  res.record.param_names.resize(n_layers);
  res.highway.per_layer.resize(n_layers);
  Tensor<T> grad = output_grad;
  ++PassCounters::backwards;
  for (std::size_t i = n_layers; i-- > 0;) {
    const Layer<T>& layer = model.layers[i];
    res.highway.per_layer[i] = grad;
    const auto& rule = registry.rule(layer.desc.rule_key());
    res.record.per_layer[i] = rule(layer, cache.layers[i], grad);
    for (const auto& p : layer.params) res.record.param_names[i].push_back(p.name);
    if (res.record.per_layer[i].size() != layer.params.size()) {
      throw RegistryError("rule for kind '" + layer.desc.rule_key() + "' returned " +
                          std::to_string(res.record.per_layer[i].size()) +
                          " gradients for a layer with " + std::to_string(layer.params.size()) +
                          " parameters");
    }
    if (i > 0) grad = backward_input(layer, grad, cache.layers[i]);
  }
  check_record_batch(res.record, model);
}

}  // namespace detail

/// Vectorized per-sample gradients driven by an explicit gradient of the
/// (summed) loss with respect to the model output: one forward pass, one
/// backward walk, one rule application per layer.
template <typename T>
EngineResult<T> compute_grad_samples_from_output_grad(
    const ModelGraph<T>& model, const Tensor<T>& input, const Tensor<T>& output_grad,
    const GradSamplerRegistry<T>& registry = default_registry<T>()) {
  auto [output, cache] = forward(model, input);
  if (output_grad.shape() != output.shape()) {
    throw DimensionError("output gradient shape " + shape_str(output_grad.shape()) +
                         " does not match model output " + shape_str(output.shape()));
  }
  EngineResult<T> res;
  res.output = std::move(output);
  detail::grad_sample_walk(model, cache, output_grad, registry, res);
  return res;
}

/// Per-sample gradients of each sample's own loss (sum-reduction semantics:
/// averaging over the batch afterwards recovers the mean-reduced batch
/// gradient).
template <typename T>
EngineResult<T> compute_grad_samples(const ModelGraph<T>& model, const Tensor<T>& input,
                                     const Tensor<T>& targets, LossKind loss_kind,
                                     const GradSamplerRegistry<T>& registry =
                                         default_registry<T>()) {
  if (input.rank() == 0 || input.extent(0) == 0) {
    throw DimensionError("compute_grad_samples: batch must be non-empty");
  }
  auto [output, cache] = forward(model, input);
  LossResult<T> loss = loss_forward_backward(loss_kind, output, targets);
  EngineResult<T> res;
  res.output = std::move(output);
  res.per_sample_loss = std::move(loss.per_sample_loss);
  detail::grad_sample_walk(model, cache, loss.grad_logits, registry, res);
  return res;
}

/// The micro-batching reference path: loop over the batch, run a full
/// forward/backward per sample with the standard batch-summed parameter
/// gradients, and stack the results. Semantically identical to the
/// vectorized engine and deliberately slow; this is the correctness oracle.
template <typename T>
GradSampleRecord<T> microbatch_oracle(const ModelGraph<T>& model, const Tensor<T>& input,
                                      const Tensor<T>& targets, LossKind loss_kind) {
  if (input.rank() == 0 || input.extent(0) == 0) {
    throw DimensionError("microbatch_oracle: batch must be non-empty");
  }
  const std::size_t b = input.extent(0);
  GradSampleRecord<T> rec;
  rec.batch_size = b;
  rec.per_layer.resize(model.layers.size());
  rec.param_names.resize(model.layers.size());
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    for (const auto& p : model.layers[l].params) {
      Shape s = p.value.shape();
      s.insert(s.begin(), b);
      rec.per_layer[l].push_back(Tensor<T>(s));
      rec.param_names[l].push_back(p.name);
    }
  }
  for (std::size_t n = 0; n < b; ++n) {
    Shape tail(input.shape().begin() + 1, input.shape().end());
    Shape one = tail;
    one.insert(one.begin(), 1);
    Tensor<T> x = reshape(slice_leading(input, n), one);
    Tensor<T> y;
    if (loss_kind == LossKind::softmax_cross_entropy) {
      y = Tensor<T>({1});
      y[0] = targets[n];
    } else {
      Shape ty(targets.shape().begin() + 1, targets.shape().end());
      ty.insert(ty.begin(), 1);
      y = reshape(slice_leading(targets, n), ty);
    }
    auto [output, cache] = forward(model, x);
    LossResult<T> loss = loss_forward_backward(loss_kind, output, y);
    Tensor<T> grad = loss.grad_logits;
    ++PassCounters::backwards;
    for (std::size_t i = model.layers.size(); i-- > 0;) {
      const Layer<T>& layer = model.layers[i];
      std::vector<Tensor<T>> grads = parameter_grads(layer, grad, cache.layers[i]);
      for (std::size_t k = 0; k < grads.size(); ++k) {
        Tensor<T>& dst = rec.per_layer[i][k];
        const std::size_t stride = grads[k].numel();
        for (std::size_t j = 0; j < stride; ++j) dst[n * stride + j] = grads[k][j];
      }
      if (i > 0) grad = backward_input(layer, grad, cache.layers[i]);
    }
  }
  return rec;
}

/// Standard (non-private) batch gradients: one forward, one backward,
/// parameter gradients summed over the batch. Divide by the batch size for
/// the mean-reduced gradient.
template <typename T>
std::vector<std::vector<Tensor<T>>> compute_batch_grads(const ModelGraph<T>& model,
                                                        const Tensor<T>& input,
                                                        const Tensor<T>& targets,
                                                        LossKind loss_kind) {
  auto [output, cache] = forward(model, input);
  LossResult<T> loss = loss_forward_backward(loss_kind, output, targets);
  std::vector<std::vector<Tensor<T>>> grads(model.layers.size());
  Tensor<T> grad = loss.grad_logits;
  ++PassCounters::backwards;
  for (std::size_t i = model.layers.size(); i-- > 0;) {
    const Layer<T>& layer = model.layers[i];
    grads[i] = parameter_grads(layer, grad, cache.layers[i]);
    if (i > 0) grad = backward_input(layer, grad, cache.layers[i]);
  }
  return grads;
}

}  // namespace dpgrad
