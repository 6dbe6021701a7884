// Copyright (c) 2026 The dpgrad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpgrad/errors.hpp"
#include "dpgrad/tensor.hpp"

namespace dpgrad {

enum class LayerKind {
  linear,
  embedding,
  conv2d,
  layer_norm,
  group_norm,
  relu,
  flatten,
  batch_norm,     // recognized for validation only; no forward pass
  instance_norm,  // recognized for validation only; no forward pass
  custom,
};

inline const char* layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::linear: return "linear";
    case LayerKind::embedding: return "embedding";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::layer_norm: return "layer_norm";
    case LayerKind::group_norm: return "group_norm";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::instance_norm: return "instance_norm";
    case LayerKind::custom: return "custom";
  }
  return "unknown";
}

inline LayerKind layer_kind_from_name(const std::string& name) {
  for (LayerKind k :
       {LayerKind::linear, LayerKind::embedding, LayerKind::conv2d, LayerKind::layer_norm,
        LayerKind::group_norm, LayerKind::relu, LayerKind::flatten, LayerKind::batch_norm,
        LayerKind::instance_norm, LayerKind::custom}) {
    if (name == layer_kind_name(k)) return k;
  }
  throw ParameterError("unknown layer kind '" + name + "'");
}

struct Conv2dSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

/// Declarative layer description. Only the fields for the given kind are
/// meaningful; factories validate them.
struct LayerDescriptor {
  LayerKind kind = LayerKind::relu;

  // linear
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  bool has_bias = true;

  // embedding
  std::size_t vocab_size = 0;
  std::size_t embedding_dim = 0;

  // conv2d (groups=1, dilation=1 only)
  Conv2dSpec conv;

  // layer_norm
  Shape normalized_shape;

  // group_norm / batch_norm / instance_norm
  std::size_t groups = 0;
  std::size_t channels = 0;
  double eps = 1e-5;
  bool track_running_stats = false;

  // custom
  std::string custom_name;

  static LayerDescriptor linear(std::size_t in, std::size_t out, bool bias = true) {
    if (in == 0 || out == 0) throw ParameterError("linear: feature counts must be positive");
    LayerDescriptor d;
    d.kind = LayerKind::linear;
    d.in_features = in;
    d.out_features = out;
    d.has_bias = bias;
    return d;
  }

  static LayerDescriptor embedding(std::size_t vocab, std::size_t dim) {
    if (vocab == 0 || dim == 0) throw ParameterError("embedding: extents must be positive");
    LayerDescriptor d;
    d.kind = LayerKind::embedding;
    d.vocab_size = vocab;
    d.embedding_dim = dim;
    return d;
  }

  static LayerDescriptor conv2d(std::size_t in_c, std::size_t out_c, std::size_t kh,
                                std::size_t kw, std::size_t stride = 1, std::size_t padding = 0,
                                bool bias = true) {
    if (in_c == 0 || out_c == 0 || kh == 0 || kw == 0 || stride == 0) {
      throw ParameterError("conv2d: channel, kernel, and stride extents must be positive");
    }
    LayerDescriptor d;
    d.kind = LayerKind::conv2d;
    d.conv = {in_c, out_c, kh, kw, stride, padding};
    d.has_bias = bias;
    return d;
  }

  static LayerDescriptor layer_norm(Shape normalized, double eps = 1e-5) {
    if (normalized.empty() || shape_numel(normalized) == 0) {
      throw ParameterError("layer_norm: normalized shape must be non-empty");
    }
    if (eps <= 0.0) throw ParameterError("layer_norm: eps must be positive");
    LayerDescriptor d;
    d.kind = LayerKind::layer_norm;
    d.normalized_shape = std::move(normalized);
    d.eps = eps;
    return d;
  }

  static LayerDescriptor group_norm(std::size_t groups, std::size_t channels, double eps = 1e-5) {
    if (groups == 0 || channels == 0 || channels % groups != 0) {
      throw ParameterError("group_norm: groups must be positive and divide channels");
    }
    if (eps <= 0.0) throw ParameterError("group_norm: eps must be positive");
    LayerDescriptor d;
    d.kind = LayerKind::group_norm;
    d.groups = groups;
    d.channels = channels;
    d.eps = eps;
    return d;
  }

  static LayerDescriptor relu() {
    LayerDescriptor d;
    d.kind = LayerKind::relu;
    return d;
  }

  static LayerDescriptor flatten() {
    LayerDescriptor d;
    d.kind = LayerKind::flatten;
    return d;
  }

  static LayerDescriptor batch_norm(std::size_t channels) {
    if (channels == 0) throw ParameterError("batch_norm: channels must be positive");
    LayerDescriptor d;
    d.kind = LayerKind::batch_norm;
    d.channels = channels;
    return d;
  }

  static LayerDescriptor instance_norm(std::size_t channels, bool running_stats) {
    if (channels == 0) throw ParameterError("instance_norm: channels must be positive");
    LayerDescriptor d;
    d.kind = LayerKind::instance_norm;
    d.channels = channels;
    d.track_running_stats = running_stats;
    return d;
  }

  static LayerDescriptor custom(std::string name) {
    if (name.empty()) throw ParameterError("custom layer needs a non-empty name");
    LayerDescriptor d;
    d.kind = LayerKind::custom;
    d.custom_name = std::move(name);
    return d;
  }

  /// Key used to look up the per-sample gradient rule for this layer.
  std::string rule_key() const {
    return kind == LayerKind::custom ? custom_name : layer_kind_name(kind);
  }
};

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
};

template <typename T>
using ParameterSet = std::vector<NamedParam<T>>;

/// Hand-written ops for a user-defined layer kind. parameter_grads returns
/// the standard batch-summed gradients (used by the micro-batch oracle and
/// the non-DP path); the per-sample rule is registered separately.
template <typename T>
struct CustomOps {
  std::function<Tensor<T>(const ParameterSet<T>&, const Tensor<T>&)> forward;
  std::function<Tensor<T>(const ParameterSet<T>&, const Tensor<T>& grad_out,
                          const Tensor<T>& input)>
      backward_input;
  std::function<std::vector<Tensor<T>>(const ParameterSet<T>&, const Tensor<T>& grad_out,
                                       const Tensor<T>& input)>
      parameter_grads;
};

template <typename T>
struct Layer {
  LayerDescriptor desc;
  ParameterSet<T> params;
  std::shared_ptr<const CustomOps<T>> custom_ops;
};

/// Sequential stack of layers. Read-shared during forward/backward.
template <typename T>
struct ModelGraph {
  std::vector<Layer<T>> layers;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& layer : layers) {
      for (const auto& p : layer.params) n += p.value.numel();
    }
    return n;
  }

  std::vector<LayerDescriptor> descriptors() const {
    std::vector<LayerDescriptor> out;
    out.reserve(layers.size());
    for (const auto& layer : layers) out.push_back(layer.desc);
    return out;
  }
};

/// Per-layer activations captured during forward, consumed by backward and
/// by the per-sample gradient rules.
template <typename T>
struct LayerCache {
  bool valid = false;
  Tensor<T> input;       // Z^{(l-1)}
  Tensor<T> normalized;  // normalization layers: (x - mean) * inv_std
  Tensor<T> inv_std;     // layer_norm: per position; group_norm: [b, groups]
  Tensor<T> mean;        // same layout as inv_std
};

template <typename T>
struct ForwardCache {
  std::vector<LayerCache<T>> layers;
  std::size_t batch = 0;
};

/// Forward/backward pass counters, used by tests and the micro-benchmarks
/// to make the one-pass property of the vectorized path observable.
struct PassCounters {
  static inline thread_local std::uint64_t forwards = 0;
  static inline thread_local std::uint64_t backwards = 0;
  static void reset() {
    forwards = 0;
    backwards = 0;
  }
};

namespace detail {

[[noreturn]] inline void layer_shape_error(std::size_t layer_index, LayerKind kind,
                                           const std::string& what) {
  throw DimensionError("layer " + std::to_string(layer_index) + " (" + layer_kind_name(kind) +
                       "): " + what);
}

inline std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                   std::size_t padding) {
  const std::size_t padded = in + 2 * padding;
  if (padded < kernel) return 0;
  return (padded - kernel) / stride + 1;
}

/// Unfold [b, ic, h, w] into columns [b, ic*kh*kw, oh*ow].
template <typename T>
Tensor<T> im2col(const Tensor<T>& x, const Conv2dSpec& c) {
  const std::size_t b = x.extent(0), ic = x.extent(1), h = x.extent(2), w = x.extent(3);
  const std::size_t oh = conv_out_extent(h, c.kernel_h, c.stride, c.padding);
  const std::size_t ow = conv_out_extent(w, c.kernel_w, c.stride, c.padding);
  const std::size_t k = ic * c.kernel_h * c.kernel_w;
  Tensor<T> cols({b, k, oh * ow});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < ic; ++ch) {
      for (std::size_t ki = 0; ki < c.kernel_h; ++ki) {
        for (std::size_t kj = 0; kj < c.kernel_w; ++kj) {
          const std::size_t row = (ch * c.kernel_h + ki) * c.kernel_w + kj;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * c.stride + ki) -
                static_cast<std::ptrdiff_t>(c.padding);
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * c.stride + kj) -
                  static_cast<std::ptrdiff_t>(c.padding);
              T v = T(0);
              if (iy >= 0 && iy < static_cast<std::ptrdiff_t>(h) && ix >= 0 &&
                  ix < static_cast<std::ptrdiff_t>(w)) {
                v = x(n, ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
              }
              cols(n, row, oy * ow + ox) = v;
            }
          }
        }
      }
    }
  }
  return cols;
}

/// Scatter-add columns [b, ic*kh*kw, oh*ow] back onto an input-shaped grid.
template <typename T>
Tensor<T> col2im(const Tensor<T>& cols, const Conv2dSpec& c, const Shape& input_shape) {
  const std::size_t b = input_shape[0], ic = input_shape[1], h = input_shape[2],
                    w = input_shape[3];
  const std::size_t oh = conv_out_extent(h, c.kernel_h, c.stride, c.padding);
  const std::size_t ow = conv_out_extent(w, c.kernel_w, c.stride, c.padding);
  Tensor<T> x(input_shape);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t ch = 0; ch < ic; ++ch) {
      for (std::size_t ki = 0; ki < c.kernel_h; ++ki) {
        for (std::size_t kj = 0; kj < c.kernel_w; ++kj) {
          const std::size_t row = (ch * c.kernel_h + ki) * c.kernel_w + kj;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const std::ptrdiff_t iy =
                static_cast<std::ptrdiff_t>(oy * c.stride + ki) -
                static_cast<std::ptrdiff_t>(c.padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const std::ptrdiff_t ix =
                  static_cast<std::ptrdiff_t>(ox * c.stride + kj) -
                  static_cast<std::ptrdiff_t>(c.padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              x(n, ch, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) +=
                  cols(n, row, oy * ow + ox);
            }
          }
        }
      }
    }
  }
  return x;
}

template <typename T>
const Tensor<T>& find_param(const ParameterSet<T>& params, const std::string& name) {
  for (const auto& p : params) {
    if (p.name == name) return p.value;
  }
  throw ParameterError("missing parameter '" + name + "'");
}

template <typename T>
std::size_t require_integral_index(T raw, std::size_t limit, const char* what) {
  const double v = static_cast<double>(raw);
  if (!(v >= 0.0) || v != std::floor(v) || v >= static_cast<double>(limit)) {
    throw ParameterError(std::string(what) + " " + std::to_string(v) +
                         " out of range [0, " + std::to_string(limit) + ")");
  }
  return static_cast<std::size_t>(v);
}

}  // namespace detail

// ---- per-kind forward ----

template <typename T>
Tensor<T> layer_forward(const Layer<T>& layer, const Tensor<T>& input, LayerCache<T>& cache,
                        std::size_t layer_index) {
  const LayerDescriptor& d = layer.desc;
  cache.input = input;
  cache.valid = true;
  switch (d.kind) {
    case LayerKind::linear: {
      if (input.rank() < 2 || input.extent(input.rank() - 1) != d.in_features) {
        detail::layer_shape_error(layer_index, d.kind,
                                  "expected trailing extent " + std::to_string(d.in_features) +
                                      ", got input " + shape_str(input.shape()));
      }
      const Tensor<T>& weight = detail::find_param(layer.params, "weight");
      const std::size_t dim = d.in_features, out_dim = d.out_features;
      const std::size_t rows = input.numel() / dim;
      Shape out_shape = input.shape();
      out_shape.back() = out_dim;
      Tensor<T> out(out_shape);
      const Tensor<T>* bias = d.has_bias ? &detail::find_param(layer.params, "bias") : nullptr;
      for (std::size_t r = 0; r < rows; ++r) {
        const T* xrow = input.data() + r * dim;
        T* yrow = out.data() + r * out_dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
          T acc = bias ? (*bias)[o] : T(0);
          const T* wrow = weight.data() + o * dim;
          for (std::size_t j = 0; j < dim; ++j) acc += wrow[j] * xrow[j];
          yrow[o] = acc;
        }
      }
      return out;
    }
    case LayerKind::embedding: {
      if (input.rank() != 2) {
        detail::layer_shape_error(layer_index, d.kind,
                                  "expected [batch, tokens] indices, got " +
                                      shape_str(input.shape()));
      }
      const Tensor<T>& table = detail::find_param(layer.params, "table");
      const std::size_t b = input.extent(0), t = input.extent(1), dim = d.embedding_dim;
      Tensor<T> out({b, t, dim});
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t s = 0; s < t; ++s) {
          const std::size_t idx =
              detail::require_integral_index(input(n, s), d.vocab_size, "embedding index");
          for (std::size_t j = 0; j < dim; ++j) out(n, s, j) = table(idx, j);
        }
      }
      return out;
    }
    case LayerKind::conv2d: {
      const Conv2dSpec& c = d.conv;
      if (input.rank() != 4 || input.extent(1) != c.in_channels) {
        detail::layer_shape_error(layer_index, d.kind,
                                  "expected [batch, " + std::to_string(c.in_channels) +
                                      ", h, w], got " + shape_str(input.shape()));
      }
      const std::size_t oh =
          detail::conv_out_extent(input.extent(2), c.kernel_h, c.stride, c.padding);
      const std::size_t ow =
          detail::conv_out_extent(input.extent(3), c.kernel_w, c.stride, c.padding);
      if (oh == 0 || ow == 0) {
        detail::layer_shape_error(layer_index, d.kind,
                                  "kernel larger than padded input " + shape_str(input.shape()));
      }
      const Tensor<T>& weight = detail::find_param(layer.params, "weight");
      const Tensor<T>* bias = d.has_bias ? &detail::find_param(layer.params, "bias") : nullptr;
      const Tensor<T> cols = detail::im2col(input, c);
      const std::size_t b = input.extent(0);
      const std::size_t k = c.in_channels * c.kernel_h * c.kernel_w;
      const std::size_t positions = oh * ow;
      Tensor<T> out({b, c.out_channels, oh, ow});
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
          const T* wrow = weight.data() + oc * k;
          T* orow = out.data() + (n * c.out_channels + oc) * positions;
          for (std::size_t p = 0; p < positions; ++p) orow[p] = bias ? (*bias)[oc] : T(0);
          for (std::size_t r = 0; r < k; ++r) {
            const T wv = wrow[r];
            const T* crow = cols.data() + (n * k + r) * positions;
            for (std::size_t p = 0; p < positions; ++p) orow[p] += wv * crow[p];
          }
        }
      }
      return out;
    }
    case LayerKind::layer_norm: {
      const Shape& ns = d.normalized_shape;
      if (input.rank() < ns.size() + 1 ||
          !std::equal(ns.begin(), ns.end(), input.shape().end() - ns.size())) {
        detail::layer_shape_error(layer_index, d.kind,
                                  "trailing dims of " + shape_str(input.shape()) +
                                      " do not match normalized shape " + shape_str(ns));
      }
      const Tensor<T>& gamma = detail::find_param(layer.params, "gamma");
      const Tensor<T>& beta = detail::find_param(layer.params, "beta");
      const std::size_t m = shape_numel(ns);
      const std::size_t positions = input.numel() / m;
      Tensor<T> out(input.shape());
      cache.normalized = Tensor<T>(input.shape());
      cache.inv_std = Tensor<T>({positions});
      cache.mean = Tensor<T>({positions});
      for (std::size_t p = 0; p < positions; ++p) {
        const T* row = input.data() + p * m;
        double mu = 0.0;
        for (std::size_t j = 0; j < m; ++j) mu += static_cast<double>(row[j]);
        mu /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          const double dx = static_cast<double>(row[j]) - mu;
          var += dx * dx;
        }
        var /= static_cast<double>(m);
        const double inv = 1.0 / std::sqrt(var + d.eps);
        cache.inv_std[p] = static_cast<T>(inv);
        cache.mean[p] = static_cast<T>(mu);
        T* nrow = cache.normalized.data() + p * m;
        T* orow = out.data() + p * m;
        for (std::size_t j = 0; j < m; ++j) {
          const T xhat = static_cast<T>((static_cast<double>(row[j]) - mu) * inv);
          nrow[j] = xhat;
          orow[j] = gamma[j] * xhat + beta[j];
        }
      }
      return out;
    }
    case LayerKind::group_norm: {
      if (input.rank() < 2 || input.extent(1) != d.channels) {
        detail::layer_shape_error(layer_index, d.kind,
                                  "expected [batch, " + std::to_string(d.channels) +
                                      ", ...], got " + shape_str(input.shape()));
      }
      const Tensor<T>& gamma = detail::find_param(layer.params, "gamma");
      const Tensor<T>& beta = detail::find_param(layer.params, "beta");
      const std::size_t b = input.extent(0);
      const std::size_t spatial = input.numel() / (b * d.channels);
      const std::size_t group_size = d.channels / d.groups;
      const std::size_t block = group_size * spatial;
      Tensor<T> out(input.shape());
      cache.normalized = Tensor<T>(input.shape());
      cache.inv_std = Tensor<T>({b, d.groups});
      cache.mean = Tensor<T>({b, d.groups});
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t g = 0; g < d.groups; ++g) {
          const std::size_t base = (n * d.channels + g * group_size) * spatial;
          double mu = 0.0;
          for (std::size_t j = 0; j < block; ++j) mu += static_cast<double>(input[base + j]);
          mu /= static_cast<double>(block);
          double var = 0.0;
          for (std::size_t j = 0; j < block; ++j) {
            const double dx = static_cast<double>(input[base + j]) - mu;
            var += dx * dx;
          }
          var /= static_cast<double>(block);
          const double inv = 1.0 / std::sqrt(var + d.eps);
          cache.inv_std(n, g) = static_cast<T>(inv);
          cache.mean(n, g) = static_cast<T>(mu);
          for (std::size_t cg = 0; cg < group_size; ++cg) {
            const std::size_t ch = g * group_size + cg;
            for (std::size_t s = 0; s < spatial; ++s) {
              const std::size_t at = (n * d.channels + ch) * spatial + s;
              const T xhat = static_cast<T>((static_cast<double>(input[at]) - mu) * inv);
              cache.normalized[at] = xhat;
              out[at] = gamma[ch] * xhat + beta[ch];
            }
          }
        }
      }
      return out;
    }
    case LayerKind::relu: {
      Tensor<T> out(input.shape());
      for (std::size_t i = 0; i < input.numel(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
      return out;
    }
    case LayerKind::flatten: {
      if (input.rank() < 1) detail::layer_shape_error(layer_index, d.kind, "rank-0 input");
      return reshape(input, {input.extent(0), input.numel() / input.extent(0)});
    }
    case LayerKind::custom: {
      if (!layer.custom_ops || !layer.custom_ops->forward) {
        throw LifecycleError("custom layer '" + d.custom_name + "' has no forward ops attached");
      }
      return layer.custom_ops->forward(layer.params, input);
    }
    case LayerKind::batch_norm:
    case LayerKind::instance_norm:
      throw LifecycleError(std::string(layer_kind_name(d.kind)) +
                           " is recognized for validation only and has no forward pass");
  }
  throw ParameterError("unhandled layer kind");
}

/// Run the whole stack; the cache holds each layer's input activations.
template <typename T>
std::pair<Tensor<T>, ForwardCache<T>> forward(const ModelGraph<T>& model,
                                              const Tensor<T>& input) {
  if (input.rank() == 0 || input.extent(0) == 0) {
    throw DimensionError("forward: input must have a non-empty batch dimension, got " +
                         shape_str(input.shape()));
  }
  ++PassCounters::forwards;
  ForwardCache<T> cache;
  cache.batch = input.extent(0);
  cache.layers.resize(model.layers.size());
  Tensor<T> x = input;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    x = layer_forward(model.layers[l], x, cache.layers[l], l);
  }
  return {std::move(x), std::move(cache)};
}

// ---- per-kind input gradient ----

template <typename T>
Tensor<T> backward_input(const Layer<T>& layer, const Tensor<T>& grad_out,
                         const LayerCache<T>& cache) {
  if (!cache.valid) {
    throw LifecycleError(std::string("backward_input(") + layer_kind_name(layer.desc.kind) +
                         "): no cached forward activations");
  }
  const LayerDescriptor& d = layer.desc;
  const Tensor<T>& input = cache.input;
  switch (d.kind) {
    case LayerKind::linear: {
      const Tensor<T>& weight = detail::find_param(layer.params, "weight");
      const std::size_t dim = d.in_features, out_dim = d.out_features;
      const std::size_t rows = input.numel() / dim;
      if (grad_out.numel() != rows * out_dim) {
        throw DimensionError("linear backward: grad shape " + shape_str(grad_out.shape()) +
                             " does not match cached batch");
      }
      Tensor<T> gx(input.shape());
      for (std::size_t r = 0; r < rows; ++r) {
        const T* grow = grad_out.data() + r * out_dim;
        T* xrow = gx.data() + r * dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
          const T gv = grow[o];
          const T* wrow = weight.data() + o * dim;
          for (std::size_t j = 0; j < dim; ++j) xrow[j] += gv * wrow[j];
        }
      }
      return gx;
    }
    case LayerKind::embedding:
      // Indices are not differentiable; the stack never propagates past an
      // embedding, so the input gradient is defined as zero.
      return Tensor<T>(input.shape());
    case LayerKind::conv2d: {
      const Conv2dSpec& c = d.conv;
      const std::size_t b = input.extent(0);
      const std::size_t k = c.in_channels * c.kernel_h * c.kernel_w;
      const std::size_t positions = grad_out.extent(2) * grad_out.extent(3);
      const Tensor<T>& weight = detail::find_param(layer.params, "weight");
      Tensor<T> gcols({b, k, positions});
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
          const T* grow = grad_out.data() + (n * c.out_channels + oc) * positions;
          const T* wrow = weight.data() + oc * k;
          for (std::size_t r = 0; r < k; ++r) {
            const T wv = wrow[r];
            T* crow = gcols.data() + (n * k + r) * positions;
            for (std::size_t p = 0; p < positions; ++p) crow[p] += wv * grow[p];
          }
        }
      }
      return detail::col2im(gcols, c, input.shape());
    }
    case LayerKind::layer_norm: {
      const Tensor<T>& gamma = detail::find_param(layer.params, "gamma");
      const std::size_t m = shape_numel(d.normalized_shape);
      const std::size_t positions = input.numel() / m;
      Tensor<T> gx(input.shape());
      for (std::size_t p = 0; p < positions; ++p) {
        const T* grow = grad_out.data() + p * m;
        const T* nrow = cache.normalized.data() + p * m;
        const double inv = static_cast<double>(cache.inv_std[p]);
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          const double gh = static_cast<double>(grow[j]) * static_cast<double>(gamma[j]);
          sum_g += gh;
          sum_gx += gh * static_cast<double>(nrow[j]);
        }
        const double mg = sum_g / static_cast<double>(m);
        const double mgx = sum_gx / static_cast<double>(m);
        T* xrow = gx.data() + p * m;
        for (std::size_t j = 0; j < m; ++j) {
          const double gh = static_cast<double>(grow[j]) * static_cast<double>(gamma[j]);
          xrow[j] = static_cast<T>(inv * (gh - mg - static_cast<double>(nrow[j]) * mgx));
        }
      }
      return gx;
    }
    case LayerKind::group_norm: {
      const Tensor<T>& gamma = detail::find_param(layer.params, "gamma");
      const std::size_t b = input.extent(0);
      const std::size_t spatial = input.numel() / (b * d.channels);
      const std::size_t group_size = d.channels / d.groups;
      const std::size_t block = group_size * spatial;
      Tensor<T> gx(input.shape());
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t g = 0; g < d.groups; ++g) {
          const double inv = static_cast<double>(cache.inv_std(n, g));
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t cg = 0; cg < group_size; ++cg) {
            const std::size_t ch = g * group_size + cg;
            const std::size_t base = (n * d.channels + ch) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
              const double gh =
                  static_cast<double>(grad_out[base + s]) * static_cast<double>(gamma[ch]);
              sum_g += gh;
              sum_gx += gh * static_cast<double>(cache.normalized[base + s]);
            }
          }
          const double mg = sum_g / static_cast<double>(block);
          const double mgx = sum_gx / static_cast<double>(block);
          for (std::size_t cg = 0; cg < group_size; ++cg) {
            const std::size_t ch = g * group_size + cg;
            const std::size_t base = (n * d.channels + ch) * spatial;
            for (std::size_t s = 0; s < spatial; ++s) {
              const double gh =
                  static_cast<double>(grad_out[base + s]) * static_cast<double>(gamma[ch]);
              gx[base + s] = static_cast<T>(
                  inv * (gh - mg - static_cast<double>(cache.normalized[base + s]) * mgx));
            }
          }
        }
      }
      return gx;
    }
    case LayerKind::relu: {
      Tensor<T> gx(input.shape());
      for (std::size_t i = 0; i < input.numel(); ++i) {
        gx[i] = input[i] > T(0) ? grad_out[i] : T(0);
      }
      return gx;
    }
    case LayerKind::flatten:
      return reshape(grad_out, input.shape());
    case LayerKind::custom: {
      if (!layer.custom_ops || !layer.custom_ops->backward_input) {
        throw LifecycleError("custom layer '" + d.custom_name + "' has no backward ops attached");
      }
      return layer.custom_ops->backward_input(layer.params, grad_out, input);
    }
    case LayerKind::batch_norm:
    case LayerKind::instance_norm:
      throw LifecycleError(std::string(layer_kind_name(d.kind)) + " has no backward pass");
  }
  throw ParameterError("unhandled layer kind");
}

// ---- per-kind standard (batch-summed) parameter gradients ----
//
// This is the conventional single-backward path: it never separates samples,
// so the micro-batch oracle and the non-DP baseline built on it stay
// independent of the vectorized per-sample rules.

template <typename T>
std::vector<Tensor<T>> parameter_grads(const Layer<T>& layer, const Tensor<T>& grad_out,
                                       const LayerCache<T>& cache) {
  if (!cache.valid) {
    throw LifecycleError(std::string("parameter_grads(") + layer_kind_name(layer.desc.kind) +
                         "): no cached forward activations");
  }
  const LayerDescriptor& d = layer.desc;
  const Tensor<T>& input = cache.input;
  switch (d.kind) {
    case LayerKind::linear: {
      const std::size_t dim = d.in_features, out_dim = d.out_features;
      const std::size_t rows = input.numel() / dim;
      Tensor<T> gw({out_dim, dim});
      Tensor<T> gb({out_dim});
      for (std::size_t r = 0; r < rows; ++r) {
        const T* grow = grad_out.data() + r * out_dim;
        const T* xrow = input.data() + r * dim;
        for (std::size_t o = 0; o < out_dim; ++o) {
          const T gv = grow[o];
          T* wrow = gw.data() + o * dim;
          for (std::size_t j = 0; j < dim; ++j) wrow[j] += gv * xrow[j];
          gb[o] += gv;
        }
      }
      if (d.has_bias) return {std::move(gw), std::move(gb)};
      return {std::move(gw)};
    }
    case LayerKind::embedding: {
      const std::size_t b = input.extent(0), t = input.extent(1), dim = d.embedding_dim;
      Tensor<T> gt({d.vocab_size, dim});
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t s = 0; s < t; ++s) {
          const std::size_t idx =
              detail::require_integral_index(input(n, s), d.vocab_size, "embedding index");
          for (std::size_t j = 0; j < dim; ++j) gt(idx, j) += grad_out(n, s, j);
        }
      }
      return {std::move(gt)};
    }
    case LayerKind::conv2d: {
      const Conv2dSpec& c = d.conv;
      const std::size_t b = input.extent(0);
      const std::size_t k = c.in_channels * c.kernel_h * c.kernel_w;
      const std::size_t positions = grad_out.extent(2) * grad_out.extent(3);
      const Tensor<T> cols = detail::im2col(input, c);
      Tensor<T> gw({c.out_channels, c.in_channels, c.kernel_h, c.kernel_w});
      Tensor<T> gb({c.out_channels});
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t oc = 0; oc < c.out_channels; ++oc) {
          const T* grow = grad_out.data() + (n * c.out_channels + oc) * positions;
          T* wrow = gw.data() + oc * k;
          for (std::size_t r = 0; r < k; ++r) {
            const T* crow = cols.data() + (n * k + r) * positions;
            T acc = T(0);
            for (std::size_t p = 0; p < positions; ++p) acc += grow[p] * crow[p];
            wrow[r] += acc;
          }
          T bacc = T(0);
          for (std::size_t p = 0; p < positions; ++p) bacc += grow[p];
          gb[oc] += bacc;
        }
      }
      if (d.has_bias) return {std::move(gw), std::move(gb)};
      return {std::move(gw)};
    }
    case LayerKind::layer_norm: {
      const std::size_t m = shape_numel(d.normalized_shape);
      const std::size_t positions = input.numel() / m;
      Tensor<T> ggamma(d.normalized_shape);
      Tensor<T> gbeta(d.normalized_shape);
      for (std::size_t p = 0; p < positions; ++p) {
        const T* grow = grad_out.data() + p * m;
        const T* nrow = cache.normalized.data() + p * m;
        for (std::size_t j = 0; j < m; ++j) {
          ggamma[j] += grow[j] * nrow[j];
          gbeta[j] += grow[j];
        }
      }
      return {std::move(ggamma), std::move(gbeta)};
    }
    case LayerKind::group_norm: {
      const std::size_t b = input.extent(0);
      const std::size_t spatial = input.numel() / (b * d.channels);
      Tensor<T> ggamma({d.channels});
      Tensor<T> gbeta({d.channels});
      for (std::size_t n = 0; n < b; ++n) {
        for (std::size_t ch = 0; ch < d.channels; ++ch) {
          const std::size_t base = (n * d.channels + ch) * spatial;
          for (std::size_t s = 0; s < spatial; ++s) {
            ggamma[ch] += grad_out[base + s] * cache.normalized[base + s];
            gbeta[ch] += grad_out[base + s];
          }
        }
      }
      return {std::move(ggamma), std::move(gbeta)};
    }
    case LayerKind::relu:
    case LayerKind::flatten:
      return {};
    case LayerKind::custom: {
      if (!layer.custom_ops || !layer.custom_ops->parameter_grads) return {};
      return layer.custom_ops->parameter_grads(layer.params, grad_out, input);
    }
    case LayerKind::batch_norm:
    case LayerKind::instance_norm:
      throw LifecycleError(std::string(layer_kind_name(d.kind)) + " has no backward pass");
  }
  throw ParameterError("unhandled layer kind");
}

// ---- losses ----

enum class LossKind { mse, softmax_cross_entropy };

inline const char* loss_kind_name(LossKind k) {
  return k == LossKind::mse ? "mse" : "softmax_cross_entropy";
}

template <typename T>
struct LossResult {
  Tensor<T> per_sample_loss;  // [b]
  Tensor<T> grad_logits;      // d(per-sample loss)/d(logits), same shape as logits
};

/// Per-sample losses (not batch-averaged) and their gradients. The gradient
/// of sample i is taken with respect to that sample's own loss, so the mean
/// over the batch recovers the gradient of the mean-reduced batch loss.
template <typename T>
LossResult<T> loss_forward_backward(LossKind kind, const Tensor<T>& logits,
                                    const Tensor<T>& targets) {
  if (logits.rank() < 1 || logits.extent(0) == 0) {
    throw DimensionError("loss: logits need a non-empty batch dimension, got " +
                         shape_str(logits.shape()));
  }
  const std::size_t b = logits.extent(0);
  LossResult<T> res;
  res.per_sample_loss = Tensor<T>({b});
  res.grad_logits = Tensor<T>(logits.shape());
  if (kind == LossKind::mse) {
    detail::require_same_shape(logits.shape(), targets.shape(), "mse loss");
    const std::size_t per = logits.numel() / b;
    for (std::size_t n = 0; n < b; ++n) {
      double acc = 0.0;
      for (std::size_t j = 0; j < per; ++j) {
        const std::size_t at = n * per + j;
        const double diff = static_cast<double>(logits[at]) - static_cast<double>(targets[at]);
        acc += diff * diff;
        res.grad_logits[at] = static_cast<T>(2.0 * diff);
      }
      res.per_sample_loss[n] = static_cast<T>(acc);
    }
    return res;
  }
  // softmax cross-entropy over class logits [b, k] with integer targets [b]
  if (logits.rank() != 2) {
    throw DimensionError("cross-entropy expects [batch, classes] logits, got " +
                         shape_str(logits.shape()));
  }
  if (targets.rank() != 1 || targets.extent(0) != b) {
    throw DimensionError("cross-entropy expects [batch] targets, got " +
                         shape_str(targets.shape()));
  }
  const std::size_t k = logits.extent(1);
  for (std::size_t n = 0; n < b; ++n) {
    const std::size_t cls = detail::require_integral_index(targets[n], k, "target class");
    const T* row = logits.data() + n * k;
    double mx = static_cast<double>(row[0]);
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double denom = 0.0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
    const double log_denom = std::log(denom);
    res.per_sample_loss[n] =
        static_cast<T>(-(static_cast<double>(row[cls]) - mx - log_denom));
    for (std::size_t j = 0; j < k; ++j) {
      const double p = std::exp(static_cast<double>(row[j]) - mx) / denom;
      res.grad_logits[n * k + j] = static_cast<T>(p - (j == cls ? 1.0 : 0.0));
    }
  }
  return res;
}

// ---- model construction ----

/// Initialize parameters for a descriptor stack. Uniform fan-in init for
/// linear/conv, unit normal for embeddings, identity affine for norms.
template <typename T>
ModelGraph<T> build_model(const std::vector<LayerDescriptor>& descriptors, RngStream& rng) {
  ModelGraph<T> model;
  model.layers.reserve(descriptors.size());
  for (const LayerDescriptor& d : descriptors) {
    Layer<T> layer;
    layer.desc = d;
    switch (d.kind) {
      case LayerKind::linear: {
        const double k = 1.0 / std::sqrt(static_cast<double>(d.in_features));
        layer.params.push_back(
            {"weight", uniform<T>({d.out_features, d.in_features}, -k, k, rng)});
        if (d.has_bias) layer.params.push_back({"bias", uniform<T>({d.out_features}, -k, k, rng)});
        break;
      }
      case LayerKind::embedding:
        layer.params.push_back(
            {"table", gaussian<T>({d.vocab_size, d.embedding_dim}, 1.0, rng)});
        break;
      case LayerKind::conv2d: {
        const Conv2dSpec& c = d.conv;
        const double fan_in = static_cast<double>(c.in_channels * c.kernel_h * c.kernel_w);
        const double k = 1.0 / std::sqrt(fan_in);
        layer.params.push_back(
            {"weight",
             uniform<T>({c.out_channels, c.in_channels, c.kernel_h, c.kernel_w}, -k, k, rng)});
        if (d.has_bias) layer.params.push_back({"bias", uniform<T>({c.out_channels}, -k, k, rng)});
        break;
      }
      case LayerKind::layer_norm:
        layer.params.push_back({"gamma", Tensor<T>::full(d.normalized_shape, T(1))});
        layer.params.push_back({"beta", Tensor<T>(d.normalized_shape)});
        break;
      case LayerKind::group_norm:
      case LayerKind::batch_norm:
      case LayerKind::instance_norm:
        layer.params.push_back({"gamma", Tensor<T>::full({d.channels}, T(1))});
        layer.params.push_back({"beta", Tensor<T>({d.channels})});
        break;
      case LayerKind::relu:
      case LayerKind::flatten:
      case LayerKind::custom:
        break;
    }
    model.layers.push_back(std::move(layer));
  }
  return model;
}

}  // namespace dpgrad
