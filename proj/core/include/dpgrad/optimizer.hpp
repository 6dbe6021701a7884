// Copyright (c) 2026 The dpgrad authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "dpgrad/data.hpp"
#include "dpgrad/errors.hpp"
#include "dpgrad/grad_sample.hpp"
#include "dpgrad/layers.hpp"
#include "dpgrad/rng.hpp"
#include "dpgrad/validator.hpp"

namespace dpgrad {

struct DpOptimizerConfig {
  double noise_multiplier = 1.0;   // sigma
  double max_grad_norm = 1.0;      // C
  double learning_rate = 0.1;
  double expected_batch_size = 1;  // averaging denominator (q * N under Poisson)
  bool secure_mode = false;

  void check() const {
    if (noise_multiplier < 0.0) throw ParameterError("noise multiplier must be >= 0");
    if (!(max_grad_norm > 0.0)) throw ParameterError("max grad norm must be > 0");
    if (!(learning_rate > 0.0)) throw ParameterError("learning rate must be > 0");
    if (!(expected_batch_size > 0.0)) throw ParameterError("expected batch size must be > 0");
  }
};

/// Per-sample norms and clip factors for one physical batch.
/// scale_factors[i] == C / max(N_i, C) <= 1.
struct ClipSummary {
  std::vector<double> per_sample_norms;
  std::vector<double> scale_factors;
  std::size_t num_clipped = 0;
};

template <typename T>
using SummedGrads = std::vector<std::vector<Tensor<T>>>;

/// The three-stage gradient lifecycle: grad_sample (per-sample, unclipped)
/// -> summed_grad (clipped, aggregated, pre-noise) -> grad (noised,
/// averaged). zero_grad clears all three.
template <typename T>
struct GradientState {
  std::optional<GradSampleRecord<T>> grad_sample;
  std::optional<SummedGrads<T>> summed_grad;
  std::optional<SummedGrads<T>> grad;
  std::size_t accumulated_samples = 0;
  bool grad_sample_consumed = false;
};

/// Flat l2 norm of each sample's gradient across all parameters, plus the
/// clip factor C / max(N_i, C). Rejects non-finite gradients, naming the
/// offending parameter.
template <typename T>
std::pair<SummedGrads<T>, ClipSummary> clip_and_sum(const GradSampleRecord<T>& gs, double c) {
  if (!(c > 0.0)) throw ParameterError("clipping threshold must be > 0");
  if (gs.batch_size == 0) throw ParameterError("clip_and_sum on an empty batch");
  const std::size_t b = gs.batch_size;
  std::vector<double> sq(b, 0.0);
  for (std::size_t l = 0; l < gs.per_layer.size(); ++l) {
    for (std::size_t k = 0; k < gs.per_layer[l].size(); ++k) {
      const Tensor<T>& g = gs.per_layer[l][k];
      const std::size_t stride = g.numel() / b;
      for (std::size_t n = 0; n < b; ++n) {
        double acc = 0.0;
        const T* row = g.data() + n * stride;
        for (std::size_t j = 0; j < stride; ++j) {
          const double x = static_cast<double>(row[j]);
          if (!std::isfinite(x)) {
            const std::string name = (l < gs.param_names.size() && k < gs.param_names[l].size())
                                         ? gs.param_names[l][k]
                                         : std::to_string(k);
            throw NumericError("non-finite per-sample gradient in layer " + std::to_string(l) +
                               " parameter '" + name + "' (sample " + std::to_string(n) + ")");
          }
          acc += x * x;
        }
        sq[n] += acc;
      }
    }
  }
  ClipSummary summary;
  summary.per_sample_norms.resize(b);
  summary.scale_factors.resize(b);
  for (std::size_t n = 0; n < b; ++n) {
    const double norm = std::sqrt(sq[n]);
    summary.per_sample_norms[n] = norm;
    summary.scale_factors[n] = c / std::max(norm, c);
    if (norm > c) ++summary.num_clipped;
  }
  SummedGrads<T> summed(gs.per_layer.size());
  for (std::size_t l = 0; l < gs.per_layer.size(); ++l) {
    summed[l].reserve(gs.per_layer[l].size());
    for (std::size_t k = 0; k < gs.per_layer[l].size(); ++k) {
      const Tensor<T>& g = gs.per_layer[l][k];
      const std::size_t stride = g.numel() / b;
      Shape pshape(g.shape().begin() + 1, g.shape().end());
      Tensor<T> acc(pshape);
      for (std::size_t n = 0; n < b; ++n) {
        const T w = static_cast<T>(summary.scale_factors[n]);
        const T* row = g.data() + n * stride;
        for (std::size_t j = 0; j < stride; ++j) acc[j] += w * row[j];
      }
      summed[l].push_back(std::move(acc));
    }
  }
  return {std::move(summed), std::move(summary)};
}

/// summed + N(0, (sigma * C)^2) per coordinate. sigma == 0 is the identity
/// (no draws consumed).
template <typename T>
SummedGrads<T> add_noise(const SummedGrads<T>& summed, double sigma, double c, RngStream& rng) {
  if (sigma < 0.0) throw ParameterError("noise multiplier must be >= 0");
  if (sigma == 0.0) return summed;
  const double std_dev = sigma * c;
  SummedGrads<T> out(summed.size());
  for (std::size_t l = 0; l < summed.size(); ++l) {
    out[l].reserve(summed[l].size());
    for (const Tensor<T>& t : summed[l]) {
      out[l].push_back(add(t, gaussian<T>(t.shape(), std_dev, rng)));
    }
  }
  return out;
}

/// DP-SGD optimizer: clip, aggregate, noise, average by the expected batch
/// size, and take a plain SGD step. One instance per model; single-threaded
/// stepping.
template <typename T>
class DpOptimizer {
 public:
  DpOptimizer(ModelGraph<T>& model, DpOptimizerConfig cfg, RngStream noise_rng)
      : model_(&model), cfg_(cfg), rng_(std::move(noise_rng)) {
    cfg_.check();
  }

  /// Attach the engine's output for the current physical batch.
  void set_grad_sample(GradSampleRecord<T> gs) {
    if (state_.grad_sample && !state_.grad_sample_consumed) {
      throw LifecycleError(
          "previous grad_sample was never consumed; call virtual_step or step first");
    }
    if (state_.grad) {
      throw LifecycleError("grad from the last step is still present; call zero_grad first");
    }
    if (gs.per_layer.size() != model_->layers.size()) {
      throw DimensionError("grad sample record covers " + std::to_string(gs.per_layer.size()) +
                           " layers, model has " + std::to_string(model_->layers.size()));
    }
    state_.grad_sample = std::move(gs);
    state_.grad_sample_consumed = false;
  }

  /// Fold the pending per-sample gradients into the running summed_grad and
  /// release them, without noise or a parameter update. Decouples physical
  /// from logical batch sizes.
  ClipSummary virtual_step() {
    if (!state_.grad_sample || state_.grad_sample_consumed) {
      throw LifecycleError("virtual_step without a fresh grad_sample (run a backward first)");
    }
    ClipSummary summary = fold_pending();
    state_.grad_sample.reset();
    state_.grad_sample_consumed = false;
    return summary;
  }

  /// Close the logical batch: fold any pending per-sample gradients (they
  /// stay readable until zero_grad), add noise, average, and update the
  /// parameters.
  void step() {
    if (state_.grad) {
      throw LifecycleError("step called twice without zero_grad in between");
    }
    if (state_.grad_sample && !state_.grad_sample_consumed) {
      last_clip_ = fold_pending();
      state_.grad_sample_consumed = true;
    }
    if (!state_.summed_grad) {
      throw LifecycleError(
          "step with no accumulated samples; run a backward or use step_empty_batch for a "
          "noise-only update");
    }
    finish_step();
  }

  /// Noise-only update for an empty Poisson batch: summed_grad is zero, the
  /// mechanism still fires so the accounting stays honest.
  void step_empty_batch() {
    if (state_.grad) {
      throw LifecycleError("step called twice without zero_grad in between");
    }
    if ((state_.grad_sample && !state_.grad_sample_consumed) || state_.summed_grad) {
      throw LifecycleError("step_empty_batch with gradients pending");
    }
    SummedGrads<T> zeros(model_->layers.size());
    for (std::size_t l = 0; l < model_->layers.size(); ++l) {
      for (const auto& p : model_->layers[l].params) {
        zeros[l].push_back(Tensor<T>(p.value.shape()));
      }
    }
    state_.summed_grad = std::move(zeros);
    state_.accumulated_samples = 0;
    finish_step();
  }

  /// Clear all three lifecycle stages. Idempotent.
  void zero_grad() {
    state_.grad_sample.reset();
    state_.summed_grad.reset();
    state_.grad.reset();
    state_.accumulated_samples = 0;
    state_.grad_sample_consumed = false;
  }

  const GradientState<T>& state() const { return state_; }
  const ClipSummary& last_clip_summary() const { return last_clip_; }
  const DpOptimizerConfig& config() const { return cfg_; }

  double noise_multiplier() const { return cfg_.noise_multiplier; }
  /// Scheduler hook; takes effect at the next step.
  void set_noise_multiplier(double sigma) {
    if (sigma < 0.0) throw ParameterError("noise multiplier must be >= 0");
    cfg_.noise_multiplier = sigma;
  }
  void set_expected_batch_size(double e) {
    if (!(e > 0.0)) throw ParameterError("expected batch size must be > 0");
    cfg_.expected_batch_size = e;
  }

 private:
  ClipSummary fold_pending() {
    auto [summed, summary] = clip_and_sum(*state_.grad_sample, cfg_.max_grad_norm);
    if (!state_.summed_grad) {
      state_.summed_grad = std::move(summed);
    } else {
      SummedGrads<T>& acc = *state_.summed_grad;
      for (std::size_t l = 0; l < acc.size(); ++l) {
        for (std::size_t k = 0; k < acc[l].size(); ++k) {
          acc[l][k] = add(acc[l][k], summed[l][k]);
        }
      }
    }
    state_.accumulated_samples += state_.grad_sample->batch_size;
    return summary;
  }

  void finish_step() {
    SummedGrads<T> noised =
        add_noise(*state_.summed_grad, cfg_.noise_multiplier, cfg_.max_grad_norm, rng_);
    const T denom = static_cast<T>(cfg_.expected_batch_size);
    const T lr = static_cast<T>(cfg_.learning_rate);
    SummedGrads<T> final_grads(noised.size());
    for (std::size_t l = 0; l < noised.size(); ++l) {
      for (std::size_t k = 0; k < noised[l].size(); ++k) {
        Tensor<T> g = scale(noised[l][k], T(1) / denom);
        Tensor<T>& w = model_->layers[l].params[k].value;
        w = sub(w, scale(g, lr));
        final_grads[l].push_back(std::move(g));
      }
    }
    state_.grad = std::move(final_grads);
  }

  ModelGraph<T>* model_;
  DpOptimizerConfig cfg_;
  RngStream rng_;
  GradientState<T> state_;
  ClipSummary last_clip_;
};

/// Noise multiplier schedule over epochs. Every schedule keeps sigma >= 0.
struct NoiseSchedule {
  enum class Kind { constant, exponential, step, custom };

  Kind kind = Kind::constant;
  double initial_sigma = 1.0;
  double gamma = 1.0;        // exponential: sigma0 * gamma^epoch
  double factor = 1.0;       // step: sigma0 * factor^(epoch / period)
  std::size_t period = 1;
  std::vector<double> table;  // custom: per-epoch values, last entry persists
  double current = 1.0;

  static NoiseSchedule constant(double sigma) {
    check_sigma(sigma);
    NoiseSchedule s;
    s.kind = Kind::constant;
    s.initial_sigma = s.current = sigma;
    return s;
  }
  static NoiseSchedule exponential(double sigma0, double gamma) {
    check_sigma(sigma0);
    if (gamma < 0.0) throw ParameterError("exponential schedule needs gamma >= 0");
    NoiseSchedule s;
    s.kind = Kind::exponential;
    s.initial_sigma = s.current = sigma0;
    s.gamma = gamma;
    return s;
  }
  static NoiseSchedule step(double sigma0, double factor, std::size_t period) {
    check_sigma(sigma0);
    if (factor < 0.0) throw ParameterError("step schedule needs factor >= 0");
    if (period == 0) throw ParameterError("step schedule needs period >= 1");
    NoiseSchedule s;
    s.kind = Kind::step;
    s.initial_sigma = s.current = sigma0;
    s.factor = factor;
    s.period = period;
    return s;
  }
  static NoiseSchedule custom(std::vector<double> table) {
    if (table.empty()) throw ParameterError("custom schedule needs at least one sigma");
    for (double v : table) check_sigma(v);
    NoiseSchedule s;
    s.kind = Kind::custom;
    s.initial_sigma = s.current = table.front();
    s.table = std::move(table);
    return s;
  }

  double sigma_at(std::size_t epoch) const {
    switch (kind) {
      case Kind::constant:
        return initial_sigma;
      case Kind::exponential:
        return initial_sigma * std::pow(gamma, static_cast<double>(epoch));
      case Kind::step:
        return initial_sigma * std::pow(factor, static_cast<double>(epoch / period));
      case Kind::custom:
        return table[std::min(epoch, table.size() - 1)];
    }
    return initial_sigma;
  }

 private:
  static void check_sigma(double sigma) {
    if (sigma < 0.0) throw ParameterError("schedule sigma must be >= 0");
  }
};

/// Evaluate the schedule for an epoch, update its current value, and return
/// the sigma the optimizer and accountant should use.
inline double schedule_noise(NoiseSchedule& sched, std::size_t epoch) {
  sched.current = sched.sigma_at(epoch);
  return sched.current;
}

/// Thin handle combining a model with the rule registry the engine should
/// use: forward stays untouched, forward_backward produces per-sample
/// gradients in one pass.
template <typename T>
class GradSampleModule {
 public:
  GradSampleModule(ModelGraph<T>& model, GradSamplerRegistry<T> registry)
      : model_(&model), registry_(std::move(registry)) {}

  Tensor<T> forward_only(const Tensor<T>& input) const {
    return forward(*model_, input).first;
  }

  EngineResult<T> forward_backward(const Tensor<T>& input, const Tensor<T>& targets,
                                   LossKind loss) const {
    return compute_grad_samples(*model_, input, targets, loss, registry_);
  }

  ModelGraph<T>& model() { return *model_; }
  const ModelGraph<T>& model() const { return *model_; }
  const GradSamplerRegistry<T>& registry() const { return registry_; }

 private:
  ModelGraph<T>* model_;
  GradSamplerRegistry<T> registry_;
};

struct LoaderConfig {
  double sample_rate = 0.0;
  std::size_t dataset_size = 0;
  std::uint64_t seed = 0;  // ignored in secure mode
};

template <typename T>
struct PrivateComponents {
  GradSampleModule<T> module;
  DpOptimizer<T> optimizer;
  PoissonSampler sampler;
};

/// Validate the model, then wrap the three training objects: the model with
/// grad-sample support, the optimizer with clipping and noise, and a Poisson
/// loader. After this call, the training loop keeps its usual shape.
///
/// In secure mode both the noise stream and the batch composition come from
/// the OS entropy stream; seeds are ignored.
template <typename T>
PrivateComponents<T> make_private(ModelGraph<T>& model, const DpOptimizerConfig& cfg,
                                  const LoaderConfig& loader,
                                  GradSamplerRegistry<T> registry =
                                      GradSamplerRegistry<T>::with_defaults(),
                                  std::uint64_t noise_seed = 0) {
  cfg.check();
  const std::vector<Violation> violations = validate(model, registry);
  if (!violations.empty()) {
    std::vector<std::string> lines;
    lines.reserve(violations.size());
    std::string msg = "model failed DP validation:";
    for (const Violation& v : violations) {
      lines.push_back(violation_line(v));
      msg += "\n  " + lines.back();
    }
    throw ValidationError(msg, std::move(lines));
  }
  RngStream noise_rng =
      cfg.secure_mode ? RngStream::secure() : RngStream::standard(noise_seed);
  RngStream sampler_rng =
      cfg.secure_mode ? RngStream::secure() : RngStream::standard(loader.seed);
  return PrivateComponents<T>{
      GradSampleModule<T>(model, std::move(registry)),
      DpOptimizer<T>(model, cfg, std::move(noise_rng)),
      PoissonSampler(loader.sample_rate, loader.dataset_size, std::move(sampler_rng))};
}

}  // namespace dpgrad
