// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "synhat/nn/layers.hpp"

namespace synhat::nn {

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Adam with decoupled weight decay. Holds handles to the parameters it
/// updates; moment buffers follow the same order.
class AdamW {
 public:
  AdamW(NamedParams params, AdamWConfig cfg);

  /// Applies one update from the accumulated gradients, then clears them.
  void step();
  void zero_grad();

  long long steps() const { return t_; }
  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }

  /// Moment buffers for checkpointing (m then v, per parameter).
  std::vector<std::vector<double>>& first_moments() { return m_; }
  std::vector<std::vector<double>>& second_moments() { return v_; }
  void set_steps(long long t) { t_ = t; }

 private:
  NamedParams params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  long long t_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
double clip_grad_norm(NamedParams& params, double max_norm);

/// Exponential moving average of parameter values.
class Ema {
 public:
  Ema(const NamedParams& params, double decay);

  /// shadow <- decay * shadow + (1 - decay) * live.
  void update(const NamedParams& params);
  const std::vector<std::vector<double>>& shadow() const { return shadow_; }
  std::vector<std::vector<double>>& shadow() { return shadow_; }
  double decay() const { return decay_; }

 private:
  double decay_;
  std::vector<std::vector<double>> shadow_;
};

/// Elementwise shadow' = decay * shadow + (1 - decay) * live.
void ema_update(std::vector<double>& shadow, const std::vector<double>& live, double decay);

/// Copies of parameter values, e.g. to swap EMA weights in for sampling.
std::vector<std::vector<double>> snapshot(const NamedParams& params);
void load_values(NamedParams& params, const std::vector<std::vector<double>>& values);

}  // namespace synhat::nn
