// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "json.hpp"
#include "synhat/nn/layers.hpp"
#include "synhat/nn/tensor.hpp"

namespace synhat::diffusion {

enum class ScheduleKind { Cosine, Linear };

/// Variance schedule indexed by step n in 1..N (stored 0-based).
struct Schedule {
  ScheduleKind kind = ScheduleKind::Cosine;
  int steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  /// Nichol-Dhariwal cosine schedule with offset s; betas capped at 0.999.
  static Schedule cosine(int steps = 1000, double s = 0.008);
  static Schedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

  double beta(int n) const { return betas.at(n - 1); }
  double alpha(int n) const { return alphas.at(n - 1); }
  /// alpha_bar(0) = 1.
  double alpha_bar(int n) const { return n == 0 ? 1.0 : alpha_bars.at(n - 1); }
  /// beta_tilde_n = beta_n (1 - alpha_bar_{n-1}) / (1 - alpha_bar_n).
  double posterior_variance(int n) const;

  nlohmann::json to_json() const;
  static Schedule from_json(const nlohmann::json& j);
};

/// Predicts the noise of a batch x[B,C,W] at per-item steps.
using Denoiser = std::function<nn::Tensor(const nn::Tensor& x, const std::vector<int>& steps)>;

/// x_n = sqrt(abar_n) x0 + sqrt(1 - abar_n) eps, per batch item. Throws when a
/// step is outside 1..N.
nn::Tensor forward_noise(const Schedule& s, const nn::Tensor& x0, const std::vector<int>& steps,
                         const nn::Tensor& eps);

/// x0 implied by x_n and a noise estimate.
nn::Tensor predict_x0(const Schedule& s, const nn::Tensor& xn, const std::vector<int>& steps,
                      const nn::Tensor& eps);

/// Noise predictor built from a network that outputs
/// v = sqrt(abar_n) eps - sqrt(1 - abar_n) x0, via eps = sqrt(abar_n) v + sqrt(1 - abar_n) x_n.
Denoiser from_v_prediction(const Schedule& s, Denoiser net);

/// mean(w * (eps - denoiser(x_n))^2); `weight` is [B,1,W], [B,C,W] or undefined.
nn::Tensor eps_loss(const Denoiser& denoiser, const Schedule& s, const nn::Tensor& x0,
                    const std::vector<int>& steps, const nn::Tensor& eps, const nn::Tensor& weight);

/// Event-emphasis loss weighting.
struct EventWeighting {
  bool enabled = true;
  double alpha0 = 0.15;
  double alpha1_max = 6.0;
  double alpha_near = 0.6;
  int blur_radius = 2;
  double warmup_fraction = 0.15;
  /// Also weight the mask channel. Off, the mask loss stays uniform: weights
  /// computed from the target mask otherwise skew the learned stay frequency.
  bool mask_channel = false;
};

/// alpha1 after `progress` in [0,1] of training: cosine ramp 0 -> max over the
/// warm-up fraction, then constant.
double alpha1_at(const EventWeighting& cfg, double progress);

/// w_j = alpha0 + alpha1 * blur(mask)_j, rescaled to mean 1. The blur kernel is
/// k(d) = alpha_near^(d^2) for |d| <= radius, so k(0)=1 and k(+-1)=alpha_near.
/// All ones when weighting is disabled.
std::vector<double> event_weights(const EventWeighting& cfg, const std::vector<double>& mask, double alpha1);

/// One ancestral step x_n -> x_{n-1} with sigma^2 = beta_tilde_n; no noise at
/// n = 1. All batch items share step n.
nn::Tensor ddpm_step(const Denoiser& denoiser, const Schedule& s, const nn::Tensor& xn, int n, nn::Rng& rng);

/// Runs the full ancestral chain from x_N.
nn::Tensor ddpm_sample(const Denoiser& denoiser, const Schedule& s, const nn::Tensor& x_noise, nn::Rng& rng);

struct SamplerConfig {
  int ddim_steps = 50;
  double eta = 0.0;
  /// Optional per-channel bounds for the predicted x0; empty disables
  /// clipping. When clipping, the noise estimate is re-derived from the
  /// clipped x0 so the update stays on a consistent path.
  std::vector<double> clip_low;
  std::vector<double> clip_high;
};

/// Evenly strided steps tau_k = round(k N / S), k = 1..S.
std::vector<int> ddim_timesteps(const Schedule& s, int ddim_steps);

/// Generalized DDIM (Song et al.) from x_N over ddim_timesteps:
///   x0_hat  = (x - sqrt(1 - a) eps_hat) / sqrt(a)
///   sigma   = eta sqrt((1 - a_prev) / (1 - a)) sqrt(1 - a / a_prev)
///   x_prev  = sqrt(a_prev) x0_hat + sqrt(1 - a_prev - sigma^2) eps_hat + sigma z
/// with a = abar_tau_k and a_prev = abar_tau_{k-1} (1 at the end). With eta = 0
/// the result is a pure function of the denoiser and x_noise; `rng` is unused.
nn::Tensor ddim_sample(const Denoiser& denoiser, const Schedule& s, const nn::Tensor& x_noise,
                       const SamplerConfig& cfg, nn::Rng& rng);

/// Standard normal tensor.
nn::Tensor randn(const nn::Shape& shape, nn::Rng& rng);

// ----- checkpoints -----

/// Versioned binary archive: magic "SYNHATCK", u32 version, JSON metadata,
/// then named double tensors.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  struct Entry {
    std::string name;
    nn::Shape shape;
    std::vector<double> values;
  };
  std::vector<Entry> tensors;

  void add(const std::string& prefix, const nn::NamedParams& params);
  void add(const std::string& prefix, const nn::NamedParams& like, const std::vector<std::vector<double>>& values);
  const Entry* find(const std::string& name) const;
  /// Copies `prefix + name` entries into `params`; throws on a missing or
  /// mis-shaped entry.
  void load_into(const std::string& prefix, nn::NamedParams& params) const;
  std::vector<std::vector<double>> values(const std::string& prefix, const nn::NamedParams& like) const;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace synhat::diffusion
