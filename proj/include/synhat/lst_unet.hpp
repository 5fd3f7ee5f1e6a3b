// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <memory>
#include <vector>

#include "synhat/nn/layers.hpp"

namespace synhat::unet {

using nn::Tensor;

struct UNetConfig {
  int base_channels = 128;
  std::vector<int> channel_multipliers{1, 2, 4, 8};
  int blocks_per_scale = 2;
  int embedding_dim = 32;
  int in_channels = 3;
  int out_channels = 3;
  /// GC-FiLM on: every DJTG block modulates its branches from a context vector.
  bool conditional = false;
  int context_dim = 0;
  int film_hidden = 64;
  /// Leading input channels holding coordinates (motion features read these).
  int coord_channels = 2;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
  int scales() const { return static_cast<int>(channel_multipliers.size()); }
  /// Sequence lengths must be a multiple of this inside the network.
  int length_multiple() const { return 1 << (scales() - 1); }
};

/// Sinusoidal step embedding: [sin(n f_k) | cos(n f_k)], f_k = 10000^(-k/half).
std::vector<double> timestep_embed(int n, int dim);
/// Stacked embeddings for a batch of steps, [B, dim].
Tensor timestep_embed_batch(const std::vector<int>& steps, int dim);

/// Velocity, curvature and windowed feature variance, each [B,1,W]:
///   velocity_t  = |x_{t+1} - x_t|,  curvature_t = |x_{t+2} - 2 x_{t+1} + x_t|
/// over the first `coord_channels` channels of x, with the difference sequences
/// right-padded by replication; variance_t = mean over channels of the
/// variance of f over the window {t-1, t, t+1} (replicated at the edges).
/// x is average-pooled to f's width first. Only the variance carries a
/// gradient (to f).
Tensor motion_features(const Tensor& x, const Tensor& f, int coord_channels);

/// alpha * jitter + (1 - alpha) * drift.
Tensor fuse(const Tensor& jitter, const Tensor& drift, const Tensor& alpha);

/// (1 + gamma) * f + beta with gamma, beta [B,C] broadcast over width.
Tensor film(const Tensor& f, const Tensor& gamma, const Tensor& beta);

struct DJTGOutput {
  Tensor fused;
  Tensor alpha;
  Tensor jitter;
  Tensor drift;
};

/// Dual-branch Drift-Jitter TempoGate block.
class DJTGBlock : public nn::Module {
 public:
  DJTGBlock(int channels, int dilation, int temb_dim, const UNetConfig& cfg, nn::Rng& rng);

  /// Gated dilated branch: tanh(M1) * sigmoid(M2), M = conv(f) split in half.
  Tensor jitter_branch(const Tensor& f) const;
  /// Depthwise k=3 conv, pointwise 1x1 conv, SiLU. `pre_pointwise` receives
  /// the depthwise output when non-null.
  Tensor drift_branch(const Tensor& f, Tensor* pre_pointwise = nullptr) const;
  /// (gamma, beta) from the context; both [B,C].
  std::pair<Tensor, Tensor> film_params(const Tensor& context) const;

  /// Full block; the returned `fused` is the residual output f + fusion.
  DJTGOutput forward(const Tensor& f, const Tensor& x_in, const Tensor& temb, const Tensor& context) const;

  nn::Conv1d jitter_conv;
  nn::Conv1d drift_depthwise;
  nn::Conv1d drift_pointwise;
  nn::Conv1d fusion_conv;
  nn::Linear fusion_temb;
  std::unique_ptr<nn::Linear> film_hidden;
  std::unique_ptr<nn::Linear> film_out;

 private:
  int channels_;
  int coord_channels_;
};

/// GroupNorm-SiLU-Conv twice with a per-block step-embedding projection.
class ResBlock : public nn::Module {
 public:
  ResBlock(int in, int out, int temb_dim, nn::Rng& rng);
  Tensor forward(const Tensor& x, const Tensor& temb_act) const;

 private:
  nn::GroupNorm norm1_;
  nn::Conv1d conv1_;
  nn::Linear temb_proj_;
  nn::GroupNorm norm2_;
  nn::Conv1d conv2_;
  std::unique_ptr<nn::Conv1d> skip_;
};

/// Encoder-decoder 1-D UNet predicting noise for [B, in_channels, W] inputs;
/// output is [B, out_channels, W].
class LSTUNet : public nn::Module {
 public:
  LSTUNet(const UNetConfig& cfg, nn::Rng& rng);

  /// Any width >= 1: inputs are right-padded by replication to a multiple of
  /// 2^(scales-1) and the output truncated back. `context` is [B, context_dim]
  /// and required iff the network is conditional; otherwise ignored.
  Tensor forward(const Tensor& x, const std::vector<int>& steps, const Tensor& context = Tensor()) const;

  /// Forward pass that also reports every DJTG block's internals.
  Tensor forward_traced(const Tensor& x, const std::vector<int>& steps, const Tensor& context,
                        std::vector<DJTGOutput>* trace) const;

  const UNetConfig& config() const { return cfg_; }

 private:
  UNetConfig cfg_;
  int temb_dim_;
  nn::Linear time1_;
  nn::Linear time2_;
  nn::Conv1d in_conv_;
  std::vector<std::unique_ptr<ResBlock>> enc_blocks_;
  std::vector<std::unique_ptr<DJTGBlock>> enc_gates_;
  std::vector<std::unique_ptr<nn::Conv1d>> downs_;
  std::unique_ptr<ResBlock> mid1_;
  std::unique_ptr<ResBlock> mid2_;
  std::vector<std::unique_ptr<ResBlock>> dec_blocks_;
  std::vector<std::unique_ptr<DJTGBlock>> dec_gates_;
  std::vector<std::unique_ptr<nn::Conv1d>> ups_;
  nn::GroupNorm out_norm_;
  nn::Conv1d out_conv_;
};

}  // namespace synhat::unet
