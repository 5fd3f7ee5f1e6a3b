// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <memory>
#include <vector>

#include "synhat/data_model.hpp"
#include "synhat/nn/layers.hpp"

namespace synhat::bpem {

using nn::Tensor;

struct BpemConfig {
  int dim = 32;
  /// Number of coarse slots; the length of the visit vector.
  int slots = 0;
  int layers = 2;
  int heads = 4;
  int ff_mult = 4;
};

/// Temporal embedding with 1-based component index j:
/// sin(T / 10000^((j-1)/d)) for even j, cos(...) for odd j.
std::vector<double> positional_encoding(double T, int dim);

/// Pre-norm transformer encoder layer without dropout.
class EncoderLayer : public nn::Module {
 public:
  EncoderLayer(int dim, int heads, int ff_mult, nn::Rng& rng);
  Tensor forward(const Tensor& x) const;

 private:
  int heads_;
  nn::LayerNorm norm1_;
  nn::Linear q_, k_, v_, o_;
  nn::LayerNorm norm2_;
  nn::Linear ff1_, ff2_;
};

/// Behaviour pattern extractor: embeds coarse states and returns one context
/// vector per state.
class Bpem : public nn::Module {
 public:
  Bpem(const BpemConfig& cfg, nn::Rng& rng);

  /// e_s = W_c c + W_v v + b for c[n,2], v[n,L].
  Tensor spatial_embed(const Tensor& coords, const Tensor& visits) const;

  /// H[n,d] for states given as normalized coordinates and slot indices; the
  /// visit vector (length L) is shared by every state of the trace. Throws on
  /// empty input or a visit vector of the wrong length.
  Tensor encode(const std::vector<Coord>& coords, const std::vector<int>& slots,
                const std::vector<double>& visits) const;

  /// Per-state conditioning [n, 2d]: h_i next to mean(H).
  static Tensor context_vectors(const Tensor& H);

  const BpemConfig& config() const { return cfg_; }
  int context_dim() const { return 2 * cfg_.dim; }
  /// Number of encode() calls so far.
  long long encode_calls() const { return calls_.load(); }
  void reset_encode_calls() { calls_ = 0; }

  nn::Linear w_c;
  nn::Linear w_v;
  Tensor bias;

 private:
  BpemConfig cfg_;
  std::vector<std::unique_ptr<EncoderLayer>> layers_;
  nn::LayerNorm final_norm_;
  mutable std::atomic<long long> calls_{0};
};

}  // namespace synhat::bpem
