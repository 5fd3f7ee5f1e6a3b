// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "synhat/nn/ops.hpp"
#include "synhat/nn/tensor.hpp"

namespace synhat::nn {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

/// Base for anything owning parameters. Subclasses register their tensors and
/// children once in the constructor; `parameters()` walks the tree in
/// registration order, which is also the checkpoint order.
class Module {
 public:
  virtual ~Module() = default;
  Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;
  // Children are registered by address, so modules never move.
  Module(Module&&) = delete;
  Module& operator=(Module&&) = delete;

  NamedParams parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

 protected:
  Tensor& register_parameter(const std::string& name, Tensor t);
  void register_module(const std::string& name, Module& child);

 private:
  void collect(const std::string& prefix, NamedParams& out) const;

  std::vector<std::pair<std::string, Tensor>> params_;
  std::vector<std::pair<std::string, Module*>> children_;
};

using Rng = std::mt19937_64;

class Linear : public Module {
 public:
  Linear(int in, int out, Rng& rng, bool bias = true);
  Tensor forward(const Tensor& x) const { return linear(x, weight, bias); }
  /// Zeroes weight and bias (identity-at-init heads).
  void zero_init();

  Tensor weight;
  Tensor bias;
};

class Conv1d : public Module {
 public:
  /// "Same" padding for stride 1; stride 2 halves an even width.
  Conv1d(int in, int out, int kernel, Rng& rng, int stride = 1, int dilation = 1, int groups = 1);
  Tensor forward(const Tensor& x) const { return conv1d(x, weight, bias, spec); }
  void zero_init();

  Tensor weight;
  Tensor bias;
  Conv1dSpec spec;
};

class GroupNorm : public Module {
 public:
  GroupNorm(int groups, int channels);
  Tensor forward(const Tensor& x) const { return group_norm(x, groups_, gamma, beta); }

  Tensor gamma;
  Tensor beta;

 private:
  int groups_;
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(int dim);
  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta); }

  Tensor gamma;
  Tensor beta;
};

/// Uniform(-bound, bound) tensor with bound = 1/sqrt(fan_in), as PyTorch's
/// default conv/linear init.
Tensor uniform_init(Shape shape, int fan_in, Rng& rng);

/// Largest group count <= `preferred` dividing `channels`.
int group_count(int channels, int preferred = 8);

}  // namespace synhat::nn
