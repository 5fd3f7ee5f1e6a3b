// SPDX-License-Identifier: Apache-2.0
#include "synhat/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace synhat::nn {

NamedParams Module::parameters() const {
  NamedParams out;
  collect("", out);
  return out;
}

std::size_t Module::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t.numel();
  return n;
}

void Module::zero_grad() {
  for (auto& [name, t] : parameters()) t.zero_grad();
}

Tensor& Module::register_parameter(const std::string& name, Tensor t) {
  t.set_requires_grad(true);
  params_.emplace_back(name, std::move(t));
  return params_.back().second;
}

void Module::register_module(const std::string& name, Module& child) {
  children_.emplace_back(name, &child);
}

void Module::collect(const std::string& prefix, NamedParams& out) const {
  for (const auto& [name, t] : params_) out.emplace_back(prefix + name, t);
  for (const auto& [name, child] : children_) child->collect(prefix + name + ".", out);
}

Tensor uniform_init(Shape shape, int fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

int group_count(int channels, int preferred) {
  for (int g = std::min(preferred, channels); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

Linear::Linear(int in, int out, Rng& rng, bool with_bias) {
  weight = register_parameter("weight", uniform_init({out, in}, in, rng));
  if (with_bias) bias = register_parameter("bias", uniform_init({out}, in, rng));
}

void Linear::zero_init() {
  for (double& v : weight.data()) v = 0.0;
  if (bias.defined())
    for (double& v : bias.data()) v = 0.0;
}

Conv1d::Conv1d(int in, int out, int kernel, Rng& rng, int stride, int dilation, int groups) {
  if (kernel % 2 == 0) throw std::invalid_argument("Conv1d: kernel must be odd");
  if (groups != 1 && (groups != in || out != in))
    throw std::invalid_argument("Conv1d: only dense or depthwise convolutions");
  const int in_per_group = in / groups;
  weight = register_parameter("weight", uniform_init({out, in_per_group, kernel}, in_per_group * kernel, rng));
  bias = register_parameter("bias", uniform_init({out}, in_per_group * kernel, rng));
  spec.stride = stride;
  spec.dilation = dilation;
  spec.groups = groups;
  spec.padding = dilation * (kernel - 1) / 2;
}

void Conv1d::zero_init() {
  for (double& v : weight.data()) v = 0.0;
  for (double& v : bias.data()) v = 0.0;
}

GroupNorm::GroupNorm(int groups, int channels) : groups_(groups) {
  gamma = register_parameter("gamma", Tensor::full({channels}, 1.0));
  beta = register_parameter("beta", Tensor::zeros({channels}));
}

LayerNorm::LayerNorm(int dim) {
  gamma = register_parameter("gamma", Tensor::full({dim}, 1.0));
  beta = register_parameter("beta", Tensor::zeros({dim}));
}

}  // namespace synhat::nn
