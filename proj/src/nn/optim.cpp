// SPDX-License-Identifier: Apache-2.0
#include "synhat/nn/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace synhat::nn {

AdamW::AdamW(NamedParams params, AdamWConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& [name, t] : params_) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t p = 0; p < params_.size(); ++p) {
    Tensor& t = params_[p].second;
    auto w = t.data();
    auto g = t.grad();
    auto& m = m_[p];
    auto& v = v_[p];
    for (std::size_t i = 0; i < w.size(); ++i) {
      w[i] -= cfg_.lr * cfg_.weight_decay * w[i];
      if (g.empty()) continue;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mh = m[i] / bc1;
      const double vh = v[i] / bc2;
      w[i] -= cfg_.lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
  zero_grad();
}

void AdamW::zero_grad() {
  for (auto& [name, t] : params_) t.zero_grad();
}

double clip_grad_norm(NamedParams& params, double max_norm) {
  double sq = 0;
  for (auto& [name, t] : params)
    for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    const double s = max_norm / norm;
    for (auto& [name, t] : params)
      for (double& g : t.grad()) g *= s;
  }
  return norm;
}

void ema_update(std::vector<double>& shadow, const std::vector<double>& live, double decay) {
  if (shadow.size() != live.size())
    throw std::invalid_argument("ema_update: " + std::to_string(shadow.size()) + " vs " +
                                std::to_string(live.size()) + " values");
  for (std::size_t i = 0; i < shadow.size(); ++i)
    shadow[i] = decay * shadow[i] + (1.0 - decay) * live[i];
}

Ema::Ema(const NamedParams& params, double decay) : decay_(decay), shadow_(snapshot(params)) {}

void Ema::update(const NamedParams& params) {
  if (params.size() != shadow_.size()) throw std::invalid_argument("Ema::update: parameter count changed");
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto d = params[p].second.data();
    ema_update(shadow_[p], std::vector<double>(d.begin(), d.end()), decay_);
  }
}

std::vector<std::vector<double>> snapshot(const NamedParams& params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (const auto& [name, t] : params) out.emplace_back(t.data().begin(), t.data().end());
  return out;
}

void load_values(NamedParams& params, const std::vector<std::vector<double>>& values) {
  if (params.size() != values.size()) throw std::invalid_argument("load_values: parameter count mismatch");
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto d = params[p].second.data();
    if (d.size() != values[p].size())
      throw std::invalid_argument("load_values: size mismatch for " + params[p].first);
    std::copy(values[p].begin(), values[p].end(), d.begin());
  }
}

}  // namespace synhat::nn
