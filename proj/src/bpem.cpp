// SPDX-License-Identifier: Apache-2.0
#include "synhat/bpem.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "synhat/nn/ops.hpp"

namespace synhat::bpem {

std::vector<double> positional_encoding(double T, int dim) {
  std::vector<double> e(dim);
  for (int j = 1; j <= dim; ++j) {
    const double arg = T / std::pow(10000.0, (j - 1.0) / dim);
    e[j - 1] = j % 2 == 0 ? std::sin(arg) : std::cos(arg);
  }
  return e;
}

EncoderLayer::EncoderLayer(int dim, int heads, int ff_mult, nn::Rng& rng)
    : heads_(heads),
      norm1_(dim),
      q_(dim, dim, rng),
      k_(dim, dim, rng),
      v_(dim, dim, rng),
      o_(dim, dim, rng),
      norm2_(dim),
      ff1_(dim, ff_mult * dim, rng),
      ff2_(ff_mult * dim, dim, rng) {
  register_module("norm1", norm1_);
  register_module("q", q_);
  register_module("k", k_);
  register_module("v", v_);
  register_module("o", o_);
  register_module("norm2", norm2_);
  register_module("ff1", ff1_);
  register_module("ff2", ff2_);
}

Tensor EncoderLayer::forward(const Tensor& x) const {
  const Tensor a = norm1_.forward(x);
  Tensor h = nn::add(x, o_.forward(nn::multi_head_attention(q_.forward(a), k_.forward(a), v_.forward(a), heads_)));
  return nn::add(h, ff2_.forward(nn::relu(ff1_.forward(norm2_.forward(h)))));
}

Bpem::Bpem(const BpemConfig& cfg, nn::Rng& rng)
    : w_c(2, cfg.dim, rng, false), w_v(std::max(cfg.slots, 1), cfg.dim, rng, false), cfg_(cfg), final_norm_(cfg.dim) {
  if (cfg.slots < 1) throw std::invalid_argument("BPEM needs the coarse slot count");
  if (cfg.dim % cfg.heads != 0) throw std::invalid_argument("BPEM width must be divisible by the head count");
  register_module("w_c", w_c);
  register_module("w_v", w_v);
  bias = register_parameter("bias", nn::uniform_init({cfg.dim}, 2 + cfg.slots, rng));
  for (int l = 0; l < cfg.layers; ++l) {
    layers_.push_back(std::make_unique<EncoderLayer>(cfg.dim, cfg.heads, cfg.ff_mult, rng));
    register_module("layer" + std::to_string(l), *layers_.back());
  }
  register_module("final_norm", final_norm_);
}

Tensor Bpem::spatial_embed(const Tensor& coords, const Tensor& visits) const {
  if (visits.rank() != 2 || visits.dim(1) != cfg_.slots)
    throw std::invalid_argument("visit vectors must have length " + std::to_string(cfg_.slots));
  const int n = coords.dim(0);
  return nn::add(nn::add(w_c.forward(coords), w_v.forward(visits)), nn::repeat_rows(bias.reshape({1, cfg_.dim}), n));
}

Tensor Bpem::encode(const std::vector<Coord>& coords, const std::vector<int>& slots,
                    const std::vector<double>& visits) const {
  ++calls_;
  if (coords.empty()) throw std::invalid_argument("BPEM cannot encode an empty state list");
  if (coords.size() != slots.size()) throw std::invalid_argument("coords and slots differ in length");
  if (static_cast<int>(visits.size()) != cfg_.slots)
    throw std::invalid_argument("visit vector has length " + std::to_string(visits.size()) + ", expected " +
                                std::to_string(cfg_.slots));
  const int n = static_cast<int>(coords.size()), d = cfg_.dim;
  std::vector<double> c, v, pos;
  c.reserve(2 * n);
  for (const Coord& x : coords) {
    c.push_back(x.lat);
    c.push_back(x.lon);
  }
  for (int i = 0; i < n; ++i) {
    v.insert(v.end(), visits.begin(), visits.end());
    const auto e = positional_encoding(slots[i], d);
    pos.insert(pos.end(), e.begin(), e.end());
  }
  Tensor h = nn::add(spatial_embed(Tensor::from({n, 2}, std::move(c)), Tensor::from({n, cfg_.slots}, std::move(v))),
                     Tensor::from({n, d}, std::move(pos)));
  for (const auto& layer : layers_) h = layer->forward(h);
  return final_norm_.forward(h);
}

Tensor Bpem::context_vectors(const Tensor& H) {
  return nn::concat_cols(H, nn::repeat_rows(nn::mean_rows(H), H.dim(0)));
}

}  // namespace synhat::bpem
