// SPDX-License-Identifier: Apache-2.0
#include "synhat/lst_unet.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "synhat/nn/ops.hpp"

namespace synhat::unet {

namespace {

Tensor slice_cols(const Tensor& m, int begin, int end) {
  const int rows = m.dim(0), cols = m.dim(1);
  return nn::slice_channels(m.reshape({rows, cols, 1}), begin, end).reshape({rows, end - begin});
}

// Mean-pools x[B,C,W0] by an integer factor to width W.
std::vector<double> pooled(const Tensor& x, int channels, int W) {
  const int B = x.dim(0), C = x.dim(1), W0 = x.dim(2);
  const int p = W0 / W;
  std::vector<double> out(static_cast<std::size_t>(B) * channels * W, 0.0);
  const auto d = x.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < channels; ++c)
      for (int t = 0; t < W; ++t) {
        double s = 0.0;
        for (int k = 0; k < p; ++k) s += d[(static_cast<std::size_t>(b) * C + c) * W0 + t * p + k];
        out[(static_cast<std::size_t>(b) * channels + c) * W + t] = s / p;
      }
  return out;
}

}  // namespace

void UNetConfig::validate() const {
  if (base_channels < 1 || embedding_dim < 2 || embedding_dim % 2 != 0)
    throw std::invalid_argument("base_channels must be positive and embedding_dim even");
  if (channel_multipliers.size() < 2) throw std::invalid_argument("at least two scales are required");
  if (channel_multipliers.front() != 1) throw std::invalid_argument("channel multipliers must start at 1");
  for (std::size_t i = 1; i < channel_multipliers.size(); ++i)
    if (channel_multipliers[i] <= channel_multipliers[i - 1])
      throw std::invalid_argument("channel multipliers must be strictly increasing");
  if (blocks_per_scale < 1) throw std::invalid_argument("blocks_per_scale must be >= 1");
  if (in_channels < 1 || out_channels < 1) throw std::invalid_argument("channel counts must be positive");
  if (coord_channels < 1 || coord_channels > in_channels)
    throw std::invalid_argument("coord_channels must lie in 1..in_channels");
  if (conditional && context_dim < 1) throw std::invalid_argument("conditional network needs context_dim > 0");
}

std::vector<double> timestep_embed(int n, int dim) {
  const int half = dim / 2;
  std::vector<double> out(dim);
  for (int k = 0; k < half; ++k) {
    const double f = std::exp(-std::log(10000.0) * k / half);
    out[k] = std::sin(n * f);
    out[half + k] = std::cos(n * f);
  }
  return out;
}

Tensor timestep_embed_batch(const std::vector<int>& steps, int dim) {
  std::vector<double> v;
  v.reserve(steps.size() * dim);
  for (int n : steps) {
    const auto e = timestep_embed(n, dim);
    v.insert(v.end(), e.begin(), e.end());
  }
  return Tensor::from({static_cast<int>(steps.size()), dim}, std::move(v));
}

Tensor motion_features(const Tensor& x, const Tensor& f, int coord_channels) {
  const int B = f.dim(0), W = f.dim(2);
  if (x.dim(0) != B || x.dim(2) % W != 0) throw std::invalid_argument("motion_features: width mismatch");
  const auto px = pooled(x, coord_channels, W);
  auto at = [&](int b, int c, int t) { return px[(static_cast<std::size_t>(b) * coord_channels + c) * W + t]; };
  std::vector<double> kin(static_cast<std::size_t>(B) * 2 * W, 0.0);
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < W; ++t) {
      // Difference sequences are defined on the first W-1 (W-2) positions and
      // continued by replication.
      const int tv = std::min(t, std::max(W - 2, 0));
      const int tc = std::min(t, std::max(W - 3, 0));
      double v2 = 0.0, c2 = 0.0;
      for (int c = 0; c < coord_channels; ++c) {
        if (W >= 2) {
          const double dv = at(b, c, tv + 1) - at(b, c, tv);
          v2 += dv * dv;
        }
        if (W >= 3) {
          const double dc = at(b, c, tc + 2) - 2.0 * at(b, c, tc + 1) + at(b, c, tc);
          c2 += dc * dc;
        }
      }
      kin[static_cast<std::size_t>(b) * 2 * W + t] = std::sqrt(v2);
      kin[static_cast<std::size_t>(b) * 2 * W + W + t] = std::sqrt(c2);
    }
  }
  return nn::concat_channels({Tensor::from({B, 2, W}, std::move(kin)), nn::window_variance(f)});
}

Tensor fuse(const Tensor& jitter, const Tensor& drift, const Tensor& alpha) {
  return nn::add(nn::mul(alpha, jitter), nn::mul(nn::add_scalar(nn::scale(alpha, -1.0), 1.0), drift));
}

Tensor film(const Tensor& f, const Tensor& gamma, const Tensor& beta) {
  return nn::add_channel(nn::add(f, nn::mul_channel(f, gamma)), beta);
}

// ----- DJTG -----

DJTGBlock::DJTGBlock(int channels, int dilation, int temb_dim, const UNetConfig& cfg, nn::Rng& rng)
    : jitter_conv(channels, 2 * channels, 3, rng, 1, dilation),
      drift_depthwise(channels, channels, 3, rng, 1, 1, channels),
      drift_pointwise(channels, channels, 1, rng),
      fusion_conv(3, channels, 3, rng),
      fusion_temb(temb_dim, channels, rng),
      channels_(channels),
      coord_channels_(cfg.coord_channels) {
  register_module("jitter", jitter_conv);
  register_module("drift_dw", drift_depthwise);
  register_module("drift_pw", drift_pointwise);
  register_module("fusion_conv", fusion_conv);
  register_module("fusion_temb", fusion_temb);
  if (cfg.conditional) {
    film_hidden = std::make_unique<nn::Linear>(cfg.context_dim, cfg.film_hidden, rng);
    film_out = std::make_unique<nn::Linear>(cfg.film_hidden, 2 * channels, rng);
    film_out->zero_init();
    register_module("film_hidden", *film_hidden);
    register_module("film_out", *film_out);
  }
}

Tensor DJTGBlock::jitter_branch(const Tensor& f) const {
  const Tensor m = jitter_conv.forward(f);
  return nn::mul(nn::tanh(nn::slice_channels(m, 0, channels_)),
                 nn::sigmoid(nn::slice_channels(m, channels_, 2 * channels_)));
}

Tensor DJTGBlock::drift_branch(const Tensor& f, Tensor* pre_pointwise) const {
  const Tensor dw = drift_depthwise.forward(f);
  if (pre_pointwise) *pre_pointwise = dw;
  return nn::silu(drift_pointwise.forward(dw));
}

std::pair<Tensor, Tensor> DJTGBlock::film_params(const Tensor& context) const {
  if (!film_out) throw std::logic_error("GC-FiLM is disabled for this block");
  const Tensor gb = film_out->forward(nn::silu(film_hidden->forward(context)));
  return {slice_cols(gb, 0, channels_), slice_cols(gb, channels_, 2 * channels_)};
}

DJTGOutput DJTGBlock::forward(const Tensor& f, const Tensor& x_in, const Tensor& temb, const Tensor& context) const {
  DJTGOutput out;
  out.jitter = jitter_branch(f);
  out.drift = drift_branch(f);
  if (film_out) {
    if (!context.defined()) throw std::invalid_argument("conditional DJTG block called without context");
    auto [gamma, beta] = film_params(context);
    out.jitter = film(out.jitter, gamma, beta);
    out.drift = film(out.drift, gamma, beta);
  }
  const Tensor motion = motion_features(x_in, f, coord_channels_);
  out.alpha = nn::sigmoid(nn::add_channel(fusion_conv.forward(motion), fusion_temb.forward(temb)));
  out.fused = nn::add(f, fuse(out.jitter, out.drift, out.alpha));
  return out;
}

// ----- ResBlock -----

ResBlock::ResBlock(int in, int out, int temb_dim, nn::Rng& rng)
    : norm1_(nn::group_count(in), in),
      conv1_(in, out, 3, rng),
      temb_proj_(temb_dim, out, rng),
      norm2_(nn::group_count(out), out),
      conv2_(out, out, 3, rng) {
  register_module("norm1", norm1_);
  register_module("conv1", conv1_);
  register_module("temb", temb_proj_);
  register_module("norm2", norm2_);
  register_module("conv2", conv2_);
  if (in != out) {
    skip_ = std::make_unique<nn::Conv1d>(in, out, 1, rng);
    register_module("skip", *skip_);
  }
}

Tensor ResBlock::forward(const Tensor& x, const Tensor& temb_act) const {
  Tensor h = conv1_.forward(nn::silu(norm1_.forward(x)));
  h = nn::add_channel(h, temb_proj_.forward(temb_act));
  h = conv2_.forward(nn::silu(norm2_.forward(h)));
  return nn::add(skip_ ? skip_->forward(x) : x, h);
}

// ----- UNet -----

LSTUNet::LSTUNet(const UNetConfig& cfg, nn::Rng& rng)
    : cfg_((cfg.validate(), cfg)),
      temb_dim_(4 * cfg.embedding_dim),
      time1_(cfg.embedding_dim, 4 * cfg.embedding_dim, rng),
      time2_(4 * cfg.embedding_dim, 4 * cfg.embedding_dim, rng),
      in_conv_(cfg.in_channels, cfg.base_channels, 3, rng),
      out_norm_(nn::group_count(cfg.base_channels), cfg.base_channels),
      out_conv_(cfg.base_channels, cfg.out_channels, 3, rng) {
  register_module("time1", time1_);
  register_module("time2", time2_);
  register_module("in_conv", in_conv_);
  const int S = cfg.scales();
  auto ch = [&](int l) { return cfg.base_channels * cfg.channel_multipliers[l]; };

  int prev = ch(0);
  for (int l = 0; l < S; ++l) {
    for (int b = 0; b < cfg.blocks_per_scale; ++b) {
      enc_blocks_.push_back(std::make_unique<ResBlock>(prev, ch(l), temb_dim_, rng));
      register_module("enc" + std::to_string(l) + ".res" + std::to_string(b), *enc_blocks_.back());
      prev = ch(l);
    }
    enc_gates_.push_back(std::make_unique<DJTGBlock>(ch(l), 1 << l, temb_dim_, cfg, rng));
    register_module("enc" + std::to_string(l) + ".djtg", *enc_gates_.back());
    if (l + 1 < S) {
      downs_.push_back(std::make_unique<nn::Conv1d>(ch(l), ch(l), 3, rng, 2));
      register_module("enc" + std::to_string(l) + ".down", *downs_.back());
    }
  }
  mid1_ = std::make_unique<ResBlock>(ch(S - 1), ch(S - 1), temb_dim_, rng);
  mid2_ = std::make_unique<ResBlock>(ch(S - 1), ch(S - 1), temb_dim_, rng);
  register_module("mid1", *mid1_);
  register_module("mid2", *mid2_);

  for (int l = S - 1; l >= 0; --l) {
    for (int b = 0; b < cfg.blocks_per_scale; ++b) {
      dec_blocks_.push_back(std::make_unique<ResBlock>(b == 0 ? 2 * ch(l) : ch(l), ch(l), temb_dim_, rng));
      register_module("dec" + std::to_string(l) + ".res" + std::to_string(b), *dec_blocks_.back());
    }
    dec_gates_.push_back(std::make_unique<DJTGBlock>(ch(l), 1 << l, temb_dim_, cfg, rng));
    register_module("dec" + std::to_string(l) + ".djtg", *dec_gates_.back());
    if (l > 0) {
      ups_.push_back(std::make_unique<nn::Conv1d>(ch(l), ch(l - 1), 3, rng));
      register_module("dec" + std::to_string(l) + ".up", *ups_.back());
    }
  }
  register_module("out_norm", out_norm_);
  register_module("out_conv", out_conv_);
}

Tensor LSTUNet::forward(const Tensor& x, const std::vector<int>& steps, const Tensor& context) const {
  return forward_traced(x, steps, context, nullptr);
}

Tensor LSTUNet::forward_traced(const Tensor& x, const std::vector<int>& steps, const Tensor& context,
                               std::vector<DJTGOutput>* trace) const {
  if (x.rank() != 3 || x.dim(1) != cfg_.in_channels)
    throw std::invalid_argument("LST-UNet expects [B," + std::to_string(cfg_.in_channels) + ",W], got " +
                                nn::shape_str(x.shape()));
  const int B = x.dim(0), W = x.dim(2);
  if (static_cast<int>(steps.size()) != B) throw std::invalid_argument("one step per batch item expected");
  Tensor ctx;
  if (cfg_.conditional) {
    if (!context.defined()) throw std::invalid_argument("conditional LST-UNet called without context");
    if (context.rank() != 2 || context.dim(0) != B || context.dim(1) != cfg_.context_dim)
      throw std::invalid_argument("context must be [B," + std::to_string(cfg_.context_dim) + "]");
    ctx = context;
  }

  const int m = cfg_.length_multiple();
  const int Wp = (W + m - 1) / m * m;
  const Tensor xp = Wp == W ? x : nn::pad_replicate(x, Wp);
  const Tensor x_in = xp.detach();

  const Tensor temb =
      nn::silu(time2_.forward(nn::silu(time1_.forward(timestep_embed_batch(steps, cfg_.embedding_dim)))));

  const int S = cfg_.scales();
  const int R = cfg_.blocks_per_scale;
  std::vector<Tensor> skips;
  Tensor h = in_conv_.forward(xp);
  for (int l = 0; l < S; ++l) {
    for (int b = 0; b < R; ++b) h = enc_blocks_[l * R + b]->forward(h, temb);
    DJTGOutput g = enc_gates_[l]->forward(h, x_in, temb, ctx);
    h = g.fused;
    if (trace) trace->push_back(std::move(g));
    skips.push_back(h);
    if (l + 1 < S) h = downs_[l]->forward(h);
  }
  h = mid2_->forward(mid1_->forward(h, temb), temb);
  for (int i = 0, l = S - 1; l >= 0; --l, ++i) {
    h = nn::concat_channels({h, skips[l]});
    for (int b = 0; b < R; ++b) h = dec_blocks_[i * R + b]->forward(h, temb);
    DJTGOutput g = dec_gates_[i]->forward(h, x_in, temb, ctx);
    h = g.fused;
    if (trace) trace->push_back(std::move(g));
    if (l > 0) h = ups_[i]->forward(nn::upsample_nearest2(h));
  }
  Tensor out = out_conv_.forward(nn::silu(out_norm_.forward(h)));
  return Wp == W ? out : nn::slice_width(out, 0, W);
}

}  // namespace synhat::unet
