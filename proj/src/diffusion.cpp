// SPDX-License-Identifier: Apache-2.0
#include "synhat/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <stdexcept>

#include "synhat/data_model.hpp"
#include "synhat/nn/ops.hpp"
#include "synhat/nn/optim.hpp"

namespace synhat::diffusion {

using nn::Tensor;

namespace {

void finish(Schedule& s) {
  s.alphas.resize(s.steps);
  s.alpha_bars.resize(s.steps);
  double prod = 1.0;
  for (int i = 0; i < s.steps; ++i) {
    s.alphas[i] = 1.0 - s.betas[i];
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
}

void check_steps(const Schedule& s, const Tensor& x, const std::vector<int>& steps) {
  if (x.rank() < 1 || static_cast<int>(steps.size()) != x.dim(0))
    throw std::invalid_argument("one diffusion step per batch item expected");
  for (int n : steps)
    if (n < 1 || n > s.steps)
      throw std::out_of_range("diffusion step " + std::to_string(n) + " outside 1.." + std::to_string(s.steps));
}

std::size_t item_size(const Tensor& x) { return x.numel() / static_cast<std::size_t>(x.dim(0)); }

}  // namespace

Schedule Schedule::cosine(int steps, double s) {
  Schedule out;
  out.kind = ScheduleKind::Cosine;
  out.steps = steps;
  auto f = [&](double n) {
    const double c = std::cos((n / steps + s) / (1.0 + s) * M_PI / 2.0);
    return c * c;
  };
  const double f0 = f(0.0);
  out.betas.resize(steps);
  for (int n = 1; n <= steps; ++n) {
    const double prev = f(n - 1.0) / f0, cur = f(static_cast<double>(n)) / f0;
    out.betas[n - 1] = std::min(1.0 - cur / prev, 0.999);
  }
  finish(out);
  return out;
}

Schedule Schedule::linear(int steps, double beta_start, double beta_end) {
  Schedule out;
  out.kind = ScheduleKind::Linear;
  out.steps = steps;
  out.betas.resize(steps);
  for (int i = 0; i < steps; ++i)
    out.betas[i] = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (steps - 1.0);
  finish(out);
  return out;
}

double Schedule::posterior_variance(int n) const {
  return beta(n) * (1.0 - alpha_bar(n - 1)) / (1.0 - alpha_bar(n));
}

nlohmann::json Schedule::to_json() const {
  return {{"kind", kind == ScheduleKind::Cosine ? "cosine" : "linear"}, {"steps", steps}, {"betas", betas}};
}

Schedule Schedule::from_json(const nlohmann::json& j) {
  Schedule s;
  s.kind = j.at("kind").get<std::string>() == "cosine" ? ScheduleKind::Cosine : ScheduleKind::Linear;
  s.steps = j.at("steps").get<int>();
  s.betas = j.at("betas").get<std::vector<double>>();
  if (static_cast<int>(s.betas.size()) != s.steps) throw std::runtime_error("schedule length mismatch");
  finish(s);
  return s;
}

Tensor forward_noise(const Schedule& s, const Tensor& x0, const std::vector<int>& steps, const Tensor& eps) {
  check_steps(s, x0, steps);
  if (x0.shape() != eps.shape()) throw std::invalid_argument("x0 and eps shapes differ");
  Tensor out = Tensor::zeros(x0.shape());
  const std::size_t m = item_size(x0);
  for (std::size_t b = 0; b < steps.size(); ++b) {
    const double a = std::sqrt(s.alpha_bar(steps[b])), r = std::sqrt(1.0 - s.alpha_bar(steps[b]));
    for (std::size_t i = b * m; i < (b + 1) * m; ++i) out.data()[i] = a * x0.at(i) + r * eps.at(i);
  }
  return out;
}

Tensor predict_x0(const Schedule& s, const Tensor& xn, const std::vector<int>& steps, const Tensor& eps) {
  check_steps(s, xn, steps);
  Tensor out = Tensor::zeros(xn.shape());
  const std::size_t m = item_size(xn);
  for (std::size_t b = 0; b < steps.size(); ++b) {
    const double ab = s.alpha_bar(steps[b]);
    const double a = 1.0 / std::sqrt(ab), r = std::sqrt(1.0 - ab);
    for (std::size_t i = b * m; i < (b + 1) * m; ++i) out.data()[i] = a * (xn.at(i) - r * eps.at(i));
  }
  return out;
}

Denoiser from_v_prediction(const Schedule& s, Denoiser net) {
  return [&s, net = std::move(net)](const Tensor& x, const std::vector<int>& steps) {
    check_steps(s, x, steps);
    const Tensor v = net(x, steps);
    if (v.shape() != x.shape()) throw std::invalid_argument("v prediction does not match the input shape");
    const std::size_t m = item_size(x);
    std::vector<double> gain(x.numel()), rest(x.numel());
    for (std::size_t b = 0; b < steps.size(); ++b) {
      const double a = std::sqrt(s.alpha_bar(steps[b])), r = std::sqrt(1.0 - s.alpha_bar(steps[b]));
      for (std::size_t i = b * m; i < (b + 1) * m; ++i) {
        gain[i] = a;
        rest[i] = r * x.at(i);
      }
    }
    return nn::add(nn::mul(v, Tensor::from(x.shape(), std::move(gain))), Tensor::from(x.shape(), std::move(rest)));
  };
}

Tensor eps_loss(const Denoiser& denoiser, const Schedule& s, const Tensor& x0, const std::vector<int>& steps,
                const Tensor& eps, const Tensor& weight) {
  const Tensor xn = forward_noise(s, x0, steps, eps);
  const Tensor pred = denoiser(xn, steps);
  if (pred.shape() != eps.shape())
    throw std::invalid_argument("denoiser output " + nn::shape_str(pred.shape()) + " does not match noise " +
                                nn::shape_str(eps.shape()));
  return nn::weighted_mse(pred, eps, weight);
}

double alpha1_at(const EventWeighting& cfg, double progress) {
  if (cfg.warmup_fraction <= 0.0) return cfg.alpha1_max;
  const double r = std::clamp(progress / cfg.warmup_fraction, 0.0, 1.0);
  return cfg.alpha1_max * 0.5 * (1.0 - std::cos(M_PI * r));
}

std::vector<double> event_weights(const EventWeighting& cfg, const std::vector<double>& mask, double alpha1) {
  const int W = static_cast<int>(mask.size());
  std::vector<double> w(W, 1.0);
  if (!cfg.enabled || W == 0) return w;
  double total = 0.0;
  for (int j = 0; j < W; ++j) {
    double blur = 0.0;
    for (int d = -cfg.blur_radius; d <= cfg.blur_radius; ++d) {
      const int k = j + d;
      if (k >= 0 && k < W) blur += std::pow(cfg.alpha_near, d * d) * mask[k];
    }
    w[j] = cfg.alpha0 + alpha1 * blur;
    total += w[j];
  }
  const double mean = total / W;
  for (double& v : w) v /= mean;
  return w;
}

Tensor randn(const nn::Shape& shape, nn::Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  std::normal_distribution<double> g(0.0, 1.0);
  for (double& v : t.data()) v = g(rng);
  return t;
}

Tensor ddpm_step(const Denoiser& denoiser, const Schedule& s, const Tensor& xn, int n, nn::Rng& rng) {
  nn::NoGradGuard guard;
  const std::vector<int> steps(xn.dim(0), n);
  check_steps(s, xn, steps);
  const Tensor eps = denoiser(xn, steps);
  const double coef = s.beta(n) / std::sqrt(1.0 - s.alpha_bar(n));
  const double inv = 1.0 / std::sqrt(s.alpha(n));
  const double sigma = n > 1 ? std::sqrt(s.posterior_variance(n)) : 0.0;
  Tensor out = Tensor::zeros(xn.shape());
  std::normal_distribution<double> g(0.0, 1.0);
  for (std::size_t i = 0; i < xn.numel(); ++i) {
    out.data()[i] = inv * (xn.at(i) - coef * eps.at(i));
    if (n > 1) out.data()[i] += sigma * g(rng);
  }
  return out;
}

Tensor ddpm_sample(const Denoiser& denoiser, const Schedule& s, const Tensor& x_noise, nn::Rng& rng) {
  Tensor x = x_noise.clone();
  for (int n = s.steps; n >= 1; --n) x = ddpm_step(denoiser, s, x, n, rng);
  return x;
}

std::vector<int> ddim_timesteps(const Schedule& s, int ddim_steps) {
  if (ddim_steps < 1 || ddim_steps > s.steps) throw std::invalid_argument("ddim_steps must be in 1..N");
  std::vector<int> out(ddim_steps);
  for (int k = 1; k <= ddim_steps; ++k)
    out[k - 1] = static_cast<int>(std::lround(static_cast<double>(k) * s.steps / ddim_steps));
  return out;
}

Tensor ddim_sample(const Denoiser& denoiser, const Schedule& s, const Tensor& x_noise, const SamplerConfig& cfg,
                   nn::Rng& rng) {
  if (cfg.eta < 0.0 || cfg.eta > 1.0) throw std::invalid_argument("eta must be in [0,1]");
  nn::NoGradGuard guard;
  const auto taus = ddim_timesteps(s, cfg.ddim_steps);
  const bool clip = !cfg.clip_low.empty();
  if (clip && (x_noise.rank() != 3 || static_cast<int>(cfg.clip_low.size()) != x_noise.dim(1) ||
               cfg.clip_high.size() != cfg.clip_low.size()))
    throw std::invalid_argument("clip bounds need one entry per channel of a [B,C,W] input");
  const std::size_t width = x_noise.rank() == 3 ? static_cast<std::size_t>(x_noise.dim(2)) : 1;
  const std::size_t channels = clip ? cfg.clip_low.size() : 1;
  Tensor x = x_noise.clone();
  std::normal_distribution<double> g(0.0, 1.0);
  for (int k = static_cast<int>(taus.size()) - 1; k >= 0; --k) {
    const int n = taus[k];
    const double a = s.alpha_bar(n);
    const double a_prev = k > 0 ? s.alpha_bar(taus[k - 1]) : 1.0;
    const Tensor eps = denoiser(x, std::vector<int>(x.dim(0), n));
    const double sigma = cfg.eta * std::sqrt((1.0 - a_prev) / (1.0 - a)) * std::sqrt(1.0 - a / a_prev);
    const double dir = std::sqrt(std::max(0.0, 1.0 - a_prev - sigma * sigma));
    Tensor next = Tensor::zeros(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) {
      double x0 = (x.at(i) - std::sqrt(1.0 - a) * eps.at(i)) / std::sqrt(a);
      double e = eps.at(i);
      if (clip) {
        const std::size_t c = (i / width) % channels;
        x0 = std::clamp(x0, cfg.clip_low[c], cfg.clip_high[c]);
        e = (x.at(i) - std::sqrt(a) * x0) / std::sqrt(1.0 - a);
      }
      next.data()[i] = std::sqrt(a_prev) * x0 + dir * e;
      if (sigma > 0.0) next.data()[i] += sigma * g(rng);
    }
    x = next;
  }
  return x;
}

// ----- checkpoints -----

void Checkpoint::add(const std::string& prefix, const nn::NamedParams& params) {
  for (const auto& [name, t] : params)
    tensors.push_back({prefix + name, t.shape(), std::vector<double>(t.data().begin(), t.data().end())});
}

void Checkpoint::add(const std::string& prefix, const nn::NamedParams& like,
                     const std::vector<std::vector<double>>& values) {
  if (like.size() != values.size()) throw std::invalid_argument("value list does not match parameters");
  for (std::size_t i = 0; i < like.size(); ++i) tensors.push_back({prefix + like[i].first, like[i].second.shape(), values[i]});
}

const Checkpoint::Entry* Checkpoint::find(const std::string& name) const {
  for (const Entry& e : tensors)
    if (e.name == name) return &e;
  return nullptr;
}

std::vector<std::vector<double>> Checkpoint::values(const std::string& prefix, const nn::NamedParams& like) const {
  std::vector<std::vector<double>> out;
  for (const auto& [name, t] : like) {
    const Entry* e = find(prefix + name);
    if (!e) throw std::runtime_error("checkpoint has no tensor '" + prefix + name + "'");
    if (e->shape != t.shape())
      throw std::runtime_error("checkpoint tensor '" + prefix + name + "' has shape " + nn::shape_str(e->shape) +
                               ", model expects " + nn::shape_str(t.shape()));
    out.push_back(e->values);
  }
  return out;
}

void Checkpoint::load_into(const std::string& prefix, nn::NamedParams& params) const {
  nn::load_values(params, values(prefix, params));
}

namespace {

constexpr char kMagic[8] = {'S', 'Y', 'N', 'H', 'A', 'T', 'C', 'K'};

template <typename T>
void put(std::string& buf, T v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof v);
}

template <typename T>
T take(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) throw std::runtime_error("truncated checkpoint");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof v);
  pos += sizeof v;
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::string buf(kMagic, sizeof kMagic);
  put<std::uint32_t>(buf, kCheckpointVersion);
  const std::string meta = ck.meta.dump();
  put<std::uint64_t>(buf, meta.size());
  buf += meta;
  put<std::uint64_t>(buf, ck.tensors.size());
  for (const auto& e : ck.tensors) {
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(e.name.size()));
    buf += e.name;
    put<std::uint32_t>(buf, static_cast<std::uint32_t>(e.shape.size()));
    for (int d : e.shape) put<std::int32_t>(buf, d);
    if (e.values.size() != nn::numel_of(e.shape)) throw std::logic_error("tensor '" + e.name + "' size mismatch");
    buf.append(reinterpret_cast<const char*>(e.values.data()), e.values.size() * sizeof(double));
  }
  write_file_atomic(path, buf);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string buf = read_file(path);
  if (buf.size() < sizeof kMagic || std::memcmp(buf.data(), kMagic, sizeof kMagic) != 0)
    throw std::runtime_error(path.string() + ": not a checkpoint");
  std::size_t pos = sizeof kMagic;
  const auto version = take<std::uint32_t>(buf, pos);
  if (version != kCheckpointVersion)
    throw std::runtime_error(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  const auto meta_len = take<std::uint64_t>(buf, pos);
  if (pos + meta_len > buf.size()) throw std::runtime_error("truncated checkpoint");
  ck.meta = nlohmann::json::parse(buf.substr(pos, meta_len));
  pos += meta_len;
  const auto count = take<std::uint64_t>(buf, pos);
  for (std::uint64_t i = 0; i < count; ++i) {
    Checkpoint::Entry e;
    const auto name_len = take<std::uint32_t>(buf, pos);
    if (pos + name_len > buf.size()) throw std::runtime_error("truncated checkpoint");
    e.name = buf.substr(pos, name_len);
    pos += name_len;
    const auto rank = take<std::uint32_t>(buf, pos);
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(take<std::int32_t>(buf, pos));
    e.values.resize(nn::numel_of(e.shape));
    const std::size_t bytes = e.values.size() * sizeof(double);
    if (pos + bytes > buf.size()) throw std::runtime_error("truncated checkpoint");
    std::memcpy(e.values.data(), buf.data() + pos, bytes);
    pos += bytes;
    ck.tensors.push_back(std::move(e));
  }
  return ck;
}

}  // namespace synhat::diffusion
