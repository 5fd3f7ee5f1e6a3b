// SPDX-License-Identifier: Apache-2.0
#include "synhat/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>

#include "synhat/nn/ops.hpp"

namespace synhat::pipeline {

using nlohmann::json;
using nn::Tensor;

namespace {

json unet_json(const unet::UNetConfig& c) {
  return {{"base_channels", c.base_channels},     {"channel_multipliers", c.channel_multipliers},
          {"blocks_per_scale", c.blocks_per_scale}, {"embedding_dim", c.embedding_dim},
          {"film_hidden", c.film_hidden}};
}

unet::UNetConfig unet_from(const json& j) {
  unet::UNetConfig c;
  c.base_channels = j.at("base_channels").get<int>();
  c.channel_multipliers = j.at("channel_multipliers").get<std::vector<int>>();
  c.blocks_per_scale = j.at("blocks_per_scale").get<int>();
  c.embedding_dim = j.at("embedding_dim").get<int>();
  c.film_hidden = j.at("film_hidden").get<int>();
  return c;
}

json train_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr", t.optim.lr},
          {"weight_decay", t.optim.weight_decay},
          {"grad_clip", t.grad_clip},
          {"ema_decay", t.ema_decay},
          {"event_weighting", t.weighting.enabled},
          {"weight_mask_channel", t.weighting.mask_channel}};
}

TrainConfig train_from(const json& j) {
  TrainConfig t;
  t.epochs = j.at("epochs").get<int>();
  t.batch_size = j.at("batch_size").get<int>();
  t.optim.lr = j.at("lr").get<double>();
  t.optim.weight_decay = j.at("weight_decay").get<double>();
  t.grad_clip = j.at("grad_clip").get<double>();
  t.ema_decay = j.at("ema_decay").get<double>();
  t.weighting.enabled = j.at("event_weighting").get<bool>();
  t.weighting.mask_channel = j.value("weight_mask_channel", false);
  return t;
}

void read_unet(const FlatConfig& f, const std::string& s, unet::UNetConfig& c) {
  c.base_channels = static_cast<int>(f.get_int(s + ".base_channels", c.base_channels));
  c.channel_multipliers = f.get_int_list(s + ".channel_multipliers", c.channel_multipliers);
  c.blocks_per_scale = static_cast<int>(f.get_int(s + ".blocks_per_scale", c.blocks_per_scale));
  c.embedding_dim = static_cast<int>(f.get_int(s + ".embedding_dim", c.embedding_dim));
  c.film_hidden = static_cast<int>(f.get_int(s + ".film_hidden", c.film_hidden));
}

void read_train(const FlatConfig& f, const std::string& s, TrainConfig& t) {
  t.epochs = static_cast<int>(f.get_int(s + ".epochs", t.epochs));
  t.batch_size = static_cast<int>(f.get_int(s + ".batch_size", t.batch_size));
  t.optim.lr = f.get_double(s + ".lr", t.optim.lr);
  t.optim.weight_decay = f.get_double(s + ".weight_decay", t.optim.weight_decay);
  t.grad_clip = f.get_double(s + ".grad_clip", t.grad_clip);
  t.ema_decay = f.get_double(s + ".ema_decay", t.ema_decay);
  t.weighting.enabled = f.get_bool(s + ".event_weighting", t.weighting.enabled);
  t.weighting.mask_channel = f.get_bool(s + ".weight_mask_channel", t.weighting.mask_channel);
}

json normalizer_json(const trace::Normalizer& n) {
  return {{"mean", {n.mean.lat, n.mean.lon}}, {"stddev", {n.stddev.lat, n.stddev.lon}}};
}

trace::Normalizer normalizer_from(const json& j) {
  trace::Normalizer n;
  n.mean = {j.at("mean")[0].get<double>(), j.at("mean")[1].get<double>()};
  n.stddev = {j.at("stddev")[0].get<double>(), j.at("stddev")[1].get<double>()};
  return n;
}

nn::NamedParams prefixed(const std::string& prefix, const nn::NamedParams& p) {
  nn::NamedParams out;
  for (const auto& [name, t] : p) out.emplace_back(prefix + name, t);
  return out;
}

void add_training_state(diffusion::Checkpoint& ck, const nn::NamedParams& params, const nn::Ema& ema,
                        nn::AdamW& opt) {
  ck.add("", params);
  ck.add("ema.", params, ema.shadow());
  ck.add("adam.m.", params, opt.first_moments());
  ck.add("adam.v.", params, opt.second_moments());
  ck.meta["optimizer_steps"] = opt.steps();
}

void load_training_state(const diffusion::Checkpoint& ck, nn::NamedParams params, nn::Ema& ema, nn::AdamW& opt) {
  ck.load_into("", params);
  ema.shadow() = ck.values("ema.", params);
  opt.first_moments() = ck.values("adam.m.", params);
  opt.second_moments() = ck.values("adam.v.", params);
  opt.set_steps(ck.meta.at("optimizer_steps").get<long long>());
}

// Swaps EMA weights in for the lifetime of the guard.
class EmaSwap {
 public:
  EmaSwap(const nn::NamedParams& params, const nn::Ema& ema, bool on) : params_(params), on_(on) {
    if (!on_) return;
    live_ = nn::snapshot(params_);
    nn::load_values(params_, ema.shadow());
  }
  ~EmaSwap() {
    if (on_) nn::load_values(params_, live_);
  }
  EmaSwap(const EmaSwap&) = delete;
  EmaSwap& operator=(const EmaSwap&) = delete;

 private:
  nn::NamedParams params_;
  bool on_;
  std::vector<std::vector<double>> live_;
};

std::vector<double> noise_block(std::size_t n, std::uint64_t seed) {
  nn::Rng rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> out(n);
  for (double& v : out) v = nd(rng);
  return out;
}

// Per-item mask (channel `ch`) in [0,1] from a 2m-1 encoded block.
std::vector<double> mask_of(const double* item, int ch, int width) {
  std::vector<double> m(width);
  for (int i = 0; i < width; ++i) m[i] = std::clamp((item[ch * width + i] + 1.0) / 2.0, 0.0, 1.0);
  return m;
}

diffusion::Denoiser as_noise_predictor(const PipelineConfig& cfg, const diffusion::Schedule& s, diffusion::Denoiser net) {
  if (cfg.prediction == "v") return diffusion::from_v_prediction(s, std::move(net));
  return net;
}

Tensor weights_for(const diffusion::EventWeighting& w, const std::vector<double>& x0, int batch, int channels,
                   int width, double progress) {
  if (!w.enabled) return Tensor();
  const double a1 = diffusion::alpha1_at(w, progress);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(batch) * width);
  for (int b = 0; b < batch; ++b) {
    const auto m = mask_of(x0.data() + static_cast<std::size_t>(b) * channels * width, channels - 1, width);
    const auto wb = diffusion::event_weights(w, m, a1);
    out.insert(out.end(), wb.begin(), wb.end());
  }
  return Tensor::from({batch, 1, width}, std::move(out));
}

// Per-element loss weights [B, C, W]: event weights on the coordinate
// channels (and the mask channel when configured), times 1 / abar_n per item
// under v prediction so the noise loss equals the velocity loss.
Tensor loss_weights(const PipelineConfig& cfg, const diffusion::Schedule& s, const diffusion::EventWeighting& w,
                    const std::vector<double>& x0, int batch, int channels, int width, double progress,
                    const std::vector<int>& steps) {
  const bool v = cfg.prediction == "v";
  if (!w.enabled && !v) return Tensor();
  const Tensor ev = weights_for(w, x0, batch, channels, width, progress);
  std::vector<double> out(static_cast<std::size_t>(batch) * channels * width, 1.0);
  for (int b = 0; b < batch; ++b) {
    const double scale = v ? 1.0 / s.alpha_bar(steps[b]) : 1.0;
    for (int c = 0; c < channels; ++c) {
      const bool weighted = ev.defined() && (c + 1 < channels || w.mask_channel);
      for (int i = 0; i < width; ++i) {
        const double e = weighted ? ev.at(static_cast<std::size_t>(b) * width + i) : 1.0;
        out[(static_cast<std::size_t>(b) * channels + c) * width + i] = e * scale;
      }
    }
  }
  return Tensor::from({batch, channels, width}, std::move(out));
}

std::vector<int> random_steps(int batch, int steps, nn::Rng& rng) {
  std::uniform_int_distribution<int> pick(1, steps);
  std::vector<int> out(batch);
  for (int& s : out) s = pick(rng);
  return out;
}

// Per-channel [min, max] over [C, W] blocks laid out back to back.
void channel_range(const std::vector<double>& blocks, int channels, int width, std::vector<double>& lo,
                   std::vector<double>& hi) {
  lo.assign(channels, std::numeric_limits<double>::infinity());
  hi.assign(channels, -std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::size_t c = (i / width) % channels;
    lo[c] = std::min(lo[c], blocks[i]);
    hi[c] = std::max(hi[c], blocks[i]);
  }
}

diffusion::SamplerConfig sampler_for(const PipelineConfig& cfg, const std::vector<double>& lo,
                                     const std::vector<double>& hi) {
  diffusion::SamplerConfig s = cfg.sampler;
  if (cfg.clip_x0 && !lo.empty()) {
    s.clip_low = lo;
    s.clip_high = hi;
  }
  return s;
}

void check_finite(double loss, const std::string& stage, int epoch, std::size_t batch) {
  if (!std::isfinite(loss))
    throw TrainingDiverged(stage + ": non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batch));
}

}  // namespace

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix64(mix64(mix64(seed) ^ a) ^ (b * 0x9e3779b97f4a7c15ull + 1));
}

double PerturbConfig::p_at(double progress) const {
  if (ramp_fraction <= 0.0) return p_end;
  const double r = std::clamp(progress / ramp_fraction, 0.0, 1.0);
  return p_start + (p_end - p_start) * r;
}

// ----- config -----

void PipelineConfig::validate() const {
  const std::string where = "config";
  if (granularity <= 0 || duration <= 0) throw ConfigError(where, 0, "granularity and duration must be positive");
  if (duration % granularity != 0)
    throw ConfigError(where, 0,
                      "granularity Int = " + std::to_string(granularity) + " s does not divide duration D = " +
                          std::to_string(duration) + " s");
  if (granularity % kFineUnit != 0)
    throw ConfigError(where, 0, "granularity " + std::to_string(granularity) + " s is not a multiple of 60 s");
  if (diffusion_steps < 1) throw ConfigError(where, 0, "diffusion steps must be positive");
  if (prediction != "v" && prediction != "eps")
    throw ConfigError(where, 0, "diffusion.prediction must be \"v\" or \"eps\", got \"" + prediction + "\"");
  if (sampler.ddim_steps < 1 || sampler.ddim_steps > diffusion_steps)
    throw ConfigError(where, 0, "ddim_steps must lie in 1..diffusion steps");
  if (!(stay_threshold > 0.0 && stay_threshold < 1.0) || !(fine_threshold > 0.0 && fine_threshold < 1.0))
    throw ConfigError(where, 0, "thresholds must lie in (0, 1)");
  if (perturb.p_start < 0.0 || perturb.p_end > 1.0 || perturb.p_end < perturb.p_start)
    throw ConfigError(where, 0, "perturbation probabilities must satisfy 0 <= p_start <= p_end <= 1");
  if (perturb.sigma_s < 0.0 || perturb.sigma_t < 0.0) throw ConfigError(where, 0, "perturbation sigmas must be >= 0");
  for (const TrainConfig* t : {&coarse_train, &fine_train})
    if (t->epochs < 0 || t->batch_size < 1) throw ConfigError(where, 0, "epochs >= 0 and batch_size >= 1 required");
  try {
    coarse_unet().validate();
    fine_unet().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where, 0, e.what());
  }
}

unet::UNetConfig PipelineConfig::coarse_unet() const {
  unet::UNetConfig c = coarse_net;
  c.in_channels = 3;
  c.out_channels = 3;
  c.coord_channels = 2;
  c.conditional = false;
  c.context_dim = 0;
  return c;
}

unet::UNetConfig PipelineConfig::fine_unet() const {
  unet::UNetConfig c = fine_net;
  c.in_channels = kFineTargetChannels + kFineConditionChannels;
  c.out_channels = kFineTargetChannels;
  c.coord_channels = 2;
  c.conditional = use_context;
  c.context_dim = use_context ? 2 * bpem.dim : 0;
  return c;
}

bpem::BpemConfig PipelineConfig::bpem_config() const {
  bpem::BpemConfig b = bpem;
  b.slots = slots();
  return b;
}

json PipelineConfig::to_json() const {
  return {
      {"granularity", granularity},
      {"duration", duration},
      {"diffusion_steps", diffusion_steps},
      {"prediction", prediction},
      {"coarse_net", unet_json(coarse_net)},
      {"fine_net", unet_json(fine_net)},
      {"bpem", {{"dim", bpem.dim}, {"layers", bpem.layers}, {"heads", bpem.heads}, {"ff_mult", bpem.ff_mult}}},
      {"coarse_train", train_json(coarse_train)},
      {"fine_train", train_json(fine_train)},
      {"perturb",
       {{"p_start", perturb.p_start},
        {"p_end", perturb.p_end},
        {"ramp_fraction", perturb.ramp_fraction},
        {"sigma_s", perturb.sigma_s},
        {"sigma_t", perturb.sigma_t}}},
      {"sampler",
       {{"ddim_steps", sampler.ddim_steps}, {"eta", sampler.eta}, {"use_ema", sample_with_ema}, {"clip_x0", clip_x0}}},
      {"stay_threshold", stay_threshold},
      {"fine_threshold", fine_threshold},
      {"align", {{"radius_m", align.radius_m}, {"max_doublings", align.max_doublings}}},
      {"use_context", use_context},
      {"max_resample", max_resample},
      {"seed", seed},
      {"fine_channels", {"fine_lat", "fine_lon", "fine_mask", "slot_lat", "slot_lon", "slot_time"}},
  };
}

PipelineConfig PipelineConfig::from_json(const json& j) {
  PipelineConfig c;
  c.granularity = j.at("granularity").get<Seconds>();
  c.duration = j.at("duration").get<Seconds>();
  c.diffusion_steps = j.at("diffusion_steps").get<int>();
  c.prediction = j.value("prediction", std::string("eps"));
  c.coarse_net = unet_from(j.at("coarse_net"));
  c.fine_net = unet_from(j.at("fine_net"));
  const auto& b = j.at("bpem");
  c.bpem.dim = b.at("dim").get<int>();
  c.bpem.layers = b.at("layers").get<int>();
  c.bpem.heads = b.at("heads").get<int>();
  c.bpem.ff_mult = b.at("ff_mult").get<int>();
  c.coarse_train = train_from(j.at("coarse_train"));
  c.fine_train = train_from(j.at("fine_train"));
  const auto& p = j.at("perturb");
  c.perturb.p_start = p.at("p_start").get<double>();
  c.perturb.p_end = p.at("p_end").get<double>();
  c.perturb.ramp_fraction = p.at("ramp_fraction").get<double>();
  c.perturb.sigma_s = p.at("sigma_s").get<double>();
  c.perturb.sigma_t = p.at("sigma_t").get<double>();
  const auto& s = j.at("sampler");
  c.sampler.ddim_steps = s.at("ddim_steps").get<int>();
  c.sampler.eta = s.at("eta").get<double>();
  c.sample_with_ema = s.at("use_ema").get<bool>();
  c.clip_x0 = s.at("clip_x0").get<bool>();
  c.stay_threshold = j.at("stay_threshold").get<double>();
  c.fine_threshold = j.at("fine_threshold").get<double>();
  c.align.radius_m = j.at("align").at("radius_m").get<double>();
  c.align.max_doublings = j.at("align").at("max_doublings").get<int>();
  c.use_context = j.at("use_context").get<bool>();
  c.max_resample = j.at("max_resample").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

PipelineConfig PipelineConfig::from_flat(const FlatConfig& f, PipelineConfig c) {
  if (f.has("data.granularity_minutes")) c.granularity = f.get_int("data.granularity_minutes", 60) * 60;
  c.granularity = f.get_int("data.granularity_seconds", c.granularity);
  if (f.has("data.duration_days")) c.duration = f.get_int("data.duration_days", 7) * 86400;
  c.duration = f.get_int("data.duration_seconds", c.duration);
  c.diffusion_steps = static_cast<int>(f.get_int("diffusion.steps", c.diffusion_steps));
  c.prediction = f.get_string("diffusion.prediction", c.prediction);
  read_unet(f, "coarse", c.coarse_net);
  read_unet(f, "fine", c.fine_net);
  read_train(f, "coarse", c.coarse_train);
  read_train(f, "fine", c.fine_train);
  c.bpem.dim = static_cast<int>(f.get_int("bpem.dim", c.bpem.dim));
  c.bpem.layers = static_cast<int>(f.get_int("bpem.layers", c.bpem.layers));
  c.bpem.heads = static_cast<int>(f.get_int("bpem.heads", c.bpem.heads));
  c.bpem.ff_mult = static_cast<int>(f.get_int("bpem.ff_mult", c.bpem.ff_mult));
  c.perturb.p_start = f.get_double("perturb.p_start", c.perturb.p_start);
  c.perturb.p_end = f.get_double("perturb.p_end", c.perturb.p_end);
  c.perturb.ramp_fraction = f.get_double("perturb.ramp_fraction", c.perturb.ramp_fraction);
  c.perturb.sigma_s = f.get_double("perturb.sigma_s", c.perturb.sigma_s);
  c.perturb.sigma_t = f.get_double("perturb.sigma_t_fraction", 0.1) * static_cast<double>(c.granularity);
  c.perturb.sigma_t = f.get_double("perturb.sigma_t_seconds", c.perturb.sigma_t);
  c.sampler.ddim_steps = static_cast<int>(f.get_int("sampler.ddim_steps", c.sampler.ddim_steps));
  c.sampler.eta = f.get_double("sampler.eta", c.sampler.eta);
  c.sample_with_ema = f.get_bool("sampler.use_ema", c.sample_with_ema);
  c.clip_x0 = f.get_bool("sampler.clip_x0", c.clip_x0);
  c.stay_threshold = f.get_double("pipeline.stay_threshold", c.stay_threshold);
  c.fine_threshold = f.get_double("pipeline.fine_threshold", c.fine_threshold);
  c.use_context = f.get_bool("pipeline.use_context", c.use_context);
  c.max_resample = static_cast<int>(f.get_int("pipeline.max_resample", c.max_resample));
  c.align.radius_m = f.get_double("align.radius_m", c.align.radius_m);
  c.align.max_doublings = static_cast<int>(f.get_int("align.max_doublings", c.align.max_doublings));
  c.seed = static_cast<std::uint64_t>(f.get_int("seed", static_cast<std::int64_t>(c.seed)));
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::toy() {
  PipelineConfig c;
  c.granularity = 3600;
  c.duration = 7 * 86400;
  c.coarse_net.base_channels = 16;
  c.coarse_net.channel_multipliers = {1, 2, 4, 8};
  c.coarse_net.blocks_per_scale = 1;
  c.fine_net.base_channels = 16;
  c.fine_net.channel_multipliers = {1, 2, 4};
  c.fine_net.blocks_per_scale = 1;
  c.fine_net.film_hidden = 32;
  c.bpem.dim = 16;
  c.coarse_train.epochs = 150;
  c.coarse_train.batch_size = 16;
  c.coarse_train.optim.lr = 1e-3;
  c.coarse_train.ema_decay = 0.995;
  c.fine_train.epochs = 60;
  c.fine_train.batch_size = 64;
  c.fine_train.optim.lr = 2e-3;
  c.fine_train.ema_decay = 0.995;
  c.perturb.sigma_t = 0.1 * static_cast<double>(c.granularity);
  return c;
}

double slot_time(int slot, Seconds granularity, Seconds duration) {
  return 2.0 * (slot + 0.5) * static_cast<double>(granularity) / static_cast<double>(duration) - 1.0;
}

std::vector<double> encode_coarse(const LatentSTTrace& t, const trace::Normalizer& norm) {
  const std::size_t L = t.length();
  std::vector<double> x(3 * L);
  for (std::size_t i = 0; i < L; ++i) {
    const Coord c = norm.forward(t.coords[i]);
    x[i] = c.lat;
    x[L + i] = c.lon;
    x[2 * L + i] = 2.0 * t.mask[i] - 1.0;
  }
  return x;
}

LatentSTTrace decode_coarse(const std::vector<double>& x, int length, Seconds granularity,
                            const trace::Normalizer& norm) {
  LatentSTTrace t;
  t.granularity = granularity;
  t.coords.resize(length);
  t.mask.resize(length);
  for (int i = 0; i < length; ++i) {
    t.coords[i] = norm.inverse({x[i], x[length + i]});
    t.mask[i] = std::clamp((x[2 * length + i] + 1.0) / 2.0, 0.0, 1.0);
  }
  return t;
}

// ----- Stage 1 -----

CoarseModel::CoarseModel(const PipelineConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  schedule_ = diffusion::Schedule::cosine(cfg_.diffusion_steps);
  nn::Rng rng(derive_seed(cfg_.seed, 1));
  net_ = std::make_unique<unet::LSTUNet>(cfg_.coarse_unet(), rng);
  opt_ = std::make_unique<nn::AdamW>(net_->parameters(), cfg_.coarse_train.optim);
  ema_ = std::make_unique<nn::Ema>(net_->parameters(), cfg_.coarse_train.ema_decay);
}

void CoarseModel::prepare(const std::vector<Hat>& corpus) {
  if (corpus.empty()) throw std::invalid_argument("Stage 1 needs a non-empty corpus");
  norm_ = trace::Normalizer::fit(corpus);
  dummy_ = trace::most_frequent_poi(corpus);
  data_.clear();
  for (const Hat& h : corpus) {
    if (h.duration != cfg_.duration)
      throw std::invalid_argument("trace " + h.trace_id + " has duration " + std::to_string(h.duration) +
                                  ", expected " + std::to_string(cfg_.duration));
    data_.push_back(encode_coarse(trace::build_coarse_trace(h, cfg_.granularity, dummy_), norm_));
  }
  std::vector<double> all;
  for (const auto& d : data_) all.insert(all.end(), d.begin(), d.end());
  channel_range(all, 3, cfg_.slots(), clip_low_, clip_high_);
}

double CoarseModel::train_epoch(int epoch) {
  if (data_.empty()) throw std::logic_error("prepare() must run before training");
  const int L = cfg_.slots(), B = cfg_.coarse_train.batch_size;
  nn::Rng rng(derive_seed(cfg_.seed, 100, static_cast<std::uint64_t>(epoch)));
  std::vector<std::size_t> order(data_.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const double progress = cfg_.coarse_train.epochs > 0 ? static_cast<double>(epoch) / cfg_.coarse_train.epochs : 1.0;

  auto params = net_->parameters();
  const diffusion::Denoiser den = as_noise_predictor(cfg_, schedule_, [&](const Tensor& x, const std::vector<int>& steps) {
    return net_->forward(x, steps);
  });
  double total = 0.0;
  for (std::size_t start = 0, batch = 0; start < order.size(); start += B, ++batch) {
    const int n = static_cast<int>(std::min<std::size_t>(B, order.size() - start));
    std::vector<double> x0;
    x0.reserve(static_cast<std::size_t>(n) * 3 * L);
    for (int b = 0; b < n; ++b) x0.insert(x0.end(), data_[order[start + b]].begin(), data_[order[start + b]].end());
    const auto steps = random_steps(n, schedule_.steps, rng);
    const Tensor eps = diffusion::randn({n, 3, L}, rng);
    const Tensor w = loss_weights(cfg_, schedule_, cfg_.coarse_train.weighting, x0, n, 3, L, progress, steps);
    Tensor loss = diffusion::eps_loss(den, schedule_, Tensor::from({n, 3, L}, std::move(x0)), steps, eps, w);
    check_finite(loss.item(), "stage 1", epoch, batch);
    loss.backward();
    nn::clip_grad_norm(params, cfg_.coarse_train.grad_clip);
    opt_->step();
    ema_->update(params);
    total += loss.item() * n;
  }
  epochs_done_ = epoch + 1;
  return total / static_cast<double>(data_.size());
}

double CoarseModel::evaluate_loss(std::uint64_t seed) const {
  if (data_.empty()) throw std::logic_error("prepare() must run before evaluation");
  nn::NoGradGuard guard;
  const int L = cfg_.slots();
  nn::Rng rng(seed);
  const diffusion::Denoiser den = as_noise_predictor(cfg_, schedule_, [&](const Tensor& x, const std::vector<int>& steps) {
    return net_->forward(x, steps);
  });
  double total = 0.0;
  for (const auto& item : data_) {
    const auto steps = random_steps(1, schedule_.steps, rng);
    const Tensor eps = diffusion::randn({1, 3, L}, rng);
    total += diffusion::eps_loss(den, schedule_, Tensor::from({1, 3, L}, item), steps, eps, Tensor()).item();
  }
  return total / static_cast<double>(data_.size());
}

diffusion::Checkpoint CoarseModel::checkpoint() const {
  diffusion::Checkpoint ck;
  add_training_state(ck, net_->parameters(), *ema_, *opt_);
  ck.meta["epochs_done"] = epochs_done_;
  ck.meta["normalizer"] = normalizer_json(norm_);
  ck.meta["dummy"] = {dummy_.lat, dummy_.lon};
  ck.meta["clip_low"] = clip_low_;
  ck.meta["clip_high"] = clip_high_;
  return ck;
}

void CoarseModel::restore(const diffusion::Checkpoint& ck) {
  load_training_state(ck, net_->parameters(), *ema_, *opt_);
  epochs_done_ = ck.meta.at("epochs_done").get<int>();
  norm_ = normalizer_from(ck.meta.at("normalizer"));
  dummy_ = {ck.meta.at("dummy")[0].get<double>(), ck.meta.at("dummy")[1].get<double>()};
  clip_low_ = ck.meta.at("clip_low").get<std::vector<double>>();
  clip_high_ = ck.meta.at("clip_high").get<std::vector<double>>();
}

Tensor CoarseModel::sample(const Tensor& noise, nn::Rng& rng) const {
  nn::NoGradGuard guard;
  EmaSwap swap(net_->parameters(), *ema_, cfg_.sample_with_ema);
  const diffusion::Denoiser den = as_noise_predictor(cfg_, schedule_, [&](const Tensor& x, const std::vector<int>& steps) {
    return net_->forward(x, steps);
  });
  return diffusion::ddim_sample(den, schedule_, noise, sampler_for(cfg_, clip_low_, clip_high_), rng);
}

std::vector<LatentSTTrace> CoarseModel::generate(int count, std::uint64_t seed) const {
  if (count <= 0) return {};
  const int L = cfg_.slots();
  const std::size_t item = static_cast<std::size_t>(3) * L;
  std::vector<std::optional<LatentSTTrace>> out(count);
  std::vector<int> pending(count);
  std::iota(pending.begin(), pending.end(), 0);
  for (int attempt = 0; attempt <= cfg_.max_resample && !pending.empty(); ++attempt) {
    std::vector<int> still;
    for (std::size_t start = 0; start < pending.size(); start += cfg_.coarse_train.batch_size) {
      const int n = static_cast<int>(std::min<std::size_t>(cfg_.coarse_train.batch_size, pending.size() - start));
      std::vector<double> noise;
      noise.reserve(n * item);
      for (int b = 0; b < n; ++b) {
        const auto z = noise_block(item, derive_seed(seed, static_cast<std::uint64_t>(pending[start + b]), attempt));
        noise.insert(noise.end(), z.begin(), z.end());
      }
      nn::Rng rng(derive_seed(seed, 0xC0A25Eull, attempt * 1000003ull + start));
      const Tensor x = sample(Tensor::from({n, 3, L}, std::move(noise)), rng);
      for (int b = 0; b < n; ++b) {
        const std::vector<double> block(x.data().begin() + b * item, x.data().begin() + (b + 1) * item);
        LatentSTTrace t = decode_coarse(block, L, cfg_.granularity, norm_);
        if (trace::compress_to_states(t, cfg_.stay_threshold).empty())
          still.push_back(pending[start + b]);
        else
          out[pending[start + b]] = std::move(t);
      }
    }
    pending = std::move(still);
  }
  std::vector<LatentSTTrace> result;
  for (auto& t : out)
    if (t) result.push_back(std::move(*t));
  return result;
}

// ----- Stage 2 -----

FineModel::FineModel(const PipelineConfig& cfg, const trace::Normalizer& norm) : cfg_(cfg), norm_(norm) {
  cfg_.validate();
  schedule_ = diffusion::Schedule::cosine(cfg_.diffusion_steps);
  nn::Rng rng(derive_seed(cfg_.seed, 2));
  if (cfg_.use_context) bpem_ = std::make_unique<bpem::Bpem>(cfg_.bpem_config(), rng);
  net_ = std::make_unique<unet::LSTUNet>(cfg_.fine_unet(), rng);
  opt_ = std::make_unique<nn::AdamW>(trainable(), cfg_.fine_train.optim);
  ema_ = std::make_unique<nn::Ema>(trainable(), cfg_.fine_train.ema_decay);
}

nn::NamedParams FineModel::trainable() const {
  nn::NamedParams out = prefixed("net.", net_->parameters());
  if (bpem_) {
    const auto b = prefixed("bpem.", bpem_->parameters());
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

std::vector<double> FineModel::condition_block(Coord l, int slot) const {
  const int W = cfg_.fine_cells();
  std::vector<double> c(static_cast<std::size_t>(kFineConditionChannels) * W);
  const double t = slot_time(slot, cfg_.granularity, cfg_.duration);
  for (int i = 0; i < W; ++i) {
    c[i] = l.lat;
    c[W + i] = l.lon;
    c[2 * W + i] = t;
  }
  return c;
}

bool FineModel::perturb(std::vector<double>& cond, double p, nn::Rng& rng) const {
  const int W = cfg_.fine_cells();
  const bool fire = std::bernoulli_distribution(std::clamp(p, 0.0, 1.0))(rng);
  if (!fire) return false;
  std::normal_distribution<double> nd(0.0, 1.0);
  const double ds_lat = cfg_.perturb.sigma_s * nd(rng);
  const double ds_lon = cfg_.perturb.sigma_s * nd(rng);
  const double dt = cfg_.perturb.sigma_t * nd(rng) * 2.0 / static_cast<double>(cfg_.duration);
  for (int i = 0; i < W; ++i) {
    cond[i] += ds_lat;
    cond[W + i] += ds_lon;
    cond[2 * W + i] += dt;
  }
  return true;
}

void FineModel::prepare(const std::vector<Hat>& corpus) {
  if (corpus.empty()) throw std::invalid_argument("Stage 2 needs a non-empty corpus");
  const Coord dummy = trace::most_frequent_poi(corpus);
  const int W = cfg_.fine_cells();
  data_.clear();
  for (const Hat& h : corpus) {
    const LatentSTTrace coarse = trace::build_coarse_trace(h, cfg_.granularity, dummy);
    const LatentSTStates states = trace::compress_to_states(coarse, cfg_.stay_threshold);
    if (states.empty()) continue;
    FineExample ex;
    for (double m : coarse.mask) ex.visits.push_back(m >= cfg_.stay_threshold ? 1.0 : 0.0);
    for (const LatentState& s : states) {
      ex.state_coords.push_back(norm_.forward(s.coord));
      ex.slots.push_back(s.slot);
      const trace::FineSegment seg = trace::build_fine_segment(h, coarse, s.slot);
      std::vector<double> block(static_cast<std::size_t>(kFineTargetChannels) * W);
      for (int i = 0; i < W; ++i) {
        const Coord c = norm_.forward(seg.coords[i]);
        block[i] = c.lat;
        block[W + i] = c.lon;
        block[2 * W + i] = 2.0 * seg.mask[i] - 1.0;
      }
      ex.targets.insert(ex.targets.end(), block.begin(), block.end());
    }
    data_.push_back(std::move(ex));
  }
  std::vector<double> all;
  for (const auto& ex : data_) all.insert(all.end(), ex.targets.begin(), ex.targets.end());
  channel_range(all, kFineTargetChannels, W, clip_low_, clip_high_);
}

Tensor FineModel::denoise(const Tensor& x, const std::vector<int>& steps, const Tensor& cond,
                          const Tensor& context) const {
  const diffusion::Denoiser net = [&](const Tensor& xn, const std::vector<int>& n) {
    return net_->forward(nn::concat_channels({xn, cond}), n, cfg_.use_context ? context : Tensor());
  };
  return as_noise_predictor(cfg_, schedule_, net)(x, steps);
}

double FineModel::train_epoch(int epoch) {
  if (data_.empty()) throw std::logic_error("prepare() must run before training");
  const int W = cfg_.fine_cells();
  nn::Rng rng(derive_seed(cfg_.seed, 200, static_cast<std::uint64_t>(epoch)));
  nn::Rng prng(derive_seed(cfg_.seed, 300, static_cast<std::uint64_t>(epoch)));
  std::vector<std::size_t> order(data_.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const double progress = cfg_.fine_train.epochs > 0 ? static_cast<double>(epoch) / cfg_.fine_train.epochs : 1.0;
  const double p = fixed_perturb_p >= 0.0 ? fixed_perturb_p : cfg_.perturb.p_at(progress);

  auto params = trainable();
  double total = 0.0;
  std::size_t segments = 0, batch = 0;
  std::size_t pos = 0;
  while (pos < order.size()) {
    std::vector<std::size_t> group;
    std::size_t n = 0;
    while (pos < order.size() && n < static_cast<std::size_t>(cfg_.fine_train.batch_size)) {
      group.push_back(order[pos]);
      n += data_[order[pos]].slots.size();
      ++pos;
    }
    FineStepRecord rec;
    rec.epoch = epoch;
    std::vector<double> x0, cond;
    std::vector<Tensor> contexts;
    for (std::size_t g : group) {
      const FineExample& ex = data_[g];
      x0.insert(x0.end(), ex.targets.begin(), ex.targets.end());
      for (std::size_t i = 0; i < ex.slots.size(); ++i) {
        auto c = condition_block(ex.state_coords[i], ex.slots[i]);
        if (observer) rec.conditions.insert(rec.conditions.end(), c.begin(), c.end());
        const bool fired = perturb(c, p, prng);
        ++stats_.decisions;
        stats_.perturbed += fired;
        rec.perturbed.push_back(fired);
        cond.insert(cond.end(), c.begin(), c.end());
      }
      if (bpem_) contexts.push_back(bpem::Bpem::context_vectors(bpem_->encode(ex.state_coords, ex.slots, ex.visits)));
    }
    const int B = static_cast<int>(n);
    if (observer) {
      for (std::size_t g : group) rec.targets.insert(rec.targets.end(), data_[g].targets.begin(), data_[g].targets.end());
      rec.targets_used = x0;
      rec.conditions_used = cond;
      observer(rec);
    }
    const Tensor cond_t = Tensor::from({B, kFineConditionChannels, W}, std::move(cond));
    const Tensor context = bpem_ ? nn::concat_rows(contexts) : Tensor();
    const diffusion::Denoiser den = [&](const Tensor& x, const std::vector<int>& steps) {
      return denoise(x, steps, cond_t, context);
    };
    const auto steps = random_steps(B, schedule_.steps, rng);
    const Tensor eps = diffusion::randn({B, kFineTargetChannels, W}, rng);
    const Tensor w = loss_weights(cfg_, schedule_, cfg_.fine_train.weighting, x0, B, kFineTargetChannels, W, progress, steps);
    Tensor loss =
        diffusion::eps_loss(den, schedule_, Tensor::from({B, kFineTargetChannels, W}, std::move(x0)), steps, eps, w);
    check_finite(loss.item(), "stage 2", epoch, batch++);
    loss.backward();
    nn::clip_grad_norm(params, cfg_.fine_train.grad_clip);
    opt_->step();
    ema_->update(params);
    total += loss.item() * B;
    segments += n;
  }
  epochs_done_ = epoch + 1;
  return total / static_cast<double>(segments);
}

diffusion::Checkpoint FineModel::checkpoint() const {
  diffusion::Checkpoint ck;
  add_training_state(ck, trainable(), *ema_, *opt_);
  ck.meta["epochs_done"] = epochs_done_;
  ck.meta["normalizer"] = normalizer_json(norm_);
  ck.meta["clip_low"] = clip_low_;
  ck.meta["clip_high"] = clip_high_;
  return ck;
}

void FineModel::restore(const diffusion::Checkpoint& ck) {
  load_training_state(ck, trainable(), *ema_, *opt_);
  epochs_done_ = ck.meta.at("epochs_done").get<int>();
  norm_ = normalizer_from(ck.meta.at("normalizer"));
  clip_low_ = ck.meta.at("clip_low").get<std::vector<double>>();
  clip_high_ = ck.meta.at("clip_high").get<std::vector<double>>();
}

std::vector<trace::FineSegment> FineModel::generate_segments(const LatentSTTrace& coarse, std::uint64_t trace_seed,
                                                             const std::vector<int>* slot_order) const {
  const LatentSTStates states = trace::compress_to_states(coarse, cfg_.stay_threshold);
  if (states.empty()) return {};
  const int n = static_cast<int>(states.size()), W = cfg_.fine_cells();
  const std::size_t item = static_cast<std::size_t>(kFineTargetChannels) * W;

  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (slot_order) {
    if (static_cast<int>(slot_order->size()) != n) throw std::invalid_argument("slot order must cover every state");
    order = *slot_order;
  }

  nn::NoGradGuard guard;
  EmaSwap swap(trainable(), *ema_, cfg_.sample_with_ema);
  std::vector<Coord> coords;
  std::vector<int> slots;
  for (const LatentState& s : states) {
    coords.push_back(norm_.forward(s.coord));
    slots.push_back(s.slot);
  }
  Tensor context;
  if (bpem_) {
    std::vector<double> visits;
    for (double m : coarse.mask) visits.push_back(m >= cfg_.stay_threshold ? 1.0 : 0.0);
    context = bpem::Bpem::context_vectors(bpem_->encode(coords, slots, visits));
  } else {
    ++contexts_;
  }

  auto run = [&](const std::vector<int>& idx, nn::Rng& rng) {
    const int B = static_cast<int>(idx.size());
    std::vector<double> noise, cond;
    for (int i : idx) {
      const auto z = noise_block(item, derive_seed(trace_seed, static_cast<std::uint64_t>(slots[i])));
      noise.insert(noise.end(), z.begin(), z.end());
      const auto c = condition_block(coords[i], slots[i]);
      cond.insert(cond.end(), c.begin(), c.end());
    }
    const Tensor cond_t = Tensor::from({B, kFineConditionChannels, W}, std::move(cond));
    const Tensor ctx = bpem_ ? nn::gather_rows(context, idx) : Tensor();
    const diffusion::Denoiser den = [&](const Tensor& x, const std::vector<int>& steps) {
      return denoise(x, steps, cond_t, ctx);
    };
    return diffusion::ddim_sample(den, schedule_, Tensor::from({B, kFineTargetChannels, W}, std::move(noise)),
                                  sampler_for(cfg_, clip_low_, clip_high_), rng);
  };

  std::vector<std::vector<double>> blocks(n);
  if (cfg_.sampler.eta == 0.0) {
    nn::Rng unused(0);
    const Tensor x = run(order, unused);
    for (int k = 0; k < n; ++k)
      blocks[order[k]].assign(x.data().begin() + k * item, x.data().begin() + (k + 1) * item);
  } else {
    for (int i : order) {
      nn::Rng rng(derive_seed(trace_seed, static_cast<std::uint64_t>(slots[i]), 1));
      const Tensor x = run({i}, rng);
      blocks[i].assign(x.data().begin(), x.data().end());
    }
  }

  std::vector<trace::FineSegment> out(n);
  for (int i = 0; i < n; ++i) {
    out[i].slot = slots[i];
    out[i].coords.resize(W);
    out[i].mask.resize(W);
    for (int c = 0; c < W; ++c) {
      out[i].coords[c] = norm_.inverse({blocks[i][c], blocks[i][W + c]});
      out[i].mask[c] = std::clamp((blocks[i][2 * W + c] + 1.0) / 2.0, 0.0, 1.0);
    }
  }
  return out;
}

FineStates FineModel::generate(const LatentSTTrace& coarse, std::uint64_t trace_seed,
                               const std::vector<int>* slot_order) const {
  std::vector<trace::FineCell> cells;
  for (const auto& seg : generate_segments(coarse, trace_seed, slot_order)) {
    const auto c = trace::fine_cells(seg, cfg_.fine_threshold);
    cells.insert(cells.end(), c.begin(), c.end());
  }
  return trace::states_to_hat_skeleton(cells, cfg_.granularity);
}

// ----- end to end -----

std::vector<Hat> synthesize_from(const std::vector<LatentSTTrace>& coarse, const FineModel& fine,
                                 const align::PoiIndex& index, const align::VisitHistory& history,
                                 std::uint64_t seed, SynthesisStats* stats) {
  std::vector<Hat> out;
  for (std::size_t i = 0; i < coarse.size(); ++i) {
    const FineStates states = fine.generate(coarse[i], derive_seed(seed, i, 1));
    std::mt19937_64 rng(derive_seed(seed, i, 2));
    align::AlignResult r = align::align(states, index, history, fine.config().align, rng);
    if (stats) stats->states_dropped += r.dropped;
    if (r.hat.events.empty()) {
      if (stats) ++stats->empty_retries;
      continue;
    }
    r.hat.duration = fine.config().duration;
    out.push_back(std::move(r.hat));
  }
  return out;
}

std::vector<Hat> synthesize(const CoarseModel& coarse, const FineModel& fine, const align::PoiIndex& index,
                            const align::VisitHistory& history, int count, std::uint64_t seed,
                            SynthesisStats* stats, std::vector<LatentSTTrace>* coarse_out) {
  std::vector<Hat> out;
  for (int round = 0; round <= coarse.config().max_resample && static_cast<int>(out.size()) < count; ++round) {
    const int need = count - static_cast<int>(out.size());
    const auto traces = coarse.generate(need, derive_seed(seed, 1, round));
    if (stats) stats->coarse_dropped += need - static_cast<int>(traces.size());
    if (coarse_out) coarse_out->insert(coarse_out->end(), traces.begin(), traces.end());
    auto hats = synthesize_from(traces, fine, index, history, derive_seed(seed, 2, round), stats);
    for (auto& h : hats) out.push_back(std::move(h));
  }
  for (std::size_t k = 0; k < out.size(); ++k) out[k].trace_id = "syn" + std::to_string(k);
  return out;
}

std::string config_hash(const PipelineConfig& cfg) { return hex64(fnv1a64(cfg.to_json().dump())); }

void save_stage(const std::filesystem::path& path, diffusion::Checkpoint ck, const PipelineConfig& cfg,
                const std::string& stage) {
  const json c = cfg.to_json();
  ck.meta["stage"] = stage;
  ck.meta["config"] = c;
  ck.meta["config_hash"] = config_hash(cfg);
  ck.meta["seed"] = cfg.seed;
  diffusion::save_checkpoint(path, ck);
}

}  // namespace synhat::pipeline
