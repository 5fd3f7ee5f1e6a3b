// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "synhat/bpem.hpp"
#include "synhat/config.hpp"
#include "synhat/data_model.hpp"
#include "synhat/diffusion.hpp"
#include "synhat/lst_unet.hpp"
#include "synhat/nn/optim.hpp"
#include "synhat/semantic_align.hpp"
#include "synhat/trace_construct.hpp"

namespace synhat::pipeline {

/// splitmix64 finalizer; seeds derived streams.
std::uint64_t mix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

struct TrainConfig {
  int epochs = 100;
  int batch_size = 16;
  nn::AdamWConfig optim;
  double grad_clip = 1.0;
  double ema_decay = 0.999;
  diffusion::EventWeighting weighting;
};

/// Condition perturbation for Stage-2 training. The probability ramps
/// linearly from p_start to p_end over the first ramp_fraction of training.
struct PerturbConfig {
  double p_start = 0.05;
  double p_end = 0.30;
  double ramp_fraction = 0.5;
  double sigma_s = 0.05;   // normalized coordinate units
  double sigma_t = 360.0;  // seconds

  double p_at(double progress) const;
};

struct PipelineConfig {
  Seconds granularity = 3600;
  Seconds duration = 7 * 86400;
  int diffusion_steps = 1000;
  /// Network output: "v" (velocity, converted to noise) or "eps".
  std::string prediction = "v";
  unet::UNetConfig coarse_net;
  unet::UNetConfig fine_net;
  bpem::BpemConfig bpem;
  TrainConfig coarse_train;
  TrainConfig fine_train;
  PerturbConfig perturb;
  diffusion::SamplerConfig sampler;
  double stay_threshold = 0.5;
  double fine_threshold = 0.7;
  align::AlignConfig align;
  /// Off: Stage 2 runs without BPEM context and without FiLM.
  bool use_context = true;
  /// Sample with EMA weights rather than the live ones.
  bool sample_with_ema = true;
  /// Clip predicted x0 to the per-channel range of the training data.
  bool clip_x0 = true;
  int max_resample = 10;
  std::uint64_t seed = 0;

  int slots() const { return static_cast<int>(duration / granularity); }
  int fine_cells() const { return static_cast<int>(granularity / kFineUnit); }
  /// Throws ConfigError; the granularity message names both values.
  void validate() const;
  /// Network configs with the derived channel/context fields filled in.
  unet::UNetConfig coarse_unet() const;
  unet::UNetConfig fine_unet() const;
  bpem::BpemConfig bpem_config() const;

  nlohmann::json to_json() const;
  static PipelineConfig from_json(const nlohmann::json& j);
  /// Reads [data], [coarse], [fine], [bpem], [sampler], [align], [pipeline]
  /// sections; unspecified keys keep the values of `base`.
  static PipelineConfig from_flat(const FlatConfig& cfg, PipelineConfig base);
  static PipelineConfig from_flat(const FlatConfig& cfg) { return from_flat(cfg, PipelineConfig{}); }
  /// Small networks and short schedules sized for the bundled toy city.
  static PipelineConfig toy();
};

/// Raised when a training loss turns non-finite.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stage-2 input layout: [fine lat, fine lon, fine mask, l_i lat, l_i lon, t_i].
inline constexpr int kFineTargetChannels = 3;
inline constexpr int kFineConditionChannels = 3;

/// Slot midpoint on [-1, 1]: 2 (slot + 0.5) Int / D - 1.
double slot_time(int slot, Seconds granularity, Seconds duration);

/// Coarse trace in model space: normalized coordinates, mask as 2m - 1.
std::vector<double> encode_coarse(const LatentSTTrace& t, const trace::Normalizer& norm);
/// Inverse of encode_coarse for one [3, L] block; the mask is clamped to [0, 1].
LatentSTTrace decode_coarse(const std::vector<double>& x, int length, Seconds granularity,
                            const trace::Normalizer& norm);

/// Stage 1: unconditional diffusion over coarse latent ST traces.
class CoarseModel {
 public:
  explicit CoarseModel(const PipelineConfig& cfg);

  /// Fits the normalizer and the leading dummy and builds the training set.
  void prepare(const std::vector<Hat>& corpus);
  /// One pass over the training set; returns the mean loss. The shuffle,
  /// steps and noise come from a stream derived from (seed, epoch).
  double train_epoch(int epoch);
  int epochs_done() const { return epochs_done_; }
  /// Unweighted epsilon loss of the live weights over the whole training set
  /// with steps and noise fixed by `seed`.
  double evaluate_loss(std::uint64_t seed) const;

  diffusion::Checkpoint checkpoint() const;
  /// Restores weights, EMA, optimizer state and data statistics. Training can
  /// continue after prepare() on the same corpus.
  void restore(const diffusion::Checkpoint& ck);

  /// Draws `count` traces; samples whose thresholded mask is empty are
  /// redrawn up to max_resample times and dropped after that.
  std::vector<LatentSTTrace> generate(int count, std::uint64_t seed) const;
  /// Denoises the given [B,3,L] noise with the sampling weights.
  nn::Tensor sample(const nn::Tensor& noise, nn::Rng& rng) const;

  const trace::Normalizer& normalizer() const { return norm_; }
  const Coord& dummy() const { return dummy_; }
  const unet::LSTUNet& net() const { return *net_; }
  const PipelineConfig& config() const { return cfg_; }

 private:
  PipelineConfig cfg_;
  diffusion::Schedule schedule_;
  std::unique_ptr<unet::LSTUNet> net_;
  std::unique_ptr<nn::AdamW> opt_;
  std::unique_ptr<nn::Ema> ema_;
  trace::Normalizer norm_;
  Coord dummy_;
  std::vector<std::vector<double>> data_;
  std::vector<double> clip_low_, clip_high_;
  int epochs_done_ = 0;
};

/// What one Stage-2 training batch fed the network; for instrumentation.
struct FineStepRecord {
  int epoch = 0;
  std::vector<double> targets;           // x0 as built from the corpus
  std::vector<double> targets_used;      // x0 handed to the noising path
  std::vector<double> conditions;        // clean condition channels
  std::vector<double> conditions_used;   // after perturbation
  std::vector<char> perturbed;           // one flag per segment
};

struct PerturbStats {
  long long decisions = 0;
  long long perturbed = 0;
};

/// One training trace for Stage 2.
struct FineExample {
  std::vector<Coord> state_coords;  // normalized
  std::vector<int> slots;
  std::vector<double> visits;       // binary coarse mask
  std::vector<double> targets;      // [n, 3, W]
};

/// Stage 2: per-slot conditional diffusion with BPEM context.
class FineModel {
 public:
  FineModel(const PipelineConfig& cfg, const trace::Normalizer& norm);

  /// Builds per-slot targets from real HATs and their real coarse states.
  void prepare(const std::vector<Hat>& corpus);
  double train_epoch(int epoch);
  int epochs_done() const { return epochs_done_; }

  /// Applies the perturbation draw for one segment to its condition channels
  /// [3, W]; returns whether it fired.
  bool perturb(std::vector<double>& cond, double p, nn::Rng& rng) const;
  const PerturbStats& perturb_stats() const { return stats_; }
  std::function<void(const FineStepRecord&)> observer;
  /// Overrides the scheduled perturbation probability when >= 0.
  double fixed_perturb_p = -1.0;

  diffusion::Checkpoint checkpoint() const;
  void restore(const diffusion::Checkpoint& ck);

  /// Fine states of one coarse trace (real coordinates). Context is extracted
  /// once; each active slot draws its noise from derive_seed(trace_seed,
  /// slot). `slot_order` permutes the processing order when given.
  FineStates generate(const LatentSTTrace& coarse, std::uint64_t trace_seed,
                      const std::vector<int>* slot_order = nullptr) const;
  /// Same, returning the raw generated segments per active slot.
  std::vector<trace::FineSegment> generate_segments(const LatentSTTrace& coarse, std::uint64_t trace_seed,
                                                    const std::vector<int>* slot_order = nullptr) const;

  const bpem::Bpem& bpem() const { return *bpem_; }
  const unet::LSTUNet& net() const { return *net_; }
  const PipelineConfig& config() const { return cfg_; }
  const std::vector<FineExample>& examples() const { return data_; }
  /// Context extractions performed by generate().
  long long context_extractions() const { return bpem_ ? bpem_->encode_calls() : contexts_; }

 private:
  nn::NamedParams trainable() const;
  std::vector<double> condition_block(Coord l, int slot) const;
  nn::Tensor denoise(const nn::Tensor& x, const std::vector<int>& steps, const nn::Tensor& cond,
                     const nn::Tensor& context) const;

  PipelineConfig cfg_;
  trace::Normalizer norm_;
  diffusion::Schedule schedule_;
  std::unique_ptr<bpem::Bpem> bpem_;
  std::unique_ptr<unet::LSTUNet> net_;
  std::unique_ptr<nn::AdamW> opt_;
  std::unique_ptr<nn::Ema> ema_;
  std::vector<FineExample> data_;
  std::vector<double> clip_low_, clip_high_;
  PerturbStats stats_;
  int epochs_done_ = 0;
  mutable long long contexts_ = 0;
};

struct SynthesisStats {
  int coarse_dropped = 0;     // Stage-1 samples without states after all retries
  std::size_t states_dropped = 0;  // fine states without a POI in range
  int empty_retries = 0;      // traces regenerated because alignment kept nothing
};

/// Stage 1 -> states -> Stage 2 -> semantic alignment. Returns up to `count`
/// valid HATs with trace ids "syn<k>"; a trace that ends up empty is redrawn
/// up to max_resample times. `coarse_out` collects every Stage-1 trace drawn.
std::vector<Hat> synthesize(const CoarseModel& coarse, const FineModel& fine, const align::PoiIndex& index,
                            const align::VisitHistory& history, int count, std::uint64_t seed,
                            SynthesisStats* stats = nullptr, std::vector<LatentSTTrace>* coarse_out = nullptr);

/// Stage 2 and alignment over given Stage-1 traces; traces that align to
/// nothing are skipped. Trace ids are left empty.
std::vector<Hat> synthesize_from(const std::vector<LatentSTTrace>& coarse, const FineModel& fine,
                                 const align::PoiIndex& index, const align::VisitHistory& history,
                                 std::uint64_t seed, SynthesisStats* stats = nullptr);

/// Hex FNV-1a of the canonical JSON form.
std::string config_hash(const PipelineConfig& cfg);

/// Writes a checkpoint with the config, its hash and the seed in the metadata.
void save_stage(const std::filesystem::path& path, diffusion::Checkpoint ck, const PipelineConfig& cfg,
                const std::string& stage);

}  // namespace synhat::pipeline
