// SPDX-License-Identifier: Apache-2.0
#include "synhat/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "synhat/config.hpp"
#include "synhat/evaluate.hpp"
#include "synhat/ingest.hpp"
#include "synhat/pipeline.hpp"
#include "synhat/semantic_align.hpp"
#include "synhat/toy_city.hpp"
#include "synhat/trace_construct.hpp"

namespace synhat::cli {
namespace fs = std::filesystem;
using nlohmann::json;
using pipeline::PipelineConfig;

namespace {

/// Missing input file, bad flag value or any other setup problem.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string device = "cpu";
  std::string preset = "default";
};

void add_common(CLI::App* app, Common& c, bool seed_required) {
  app->add_option("--config", c.config_path, "Flat key = value config file");
  app->add_option("--override", c.overrides, "key=value applied after the config file (repeatable)");
  auto* s = app->add_option("--seed", c.seed, "Random seed recorded in every artifact");
  if (seed_required) s->required();
  app->add_option("--device", c.device, "Compute device")->capture_default_str();
  app->add_option("--preset", c.preset, "Hyperparameter base before the config file")
      ->check(CLI::IsMember({"default", "toy"}))
      ->capture_default_str();
}

FlatConfig load_flat(const Common& c) {
  FlatConfig f;
  if (!c.config_path.empty()) {
    if (!fs::exists(c.config_path)) throw UsageError("config file not found: " + c.config_path);
    f = FlatConfig::load(c.config_path);
  }
  for (const auto& o : c.overrides) f.apply_override(o);
  return f;
}

void check_device(const Common& c) {
  if (c.device != "cpu") throw UsageError("device '" + c.device + "' is not available; this build runs on cpu only");
}

PipelineConfig base_for(const Common& c) { return c.preset == "toy" ? PipelineConfig::toy() : PipelineConfig{}; }

fs::path resolve_input(const std::string& p) {
  if (fs::exists(p)) return p;
  const fs::path rel(p);
  if (rel.is_relative()) {
    const fs::path cached = fs::path(cache_dir()) / rel;
    if (fs::exists(cached)) return cached;
  }
  throw UsageError("input not found: " + p + " (also looked in " + cache_dir() + ")");
}

json meta_of(const std::string& hash, std::uint64_t seed) { return {{"config_hash", hash}, {"seed", seed}}; }

std::string tagged_lines(const std::vector<Hat>& hats, const std::string& hash, std::uint64_t seed) {
  std::string buf;
  for (const Hat& h : hats) {
    json j = json::parse(hat_to_json_line(h));
    j["config_hash"] = hash;
    j["seed"] = seed;
    buf += j.dump();
    buf += '\n';
  }
  return buf;
}

void write_tagged(const fs::path& path, const std::vector<Hat>& hats, const std::string& hash, std::uint64_t seed) {
  write_file_atomic(path, tagged_lines(hats, hash, seed));
}

std::string csv_header(const std::string& hash, std::uint64_t seed) {
  return "# config_hash=" + hash + " seed=" + std::to_string(seed) + "\n";
}

fs::path sibling(const fs::path& p, const std::string& suffix) {
  fs::path s = p;
  s += suffix;
  return s;
}

fs::path history_path(const fs::path& fine) { return sibling(fine, ".history.json"); }
fs::path pois_path(const fs::path& fine) { return sibling(fine, ".pois.json"); }

void save_pois(const fs::path& path, const std::vector<Poi>& pois, const json& meta) {
  json arr = json::array();
  for (const Poi& p : pois) arr.push_back({{"id", p.id}, {"lat", p.lat}, {"lon", p.lon}});
  write_file_atomic(path, json{{"format", "synhat-pois"}, {"version", 1}, {"meta", meta}, {"pois", arr}}.dump());
}

std::vector<Poi> load_pois(const fs::path& path) {
  const json j = json::parse(read_file(path));
  if (j.value("format", "") != "synhat-pois") throw std::runtime_error(path.string() + ": not a POI table");
  std::vector<Poi> out;
  for (const auto& p : j.at("pois")) out.push_back({p.at("id").get<std::string>(), p.at("lat").get<double>(), p.at("lon").get<double>()});
  return out;
}

void log(const std::string& s) { std::cerr << s << std::endl; }

// ---------------------------------------------------------------------------

void train_coarse_loop(pipeline::CoarseModel& m, int epochs) {
  const int every = std::max(1, epochs / 10);
  for (int e = m.epochs_done(); e < epochs; ++e) {
    const double loss = m.train_epoch(e);
    if (e % every == 0 || e + 1 == epochs) log("coarse epoch " + std::to_string(e) + " loss " + std::to_string(loss));
  }
}

void train_fine_loop(pipeline::FineModel& m, int epochs) {
  const int every = std::max(1, epochs / 10);
  for (int e = m.epochs_done(); e < epochs; ++e) {
    const double loss = m.train_epoch(e);
    if (e % every == 0 || e + 1 == epochs) log("fine epoch " + std::to_string(e) + " loss " + std::to_string(loss));
  }
}

PipelineConfig config_from_checkpoint(const diffusion::Checkpoint& ck, const fs::path& path) {
  if (!ck.meta.contains("config")) throw std::runtime_error(path.string() + ": checkpoint carries no config");
  return PipelineConfig::from_json(ck.meta.at("config"));
}

void write_fidelity(const fs::path& out, const eval::FidelityReport& r, const std::string& hash, std::uint64_t seed) {
  std::ostringstream csv, cdf;
  csv << csv_header(hash, seed);
  r.write_csv(csv);
  cdf << csv_header(hash, seed);
  r.write_cdf_csv(cdf);
  write_file_atomic(sibling(out, ".csv"), csv.str());
  write_file_atomic(sibling(out, ".cdf.csv"), cdf.str());
}

eval::PrivacyConfig privacy_config(const FlatConfig& f) {
  eval::PrivacyConfig p;
  p.tr_s = f.get_double("privacy.tr_s", p.tr_s);
  p.tr_t = f.get_double("privacy.tr_t", p.tr_t);
  p.sample_count = static_cast<std::size_t>(f.get_int("privacy.sample_count", static_cast<std::int64_t>(p.sample_count)));
  return p;
}

// ---------------------------------------------------------------------------

struct IngestArgs {
  Common c;
  std::string input, format, city;
  bool split = false;
};

int cmd_ingest(IngestArgs& a) {
  check_device(a.c);
  const FlatConfig f = load_flat(a.c);
  ingest::IngestConfig cfg = ingest::ingest_config_from_flat(f, a.city);
  if (!a.format.empty()) {
    try {
      cfg.format = ingest::parse_format(a.format);
    } catch (const std::exception& e) {
      throw UsageError(e.what());
    }
  }
  std::string input = a.input.empty() ? f.get_string("ingest.input", "") : a.input;
  if (input.empty()) {
    if (a.city.empty()) throw UsageError("ingest needs --input, ingest.input or --city");
    input = a.city + (cfg.format == ingest::SourceFormat::Jsonl ? ".jsonl" : ".tsv");
  }
  const fs::path src = resolve_input(input);
  const std::uint64_t seed = a.c.seed.value_or(0);
  const std::string hash = hex64(f.hash());
  auto parsed = ingest::parse_checkins(src, cfg);
  const auto corpus = ingest::build_corpus(parsed.by_user, cfg);
  log("rows " + std::to_string(parsed.rows) + ", malformed " + std::to_string(parsed.malformed) + ", outside window " +
      std::to_string(parsed.outside_window) + ", outside bbox " + std::to_string(parsed.outside_bbox) + ", traces " +
      std::to_string(corpus.size()));
  const fs::path out = a.c.out.empty() ? fs::path("corpus.jsonl") : fs::path(a.c.out);
  write_tagged(out, corpus, hash, seed);
  if (a.split) {
    const auto s = ingest::split(corpus, seed);
    const fs::path stem = out.parent_path() / out.stem();
    write_tagged(sibling(stem, ".train.jsonl"), s.train, hash, seed);
    write_tagged(sibling(stem, ".val.jsonl"), s.val, hash, seed);
    write_tagged(sibling(stem, ".test.jsonl"), s.test, hash, seed);
  }
  return 0;
}

struct TrainArgs {
  Common c;
  std::string corpus, coarse;
  bool resume = false;
};

int cmd_train_coarse(TrainArgs& a) {
  check_device(a.c);
  PipelineConfig cfg = PipelineConfig::from_flat(load_flat(a.c), base_for(a.c));
  cfg.seed = *a.c.seed;
  const auto corpus = read_hats(resolve_input(a.corpus));
  const fs::path out = a.c.out.empty() ? fs::path("coarse.ck") : fs::path(a.c.out);
  pipeline::CoarseModel m(cfg);
  m.prepare(corpus);
  if (a.resume && fs::exists(out)) {
    const auto ck = diffusion::load_checkpoint(out);
    if (ck.meta.value("config_hash", "") != pipeline::config_hash(cfg))
      throw UsageError(out.string() + " was written with a different config or seed");
    m.restore(ck);
    log("resuming at epoch " + std::to_string(m.epochs_done()));
  }
  train_coarse_loop(m, cfg.coarse_train.epochs);
  pipeline::save_stage(out, m.checkpoint(), cfg, "coarse");
  return 0;
}

int cmd_train_fine(TrainArgs& a) {
  check_device(a.c);
  PipelineConfig cfg = PipelineConfig::from_flat(load_flat(a.c), base_for(a.c));
  cfg.seed = *a.c.seed;
  const auto corpus = read_hats(resolve_input(a.corpus));
  const fs::path coarse_path = resolve_input(a.coarse);
  const auto cck = diffusion::load_checkpoint(coarse_path);
  PipelineConfig ccfg = config_from_checkpoint(cck, coarse_path);
  if (ccfg.granularity != cfg.granularity || ccfg.duration != cfg.duration)
    throw UsageError("coarse checkpoint uses Int = " + std::to_string(ccfg.granularity) + " s, D = " +
                     std::to_string(ccfg.duration) + " s; config has Int = " + std::to_string(cfg.granularity) +
                     " s, D = " + std::to_string(cfg.duration) + " s");
  pipeline::CoarseModel coarse(ccfg);
  coarse.restore(cck);

  const fs::path out = a.c.out.empty() ? fs::path("fine.ck") : fs::path(a.c.out);
  pipeline::FineModel m(cfg, coarse.normalizer());
  m.prepare(corpus);
  if (a.resume && fs::exists(out)) {
    const auto ck = diffusion::load_checkpoint(out);
    if (ck.meta.value("config_hash", "") != pipeline::config_hash(cfg))
      throw UsageError(out.string() + " was written with a different config or seed");
    m.restore(ck);
    log("resuming at epoch " + std::to_string(m.epochs_done()));
  }
  train_fine_loop(m, cfg.fine_train.epochs);
  pipeline::save_stage(out, m.checkpoint(), cfg, "fine");

  const std::string hash = pipeline::config_hash(cfg);
  align::PoiIndex index(align::pois_from_corpus(corpus));
  save_pois(pois_path(out), index.pois(), meta_of(hash, cfg.seed));
  align::VisitHistory::build(corpus, index).save(history_path(out), index, meta_of(hash, cfg.seed));
  return 0;
}

struct GenerateArgs {
  Common c;
  std::string coarse, fine, dump_coarse;
  int count = 100;
};

int cmd_generate(GenerateArgs& a) {
  check_device(a.c);
  const FlatConfig f = load_flat(a.c);
  const fs::path coarse_path = resolve_input(a.coarse), fine_path = resolve_input(a.fine);
  const fs::path hist_path = resolve_input(history_path(fine_path).string());
  const fs::path poi_path = resolve_input(pois_path(fine_path).string());
  const auto cck = diffusion::load_checkpoint(coarse_path);
  const auto fck = diffusion::load_checkpoint(fine_path);

  PipelineConfig ccfg = PipelineConfig::from_flat(f, config_from_checkpoint(cck, coarse_path));
  PipelineConfig cfg = PipelineConfig::from_flat(f, config_from_checkpoint(fck, fine_path));
  ccfg.seed = cfg.seed = *a.c.seed;
  if (ccfg.granularity != cfg.granularity || ccfg.duration != cfg.duration)
    throw UsageError("coarse and fine checkpoints disagree on Int or D");
  ccfg.sampler = cfg.sampler;
  ccfg.max_resample = cfg.max_resample;
  ccfg.stay_threshold = cfg.stay_threshold;

  pipeline::CoarseModel coarse(ccfg);
  coarse.restore(cck);
  pipeline::FineModel fine(cfg, coarse.normalizer());
  fine.restore(fck);
  align::PoiIndex index(load_pois(poi_path));
  const auto history = align::VisitHistory::load(hist_path, index);

  pipeline::SynthesisStats stats;
  std::vector<LatentSTTrace> drawn;
  const auto hats = pipeline::synthesize(coarse, fine, index, history, a.count, cfg.seed, &stats,
                                         a.dump_coarse.empty() ? nullptr : &drawn);
  log("generated " + std::to_string(hats.size()) + " of " + std::to_string(a.count) + " traces; " +
      std::to_string(stats.states_dropped) + " states without a POI in range");
  const std::string hash = pipeline::config_hash(cfg);
  const fs::path out = a.c.out.empty() ? fs::path("synth.jsonl") : fs::path(a.c.out);
  write_tagged(out, hats, hash, cfg.seed);
  if (!a.dump_coarse.empty()) {
    std::ostringstream csv;
    csv << csv_header(hash, cfg.seed) << "trace,slot,lat,lon,mask\n";
    csv.precision(10);
    for (std::size_t k = 0; k < drawn.size(); ++k)
      for (std::size_t i = 0; i < drawn[k].length(); ++i)
        csv << k << ',' << i << ',' << drawn[k].coords[i].lat << ',' << drawn[k].coords[i].lon << ','
            << drawn[k].mask[i] << '\n';
    write_file_atomic(a.dump_coarse, csv.str());
  }
  return 0;
}

struct EvaluateArgs {
  Common c;
  std::string real, synth, train;
  bool privacy = false;
  int bins = 50;
};

int cmd_evaluate(EvaluateArgs& a) {
  check_device(a.c);
  const FlatConfig f = load_flat(a.c);
  const auto real = read_hats(resolve_input(a.real));
  const auto synth = read_hats(resolve_input(a.synth));
  const std::uint64_t seed = a.c.seed.value_or(0);
  const std::string hash = hex64(f.hash());
  const fs::path out = a.c.out.empty() ? fs::path("report.json") : fs::path(a.c.out);

  const auto fid = eval::fidelity_report(real, synth, a.bins);
  json report{{"meta", meta_of(hash, seed)}, {"fidelity", fid.to_json()}};
  write_fidelity(out, fid, hash, seed);
  if (a.privacy) {
    const auto train = a.train.empty() ? real : read_hats(resolve_input(a.train));
    const auto pcfg = privacy_config(f);
    std::mt19937_64 rng(seed);
    const auto pr = eval::privacy_report(synth, train, pcfg, rng);
    report["privacy"] = pr.to_json(pcfg);
    std::ostringstream csv;
    csv << csv_header(hash, seed);
    pr.write_csv(csv);
    write_file_atomic(sibling(out, ".privacy.csv"), csv.str());
  }
  write_file_atomic(out, report.dump(2) + "\n");
  std::cout << "average JSD " << fid.average << "\n";
  return 0;
}

struct ToyArgs {
  Common c;
  int count = 200;
  bool privacy = true;
};

int cmd_toy_demo(ToyArgs& a) {
  check_device(a.c);
  const FlatConfig f = load_flat(a.c);
  PipelineConfig cfg = PipelineConfig::from_flat(f, PipelineConfig::toy());
  cfg.seed = a.c.seed.value_or(0);
  const std::string hash = pipeline::config_hash(cfg);
  const fs::path dir = a.c.out.empty() ? fs::path("toy_demo") : fs::path(a.c.out);
  fs::create_directories(dir);

  const auto city = toy::make_toy_city();
  write_tagged(dir / "corpus.jsonl", city.traces, hash, cfg.seed);

  pipeline::CoarseModel coarse(cfg);
  coarse.prepare(city.traces);
  train_coarse_loop(coarse, cfg.coarse_train.epochs);
  pipeline::save_stage(dir / "coarse.ck", coarse.checkpoint(), cfg, "coarse");

  pipeline::FineModel fine(cfg, coarse.normalizer());
  fine.prepare(city.traces);
  train_fine_loop(fine, cfg.fine_train.epochs);
  pipeline::save_stage(dir / "fine.ck", fine.checkpoint(), cfg, "fine");

  align::PoiIndex index(city.pois);
  const auto history = align::VisitHistory::build(city.traces, index);
  save_pois(pois_path(dir / "fine.ck"), index.pois(), meta_of(hash, cfg.seed));
  history.save(history_path(dir / "fine.ck"), index, meta_of(hash, cfg.seed));

  pipeline::SynthesisStats stats;
  const auto synth = pipeline::synthesize(coarse, fine, index, history, a.count, cfg.seed, &stats);
  write_tagged(dir / "synth.jsonl", synth, hash, cfg.seed);
  if (synth.empty()) throw std::runtime_error("toy run produced no traces");

  const auto walk = toy::random_walk_baseline(city.pois, city.traces, a.count, pipeline::derive_seed(cfg.seed, 9));
  const auto fid = eval::fidelity_report(city.traces, synth);
  const auto rw = eval::fidelity_report(city.traces, walk);
  int wins = 0;
  json per = json::object();
  for (std::size_t k = 0; k < eval::kMetrics.size(); ++k) {
    wins += fid.jsd[k] < rw.jsd[k];
    per[eval::metric_name(eval::kMetrics[k])] = {{"synhat", fid.jsd[k]}, {"random_walk", rw.jsd[k]}};
  }
  json report{{"meta", meta_of(hash, cfg.seed)},
              {"generated", synth.size()},
              {"fidelity", fid.to_json()},
              {"random_walk", rw.to_json()},
              {"comparison", {{"per_metric", per}, {"metrics_below_random_walk", wins}}}};
  if (a.privacy) {
    const auto pcfg = privacy_config(f);
    std::mt19937_64 rng(pipeline::derive_seed(cfg.seed, 10));
    report["privacy"] = eval::privacy_report(synth, city.traces, pcfg, rng).to_json(pcfg);
  }
  write_fidelity(dir / "report.json", fid, hash, cfg.seed);
  write_file_atomic(dir / "report.json", report.dump(2) + "\n");
  std::cout << "average JSD " << fid.average << " (random walk " << rw.average << "), below random walk on " << wins
            << " of 4 metrics\n";
  return 0;
}

}  // namespace

std::string cache_dir() {
  if (const char* d = std::getenv("SYNHAT_CACHE_DIR"); d && *d) return d;
  if (const char* x = std::getenv("XDG_CACHE_HOME"); x && *x) return (fs::path(x) / "synhat").string();
  if (const char* h = std::getenv("HOME"); h && *h) return (fs::path(h) / ".cache" / "synhat").string();
  return ".synhat-cache";
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"Two-stage diffusion synthesizer for human activity traces"};
  app.require_subcommand(1);

  IngestArgs ia;
  auto* ingest = app.add_subcommand("ingest", "Turn a raw check-in dump into a HAT corpus");
  add_common(ingest, ia.c, false);
  ingest->add_option("--out", ia.c.out, "Output corpus (JSON Lines)");
  ingest->add_option("--input", ia.input, "Raw check-in file; relative paths fall back to the cache directory");
  ingest->add_option("--format", ia.format, "foursquare_tsv, gowalla_tsv or jsonl");
  ingest->add_option("--city", ia.city, "City preset")->check(CLI::IsMember({"nyc", "tky", "atx", "sto"}));
  ingest->add_flag("--split", ia.split, "Also write seeded 7:1:2 train/val/test files");

  TrainArgs tc;
  auto* train_coarse = app.add_subcommand("train-coarse", "Train the Stage-1 model");
  add_common(train_coarse, tc.c, true);
  train_coarse->add_option("--out", tc.c.out, "Checkpoint path");
  train_coarse->add_option("--corpus", tc.corpus, "Training corpus (JSON Lines)")->required();
  train_coarse->add_flag("--resume", tc.resume, "Continue from the checkpoint at --out");

  TrainArgs tf;
  auto* train_fine = app.add_subcommand("train-fine", "Train the Stage-2 model and build the visit history");
  add_common(train_fine, tf.c, true);
  train_fine->add_option("--out", tf.c.out, "Checkpoint path");
  train_fine->add_option("--corpus", tf.corpus, "Training corpus (JSON Lines)")->required();
  train_fine->add_option("--coarse", tf.coarse, "Stage-1 checkpoint (supplies the normalizer)")->required();
  train_fine->add_flag("--resume", tf.resume, "Continue from the checkpoint at --out");

  GenerateArgs ga;
  auto* generate = app.add_subcommand("generate", "Synthesize HATs");
  add_common(generate, ga.c, true);
  generate->add_option("--out", ga.c.out, "Output (JSON Lines)");
  generate->add_option("--count", ga.count, "Number of traces")->check(CLI::NonNegativeNumber)->capture_default_str();
  generate->add_option("--coarse", ga.coarse, "Stage-1 checkpoint")->required();
  generate->add_option("--fine", ga.fine, "Stage-2 checkpoint; its .history.json and .pois.json sit beside it")
      ->required();
  generate->add_option("--dump-coarse", ga.dump_coarse, "Debug: write every Stage-1 trace drawn as CSV");

  EvaluateArgs ea;
  auto* evaluate = app.add_subcommand("evaluate", "Fidelity (and optionally privacy) report");
  add_common(evaluate, ea.c, false);
  evaluate->add_option("--out", ea.c.out, "Report path; CSVs are written beside it");
  evaluate->add_option("--real", ea.real, "Reference corpus")->required();
  evaluate->add_option("--synth", ea.synth, "Synthetic corpus")->required();
  evaluate->add_option("--train", ea.train, "Training corpus for the privacy check (default: --real)");
  evaluate->add_flag("--privacy", ea.privacy, "Add the max-similarity privacy report");
  evaluate->add_option("--bins", ea.bins, "Histogram bins")->check(CLI::PositiveNumber)->capture_default_str();

  ToyArgs ta;
  auto* toy_demo = app.add_subcommand("toy-demo", "Train and evaluate on the bundled toy city");
  add_common(toy_demo, ta.c, false);
  toy_demo->add_option("--out", ta.c.out, "Output directory");
  toy_demo->add_option("--count", ta.count, "Synthetic traces")->check(CLI::PositiveNumber)->capture_default_str();

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*ingest) return cmd_ingest(ia);
    if (*train_coarse) return cmd_train_coarse(tc);
    if (*train_fine) return cmd_train_fine(tf);
    if (*generate) return cmd_generate(ga);
    if (*evaluate) return cmd_evaluate(ea);
    if (*toy_demo) return cmd_toy_demo(ta);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}

int run(int argc, char** argv) { return run(std::vector<std::string>(argv, argv + argc)); }

}  // namespace synhat::cli
