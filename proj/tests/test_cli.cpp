// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "synhat/cli.hpp"
#include "synhat/data_model.hpp"
#include "synhat/diffusion.hpp"
#include "synhat/toy_city.hpp"

using namespace synhat;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("synhat_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Run {
  int code;
  std::string err;
};

Run run(std::vector<std::string> args) {
  args.insert(args.begin(), "synhat");
  std::ostringstream err, out;
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  const int code = cli::run(args);
  std::cerr.rdbuf(old_err);
  std::cout.rdbuf(old_out);
  return {code, err.str()};
}

const char* kTinyConfig =
    "[coarse]\nbase_channels = 4\nchannel_multipliers = [1, 2]\nembedding_dim = 8\nepochs = 2\nbatch_size = 4\n"
    "[fine]\nbase_channels = 4\nchannel_multipliers = [1, 2]\nembedding_dim = 8\nfilm_hidden = 8\nepochs = 1\n"
    "batch_size = 32\n[bpem]\ndim = 8\nheads = 2\n[sampler]\nddim_steps = 5\n";

std::string fsq_row(const std::string& user, const std::string& venue, double lat, double lon, const std::string& when) {
  std::ostringstream s;
  s << user << "\t" << venue << "\tcat\tCafe\t" << lat << "\t" << lon << "\t0\t" << when << "\n";
  return s.str();
}

}  // namespace

TEST_CASE("argument and config errors") {
  const fs::path dir = scratch("errors");
  SUBCASE("granularity not dividing the duration exits 2 and names both values") {
    const auto r = run({"toy-demo", "--out", (dir / "x").string(), "--override", "data.granularity_minutes=11"});
    CHECK(r.code == cli::kConfigExit);
    CHECK(r.err.find("660") != std::string::npos);
    CHECK(r.err.find("604800") != std::string::npos);
  }
  SUBCASE("config file errors carry the line") {
    write_file_atomic(dir / "bad.toml", "seed = 1\n[coarse]\nepochs = many\n");
    const auto r = run({"toy-demo", "--config", (dir / "bad.toml").string()});
    CHECK(r.code == cli::kConfigExit);
    CHECK(r.err.find("bad.toml:3") != std::string::npos);
  }
  SUBCASE("missing inputs are reported before any work") {
    const auto r = run({"generate", "--seed", "1", "--coarse", (dir / "none.ck").string(), "--fine",
                        (dir / "none.ck").string()});
    CHECK(r.code == cli::kConfigExit);
    CHECK(r.err.find("none.ck") != std::string::npos);
  }
  SUBCASE("seed is mandatory for training and generation") {
    CHECK(run({"train-coarse", "--corpus", "c.jsonl"}).code != 0);
    CHECK(run({"generate", "--coarse", "a", "--fine", "b"}).code != 0);
  }
  SUBCASE("unknown device") {
    const auto r = run({"toy-demo", "--device", "cuda:0"});
    CHECK(r.code == cli::kConfigExit);
    CHECK(r.err.find("cuda:0") != std::string::npos);
  }
}

TEST_CASE("ingest reads from the cache directory") {
  const fs::path dir = scratch("ingest");
  std::string text;
  const char* days[] = {"Mon Apr 02", "Tue Apr 03", "Wed Apr 04", "Thu Apr 05", "Fri Apr 06", "Sat Apr 07", "Sun Apr 08"};
  for (const char* d : days) text += fsq_row("17", "v1", 40.70, -74.00, std::string(d) + " 09:00:00 +0000 2012");
  text += fsq_row("18", "v2", 40.71, -74.01, "Mon Apr 02 09:00:00 +0000 2012");
  write_file_atomic(dir / "nyc.tsv", text);
  ::setenv("SYNHAT_CACHE_DIR", dir.string().c_str(), 1);
  CHECK(cli::cache_dir() == dir.string());

  const fs::path out = dir / "out" / "corpus.jsonl";
  const auto r = run({"ingest", "--format", "foursquare_tsv", "--city", "nyc", "--out", out.string(), "--seed", "4"});
  REQUIRE(r.code == 0);
  const auto hats = read_hats(out);
  REQUIRE(hats.size() == 1);
  CHECK(hats[0].events.size() == 7);
  CHECK(hats[0].duration == 14 * 86400);
  const json line = json::parse(read_file(out).substr(0, read_file(out).find('\n')));
  CHECK(line.contains("config_hash"));
  CHECK(line.at("seed") == 4);
  ::unsetenv("SYNHAT_CACHE_DIR");
}

TEST_CASE("train, generate and evaluate through the command line") {
  const fs::path dir = scratch("flow");
  write_file_atomic(dir / "tiny.toml", kTinyConfig);
  write_hats(dir / "train.jsonl", toy::make_toy_city(7, 12).traces);
  const std::string cfg = (dir / "tiny.toml").string();

  REQUIRE(run({"train-coarse", "--preset", "toy", "--config", cfg, "--seed", "3", "--corpus",
               (dir / "train.jsonl").string(), "--out", (dir / "coarse.ck").string()})
              .code == 0);
  const auto ck = diffusion::load_checkpoint(dir / "coarse.ck");
  CHECK(ck.meta.at("seed") == 3);
  CHECK(ck.meta.at("stage") == "coarse");
  CHECK(ck.meta.at("config_hash").get<std::string>().size() == 16);

  REQUIRE(run({"train-fine", "--preset", "toy", "--config", cfg, "--seed", "3", "--corpus",
               (dir / "train.jsonl").string(), "--coarse", (dir / "coarse.ck").string(), "--out",
               (dir / "fine.ck").string()})
              .code == 0);
  CHECK(fs::exists(dir / "fine.ck.history.json"));
  CHECK(fs::exists(dir / "fine.ck.pois.json"));
  const json hist = json::parse(read_file(dir / "fine.ck.history.json"));
  CHECK(hist.at("meta").at("seed") == 3);

  auto generate = [&](const std::string& seed, const fs::path& out) {
    return run({"generate", "--seed", seed, "--count", "3", "--coarse", (dir / "coarse.ck").string(), "--fine",
                (dir / "fine.ck").string(), "--out", out.string(), "--dump-coarse", (dir / "coarse.csv").string()})
        .code;
  };
  REQUIRE(generate("11", dir / "a.jsonl") == 0);
  REQUIRE(generate("11", dir / "b.jsonl") == 0);
  REQUIRE(generate("12", dir / "c.jsonl") == 0);
  const std::string a = read_file(dir / "a.jsonl");
  CHECK(a == read_file(dir / "b.jsonl"));
  CHECK(a != read_file(dir / "c.jsonl"));
  const auto hats = read_hats(dir / "a.jsonl");
  CHECK(hats.size() == 3);
  for (const auto& h : hats) CHECK(validate_hat(h).empty());
  const std::string csv = read_file(dir / "coarse.csv");
  CHECK(csv.rfind("# config_hash=", 0) == 0);
  CHECK(csv.find("trace,slot,lat,lon,mask\n") != std::string::npos);

  const fs::path report = dir / "eval" / "report.json";
  REQUIRE(run({"evaluate", "--real", (dir / "train.jsonl").string(), "--synth", (dir / "a.jsonl").string(),
               "--privacy", "--out", report.string()})
              .code == 0);
  const json rep = json::parse(read_file(report));
  CHECK(rep.at("fidelity").contains("radius"));
  CHECK(rep.at("fidelity").contains("average"));
  CHECK(rep.contains("privacy"));
  CHECK(rep.at("meta").contains("config_hash"));
  CHECK(fs::exists(dir / "eval" / "report.json.csv"));
  CHECK(fs::exists(dir / "eval" / "report.json.cdf.csv"));
  CHECK(fs::exists(dir / "eval" / "report.json.privacy.csv"));
}

TEST_CASE("toy-demo smoke run") {
  const fs::path dir = scratch("toy");
  const auto r = run({"toy-demo", "--seed", "2", "--count", "3", "--out", dir.string(), "--override",
                      "coarse.epochs=1", "--override", "fine.epochs=1", "--override", "sampler.ddim_steps=4"});
  REQUIRE(r.code == 0);
  CHECK(fs::exists(dir / "synth.jsonl"));
  const json rep = json::parse(read_file(dir / "report.json"));
  CHECK(rep.at("meta").at("seed") == 2);
  CHECK(rep.at("comparison").at("metrics_below_random_walk").get<int>() >= 0);
  CHECK(read_hats(dir / "corpus.jsonl") == toy::make_toy_city().traces);
}

TEST_CASE("bundled toy fixture matches the generator") {
  const fs::path dir = fs::path(SYNHAT_SOURCE_DIR) / "data" / "toy_city";
  const auto city = toy::make_toy_city();
  CHECK(read_hats(dir / "traces.jsonl") == city.traces);
  const json pois = json::parse(read_file(dir / "pois.json"));
  REQUIRE(pois.size() == city.pois.size());
  for (std::size_t i = 0; i < city.pois.size(); ++i) {
    CHECK(pois[i].at("id") == city.pois[i].id);
    CHECK(pois[i].at("lat").get<double>() == city.pois[i].lat);
    CHECK(pois[i].at("lon").get<double>() == city.pois[i].lon);
  }
}
