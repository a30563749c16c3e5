#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "hyperloop/error.hpp"
#include "run_config.hpp"

using namespace hyperloop;
using namespace hyperloop::cli;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("hyperloop_cli_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int hlt(const std::string& args, const fs::path& log) {
  const std::string cmd = "HLT_THREADS=1 " + std::string(HLT_BINARY) + " " + args + " >" + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const char* kTiny =
    "--set model.model_dim=16 --set model.head_count=2 --set model.ffn_multiple_of=8 --set model.streams=2 "
    "--set train.batch_size=2 --set train.seq_len=16 --set train.total_steps=4 --set train.warmup_steps=1 "
    "--set train.eval_every=2 --set train.eval_windows=2 --set data.synthetic_bytes=8192";

}  // namespace

TEST_CASE("overrides address existing dotted keys only") {
  nlohmann::json doc = to_json(RunConfig{});
  apply_override(doc, "model.loops=5");
  apply_override(doc, "model.hres_mode=sinkhorn");
  apply_override(doc, "train.max_lr=0.002");
  CHECK(doc["model"]["loops"] == 5);
  CHECK(doc["model"]["hres_mode"] == "sinkhorn");
  const auto c = run_config_from_json(doc);
  CHECK(c.model.loops == 5);
  CHECK(c.train.max_lr == 0.002);
  CHECK_THROWS_AS(apply_override(doc, "model.nonexistent=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "model=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "loops"), ConfigError);
}

TEST_CASE("run config round-trips and rejects unknown fields") {
  RunConfig c;
  c.model.loops = 4;
  c.train.total_steps = 77;
  c.data.synthetic_bytes = 1234;
  const auto back = run_config_from_json(to_json(c));
  CHECK(back.model == c.model);
  CHECK(back.train.total_steps == 77);
  CHECK(back.data.synthetic_bytes == 1234);
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(run_config_from_json({{"extra", 1}}), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"data", {{"url", "x"}}}}), ConfigError);
}

TEST_CASE("sweep axes instantiate the ablation grids") {
  auto base = load_run_config(fs::path(HLT_CONFIG_DIR) / "toy_hyperloop.json", {}, std::nullopt);
  const auto loops = sweep_variants(base, "loops");
  REQUIRE(loops.size() == 5);
  CHECK(loops.front().config.model.loops == 2);
  CHECK(loops.back().config.model.loops == 6);
  const auto streams = sweep_variants(base, "streams");
  REQUIRE(streams.size() == 5);
  CHECK(streams[4].config.model.streams == 10);
  const auto modes = sweep_variants(base, "hres_mode");
  REQUIRE(modes.size() == 3);
  CHECK(modes[0].label == "hres_mode=identity");
  const auto placement = sweep_variants(base, "hc_placement");
  std::vector<Index> sites;
  for (const auto& v : placement) sites.push_back(count_params(v.config.model).hc_sites);
  CHECK(sites == std::vector<Index>{6, 3, 2, 1});

  base.model.middle_layers = 4;
  std::vector<Index> full_sites;
  for (const auto& v : sweep_variants(base, "hc_placement")) full_sites.push_back(count_params(v.config.model).hc_sites);
  CHECK(full_sites == std::vector<Index>{12, 6, 4, 3, 2, 1});
  CHECK_THROWS_AS(sweep_variants(base, "depth"), ConfigError);
}

TEST_CASE("seed flag sets model and data seeds") {
  const auto c = load_run_config(std::nullopt, {"model.loops=2"}, 42);
  CHECK(c.model.seed == 42);
  CHECK(c.train.seed == 42);
  CHECK_THROWS_AS(load_run_config(std::nullopt, {"model.loops=0"}, std::nullopt), ConfigError);
}

TEST_CASE("CLI exit codes and single-line errors") {
  const auto dir = scratch("errors");
  CHECK(hlt("params --set model.nope=1", dir / "a.txt") == 2);
  const auto err = slurp(dir / "a.txt");
  CHECK(err.find("{\"error\":\"config\"") == 0);
  CHECK(std::count(err.begin(), err.end(), '\n') == 1);
  CHECK(hlt("sweep --axis depth --out " + (dir / "s").string(), dir / "b.txt") == 2);
  CHECK(hlt("eval --checkpoint " + (dir / "missing.hltc").string(), dir / "c.txt") == 3);
  CHECK(hlt("frobnicate", dir / "d.txt") == 2);
  std::ofstream(dir / "bad.json") << "{not json";
  CHECK(hlt("params --config " + (dir / "bad.json").string(), dir / "e.txt") == 2);
  CHECK(hlt("params", dir / "f.txt") == 0);
  CHECK(slurp(dir / "f.txt").find("total=") != std::string::npos);
}

TEST_CASE("train, eval, quantize and analyze produce their artifacts") {
  const auto dir = scratch("flow");
  const auto run = dir / "run";
  REQUIRE(hlt("train " + std::string(kTiny) + " --seed 7 --out " + run.string(), dir / "train.txt") == 0);
  for (const char* f : {"checkpoint.hltc", "config.json", "metrics.jsonl", "eval.jsonl"}) CHECK(fs::exists(run / f));

  REQUIRE(hlt("eval --checkpoint " + (run / "checkpoint.hltc").string(), dir / "eval.txt") == 0);
  const auto eval = slurp(dir / "eval.txt");
  CHECK(eval.rfind("ppl=", 0) == 0);
  CHECK(std::stod(eval.substr(4)) > 1.0);

  REQUIRE(hlt("quantize --bits 4 --group 8 --calibration 4 --checkpoint " + (run / "checkpoint.hltc").string() +
                  " --out " + (dir / "q").string(),
              dir / "q.txt") == 0);
  const auto q = slurp(dir / "q.txt");
  CHECK(q.find("fp_ppl=") != std::string::npos);
  CHECK(q.find("int4_ppl=") != std::string::npos);
  REQUIRE(hlt("eval --checkpoint " + (dir / "q" / "quantized.hltc").string(), dir / "qeval.txt") == 0);

  REQUIRE(hlt("analyze --checkpoint " + (run / "checkpoint.hltc").string() + " --out " + (dir / "a").string(),
              dir / "a.txt") == 0);
  CHECK(fs::exists(dir / "a" / "lens_entropy.csv"));
  CHECK(fs::exists(dir / "a" / "similarity.csv"));

  // Re-running from the emitted effective config reproduces the artifacts.
  REQUIRE(hlt("train --config " + (run / "config.json").string() + " --out " + (dir / "rerun").string(),
              dir / "rerun.txt") == 0);
  for (const char* f : {"checkpoint.hltc", "config.json", "metrics.jsonl", "eval.jsonl"}) {
    CHECK(slurp(run / f) == slurp(dir / "rerun" / f));
  }
}

TEST_CASE("repeated commands are byte-identical") {
  const auto dir = scratch("determinism");
  std::string outputs[2];
  for (int i = 0; i < 2; ++i) {
    const auto out = dir / ("sweep" + std::to_string(i));
    REQUIRE(hlt("sweep --axis hres_mode " + std::string(kTiny) + " --set train.total_steps=2 --out " + out.string(),
                dir / ("log" + std::to_string(i))) == 0);
    for (const auto& e : fs::recursive_directory_iterator(out)) {
      if (e.is_regular_file()) outputs[i] += fs::relative(e.path(), out).string() + "\n" + slurp(e.path());
    }
  }
  CHECK(outputs[0].size() > 0);
  CHECK(outputs[0] == outputs[1]);
}
