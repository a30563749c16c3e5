#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hyperloop/analyze.hpp"
#include "hyperloop/error.hpp"
#include "hyperloop/quant.hpp"
#include "run_config.hpp"

namespace fs = std::filesystem;
using namespace hyperloop;
using namespace hyperloop::cli;

namespace {

struct Options {
  std::optional<fs::path> config;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
  std::vector<std::string> sets;
  std::optional<fs::path> checkpoint;
  std::optional<fs::path> resume;
  int bits = 4;
  Index group = 32;
  std::string method = "gptq";
  Index calibration = 64;
  Index windows = -1;
  std::string axis;
  bool json = false;
};

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

void write_json(const fs::path& path, const nlohmann::json& doc) {
  const std::string text = doc.dump(2) + "\n";
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

fs::path require_out(const Options& o, const char* verb) {
  if (!o.out) throw ConfigError(std::string(verb) + ": --out is required");
  fs::create_directories(*o.out);
  return *o.out;
}

fs::path require_checkpoint(const Options& o, const char* verb) {
  if (!o.checkpoint) throw ConfigError(std::string(verb) + ": --checkpoint is required");
  return *o.checkpoint;
}

/// Data and evaluation settings for commands that start from a checkpoint: --config,
/// else the config.json written next to the checkpoint.
RunConfig config_for_checkpoint(const Options& o, const fs::path& checkpoint) {
  if (!fs::is_regular_file(checkpoint)) throw IoError("checkpoint " + checkpoint.string() + " does not exist");
  auto path = o.config;
  if (!path) {
    const auto sibling = checkpoint.parent_path() / "config.json";
    if (!fs::exists(sibling)) {
      throw ConfigError("no --config given and no config.json next to " + checkpoint.string());
    }
    path = sibling;
  }
  return load_run_config(path, o.sets, o.seed);
}

Index eval_windows(const Options& o, const RunConfig& c) { return o.windows >= 0 ? o.windows : c.train.eval_windows; }

EvalResult held_out_eval(const Model<float>& model, const TokenStream& data, const RunConfig& c, Index seq_len,
                         Index windows) {
  return evaluate_ppl(model, data.held_out(), seq_len, windows, c.train.batch_size);
}

struct TrainOutcome {
  StepRecord last;
  Index params = 0;
  fs::path checkpoint;
};

TrainOutcome train_into(const RunConfig& c, const fs::path& out, const std::optional<fs::path>& resume) {
  Model<float> model;
  TrainState state;
  if (resume) {
    auto run = load_training_checkpoint(*resume);
    if (!(run.model.config == c.model)) throw ConfigError("resume: checkpoint model config differs from run config");
    model = std::move(run.model);
    state = std::move(run.state);
  } else {
    model = build_model<float>(c.model);
  }
  fs::create_directories(out);
  write_json(out / "config.json", to_json(c));
  const auto data = load_data(c);
  const Index every = std::max<Index>(1, c.train.total_steps / 10);
  TrainOptions opts;
  opts.out_dir = out;
  opts.on_step = [&](const StepRecord& r) {
    if ((r.step + 1) % every == 0 || r.step == 0) {
      std::cerr << "step=" << r.step << " loss=" << fmt(r.loss, "%.4f") << " lr=" << fmt(r.lr, "%.3g") << '\n';
    }
  };
  const auto log = train_loop(model, state, data, c.train, opts);
  TrainOutcome result;
  if (!log.empty()) result.last = log.back();
  result.last.step = state.step;
  result.params = model.parameter_count();
  result.checkpoint = out / "checkpoint.hltc";
  return result;
}

int run_train(const Options& o) {
  const auto out = require_out(o, "train");
  auto c = o.resume ? config_for_checkpoint(o, *o.resume) : load_run_config(o.config, o.sets, o.seed);
  const auto r = train_into(c, out, o.resume);
  std::cout << "steps=" << r.last.step << " loss=" << fmt(r.last.loss) << " params=" << r.params
            << " checkpoint=" << r.checkpoint.string() << '\n';
  return 0;
}

int run_eval(const Options& o) {
  const auto ckpt = require_checkpoint(o, "eval");
  const auto c = config_for_checkpoint(o, ckpt);
  const auto run = load_any_checkpoint(ckpt);
  const auto data = load_data(c);
  const auto ev = held_out_eval(run.model, data, c, run.train.seq_len, eval_windows(o, c));
  std::cout << "ppl=" << fmt(ev.ppl) << '\n' << "mean_ce=" << fmt(ev.mean_ce) << '\n' << "tokens=" << ev.tokens << '\n';
  if (o.out) {
    write_json(require_out(o, "eval") / "eval.json", {{"ppl", ev.ppl}, {"mean_ce", ev.mean_ce}, {"tokens", ev.tokens}});
  }
  return 0;
}

int run_quantize(const Options& o) {
  const auto ckpt = require_checkpoint(o, "quantize");
  const auto out = require_out(o, "quantize");
  const auto c = config_for_checkpoint(o, ckpt);
  if (o.bits != 4 && o.bits != 8) throw ConfigError("--bits must be 4 or 8");
  if (o.group < 1) throw ConfigError("--group must be >= 1");
  if (o.method != "gptq" && o.method != "rtn") throw ConfigError("--method must be gptq or rtn");
  const auto run = load_training_checkpoint(ckpt);
  const auto data = load_data(c);
  QuantizeConfig qc;
  qc.bits = o.bits;
  qc.group_size = o.group;
  qc.method = o.method == "gptq" ? QuantMethod::gptq : QuantMethod::rtn;
  qc.calibration_sequences = o.calibration;
  const auto q = quantize_model(run.model, data, run.train.seq_len, qc);
  const Index windows = eval_windows(o, c);
  const auto fp = held_out_eval(run.model, data, c, run.train.seq_len, windows);
  const auto qev = held_out_eval(apply_quantization(run.model, q), data, c, run.train.seq_len, windows);

  write_json(out / "config.json", to_json(c));
  write_checkpoint(out / "quantized.hltc", make_quantized_checkpoint(run.model, run.train, q));
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : q.report) {
    layers.push_back({{"name", l.name}, {"rtn_loss", l.rtn_loss}, {"gptq_loss", l.gptq_loss}, {"fell_back", l.fell_back}});
  }
  write_json(out / "quant_report.json", {{"bits", qc.bits},
                                         {"group_size", qc.group_size},
                                         {"method", o.method},
                                         {"calibration_sequences", qc.calibration_sequences},
                                         {"fp_ppl", fp.ppl},
                                         {"quant_ppl", qev.ppl},
                                         {"layers", layers}});
  std::cout << "fp_ppl=" << fmt(fp.ppl) << '\n'
            << "int" << qc.bits << "_ppl=" << fmt(qev.ppl) << '\n'
            << "checkpoint=" << (out / "quantized.hltc").string() << '\n';
  return 0;
}

int run_analyze(const Options& o) {
  const auto ckpt = require_checkpoint(o, "analyze");
  const auto out = require_out(o, "analyze");
  const auto c = config_for_checkpoint(o, ckpt);
  const auto run = load_any_checkpoint(ckpt);
  const auto data = load_data(c);
  const AnalysisData ad{data.held_out(), run.train.seq_len, eval_windows(o, c), c.train.batch_size};
  const auto lens = logit_lens(run.model, ad);
  const auto sim = cosine_map(run.model, ad);
  emit_plotdata(lens, out);
  emit_plotdata(sim, out);
  write_json(out / "config.json", to_json(c));
  nlohmann::json summary = {{"arch_kind", to_string(run.model.config.arch_kind)},
                            {"depth", lens.depth()},
                            {"tokens", lens.tokens},
                            {"final_cross_entropy", lens.cross_entropy.back()},
                            {"zero_norm_pairs", sim.zero_norm_pairs},
                            {"cross_loop_similarity", nullptr}};
  if (sim.cross_loop) summary["cross_loop_similarity"] = *sim.cross_loop;
  write_json(out / "analysis.json", summary);
  std::cout << "final_ce=" << fmt(lens.cross_entropy.back()) << '\n'
            << "cross_loop=" << (sim.cross_loop ? fmt(*sim.cross_loop) : std::string("none")) << '\n';
  return 0;
}

nlohmann::json params_json(const ModelConfig& m) {
  const auto p = count_params(m);
  nlohmann::json doc = {{"total", p.total},
                        {"embeddings", p.embeddings},
                        {"token_embedding", p.token_embedding},
                        {"begin", p.begin},
                        {"middle", p.middle},
                        {"end", p.end},
                        {"hyperconn", p.hyperconn},
                        {"hyperconn_norm", p.hyperconn_norm},
                        {"hyperconn_without_norm", p.hyperconn_without_norm()},
                        {"lora", p.lora},
                        {"hc_sites", p.hc_sites},
                        {"unrolled_depth", p.unrolled_depth},
                        {"without_token_embedding", p.without_token_embedding()},
                        {"non_embedding", p.non_embedding()}};
  if (m.has_hyperconn() || m.lora_rank > 0) {
    doc["twin_total"] = count_params(looped_twin(m)).total;
    doc["twin_delta"] = p.total - doc["twin_total"].get<Index>();
  }
  return doc;
}

int run_params(const Options& o) {
  const auto c = load_run_config(o.config, o.sets, o.seed);
  const auto doc = params_json(c.model);
  if (o.json) {
    std::cout << doc.dump() << '\n';
  } else {
    for (const auto& [key, value] : doc.items()) std::cout << key << '=' << value.dump() << '\n';
  }
  if (o.out) write_json(require_out(o, "params") / "params.json", doc);
  return 0;
}

std::string slug(const std::string& label) {
  std::string s;
  for (char ch : label) s += std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' ? ch : '_';
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s;
}

int run_sweep(const Options& o) {
  if (o.axis.empty()) throw ConfigError("sweep: --axis is required");
  const auto out = require_out(o, "sweep");
  const auto base = load_run_config(o.config, o.sets, o.seed);
  const auto variants = sweep_variants(base, o.axis);
  write_json(out / "config.json", to_json(base));
  std::string table = "variant,params,final_loss,ppl\n";
  for (const auto& v : variants) {
    std::cerr << "sweep: " << v.label << '\n';
    const auto dir = out / slug(v.label);
    const auto r = train_into(v.config, dir, std::nullopt);
    const auto run = load_training_checkpoint(r.checkpoint);
    const auto data = load_data(v.config);
    const auto ev = held_out_eval(run.model, data, v.config, v.config.train.seq_len, eval_windows(o, v.config));
    table += v.label + "," + std::to_string(r.params) + "," + fmt(r.last.loss) + "," + fmt(ev.ppl) + "\n";
  }
  const std::string path = (out / "sweep.csv").string();
  write_file(path, {reinterpret_cast<const std::uint8_t*>(table.data()), table.size()});
  std::cout << table;
  return 0;
}

void report_error(const char* kind, const std::string& message) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hyperloop Transformer toolkit", "hlt"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* cmd) {
    cmd->add_option("--config", o.config, "Run config JSON {model, train, data}");
    cmd->add_option("--seed", o.seed, "Seed for model init and data order");
    cmd->add_option("--out", o.out, "Output directory");
    cmd->add_option("--set", o.sets, "Override key=value (dotted, repeatable)");
    cmd->add_option("--windows", o.windows, "Held-out windows to evaluate (0 = all)");
  };
  auto* train = app.add_subcommand("train", "Train a model");
  common(train);
  train->add_option("--resume", o.resume, "Checkpoint to continue from");
  auto* eval = app.add_subcommand("eval", "Held-out perplexity of a checkpoint");
  common(eval);
  eval->add_option("--checkpoint", o.checkpoint)->required();
  auto* quantize = app.add_subcommand("quantize", "Weight-only GPTQ/RTN quantization");
  common(quantize);
  quantize->add_option("--checkpoint", o.checkpoint)->required();
  quantize->add_option("--bits", o.bits, "4 or 8");
  quantize->add_option("--group", o.group, "Group size along input columns");
  quantize->add_option("--method", o.method, "gptq or rtn");
  quantize->add_option("--calibration", o.calibration, "Calibration windows from the training split");
  auto* analyze = app.add_subcommand("analyze", "Logit lens and similarity plot data");
  common(analyze);
  analyze->add_option("--checkpoint", o.checkpoint)->required();
  auto* params = app.add_subcommand("params", "Parameter count breakdown");
  common(params);
  params->add_flag("--json", o.json, "Print one JSON object");
  auto* sweep = app.add_subcommand("sweep", "Train one variant per value of an ablation axis");
  common(sweep);
  sweep->add_option("--axis", o.axis, "loops | streams | hc_placement | hres_mode")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    report_error("usage", e.what());
    return 2;
  }

  try {
    configure_threads();
    if (*train) return run_train(o);
    if (*eval) return run_eval(o);
    if (*quantize) return run_quantize(o);
    if (*analyze) return run_analyze(o);
    if (*params) return run_params(o);
    if (*sweep) return run_sweep(o);
  } catch (const ConfigError& e) {
    report_error("config", e.what());
    return 2;
  } catch (const Error& e) {
    report_error("runtime", e.what());
    return 3;
  } catch (const std::exception& e) {
    report_error("runtime", e.what());
    return 3;
  }
  return 3;
}
