#include "run_config.hpp"

#include <cstdlib>
#include <fstream>

#include <Eigen/Core>

#include "hyperloop/error.hpp"

namespace hyperloop::cli {

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json data;
  if (c.data.path) {
    data["path"] = c.data.path->string();
  } else {
    data["synthetic_bytes"] = c.data.synthetic_bytes;
    data["synthetic_seed"] = c.data.synthetic_seed;
  }
  return {{"model", hyperloop::to_json(c.model)}, {"train", hyperloop::to_json(c.train)}, {"data", data}};
}

RunConfig run_config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("run config must be a JSON object");
  for (const auto& [key, _] : doc.items()) {
    if (key != "model" && key != "train" && key != "data") throw ConfigError("unknown run config section '" + key + "'");
  }
  RunConfig c;
  c.model = model_config_from_json(doc.value("model", nlohmann::json::object()));
  c.train = train_config_from_json(doc.value("train", nlohmann::json::object()));
  const auto data = doc.value("data", nlohmann::json::object());
  if (!data.is_object()) throw ConfigError("data must be an object");
  try {
    for (const auto& [key, value] : data.items()) {
      if (key == "path") {
        c.data.path = value.get<std::string>();
      } else if (key == "synthetic_bytes") {
        c.data.synthetic_bytes = value.get<Index>();
      } else if (key == "synthetic_seed") {
        c.data.synthetic_seed = value.get<std::uint64_t>();
      } else {
        throw ConfigError("unknown data field '" + key + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("data: ") + e.what());
  }
  if (c.data.path && data.contains("synthetic_bytes")) {
    throw ConfigError("data: give either path or synthetic_bytes, not both");
  }
  if (!c.data.path && c.data.synthetic_bytes < 1) throw ConfigError("data.synthetic_bytes must be >= 1");
  return c;
}

void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("override key '" + key + "' does not exist");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("override key '" + key + "' names a section, not a field");
  auto value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = value;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed) {
  nlohmann::json doc = nlohmann::json::object();
  if (path) {
    std::ifstream in(*path);
    if (!in) throw ConfigError("cannot read config " + path->string());
    doc = nlohmann::json::parse(in, nullptr, false);
    if (doc.is_discarded()) throw ConfigError("config " + path->string() + " is not valid JSON");
  }
  // Normalize to the full document so overrides can address defaulted fields.
  auto full = to_json(run_config_from_json(doc));
  for (const auto& o : overrides) apply_override(full, o);
  if (seed) {
    full["model"]["seed"] = *seed;
    full["train"]["seed"] = *seed;
  }
  auto config = run_config_from_json(full);
  validate(config.model);
  validate(config.train);
  return config;
}

TokenStream load_data(const RunConfig& c) {
  if (c.data.path) return TokenStream::from_file(*c.data.path, c.train.held_out_fraction);
  return TokenStream(generate_corpus(static_cast<std::size_t>(c.data.synthetic_bytes), c.data.synthetic_seed),
                     c.train.held_out_fraction);
}

std::vector<SweepVariant> sweep_variants(const RunConfig& base, const std::string& axis) {
  std::vector<SweepVariant> out;
  auto add = [&](std::string label, RunConfig c) {
    validate(c.model);
    out.push_back({std::move(label), std::move(c)});
  };
  if (axis == "loops") {
    if (base.model.arch_kind != ArchKind::looped && base.model.arch_kind != ArchKind::hyperloop) {
      throw ConfigError("sweep axis loops needs a looped or hyperloop base config");
    }
    for (Index l = 2; l <= 6; ++l) {
      auto c = base;
      c.model.loops = l;
      add("loops=" + std::to_string(l), c);
    }
  } else if (axis == "streams") {
    if (!base.model.has_hyperconn()) throw ConfigError("sweep axis streams needs an mhc or hyperloop base config");
    for (Index n : {2, 4, 6, 8, 10}) {
      auto c = base;
      c.model.streams = n;
      add("streams=" + std::to_string(n), c);
    }
  } else if (axis == "hc_placement") {
    if (base.model.arch_kind != ArchKind::hyperloop) throw ConfigError("sweep axis hc_placement needs a hyperloop base");
    const Index span = base.model.middle_layers * base.model.loops;
    for (Index j = 1; j <= span; ++j) {
      if (span % j != 0) continue;
      auto c = base;
      if (j == 1) {
        c.model.hc_placement = HcPlacement::per_layer();
      } else if (j == base.model.middle_layers) {
        c.model.hc_placement = HcPlacement::per_loop();
      } else {
        c.model.hc_placement = HcPlacement::every(j);
      }
      add("hc_placement=" + to_string(c.model.hc_placement), c);
    }
  } else if (axis == "hres_mode") {
    if (base.model.arch_kind != ArchKind::hyperloop) throw ConfigError("sweep axis hres_mode needs a hyperloop base");
    for (auto mode : {HresMode::identity, HresMode::sinkhorn, HresMode::diagonal}) {
      auto c = base;
      c.model.hres_mode = mode;
      add("hres_mode=" + std::string(to_string(mode)), c);
    }
  } else {
    throw ConfigError("unknown sweep axis '" + axis + "' (expected loops|streams|hc_placement|hres_mode)");
  }
  return out;
}

int configure_threads() {
  int threads = 1;
  if (const char* env = std::getenv("HLT_THREADS"); env && *env) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (*end != '\0' || v < 1 || v > 1024) {
      throw ConfigError("HLT_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    threads = static_cast<int>(v);
  }
  Eigen::setNbThreads(threads);
  return threads;
}

}  // namespace hyperloop::cli
