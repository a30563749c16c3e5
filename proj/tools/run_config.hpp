#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperloop/config.hpp"
#include "hyperloop/train.hpp"

namespace hyperloop::cli {

/// Training bytes: a file, or a generated corpus of `synthetic_bytes` bytes.
struct DataSpec {
  std::optional<std::filesystem::path> path;
  Index synthetic_bytes = 1 << 20;
  std::uint64_t synthetic_seed = 0;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataSpec data;
};

nlohmann::json to_json(const RunConfig& config);
/// Missing sections and fields take defaults; unknown fields are a ConfigError.
RunConfig run_config_from_json(const nlohmann::json& doc);

/// Sets the dotted key in `doc` (e.g. "model.loops=4"). The key must already exist;
/// the value is parsed as JSON, falling back to a plain string.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// File (or defaults when empty) -> full document -> overrides -> seed -> validated config.
RunConfig load_run_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides,
                          std::optional<std::uint64_t> seed);

TokenStream load_data(const RunConfig& config);

struct SweepVariant {
  std::string label;
  RunConfig config;
};

/// Axes: loops (2..6), streams ({2,4,6,8,10}), hc_placement (every divisor stride of m*L),
/// hres_mode ({identity, sinkhorn, diagonal}).
std::vector<SweepVariant> sweep_variants(const RunConfig& base, const std::string& axis);

/// Reads HLT_THREADS (positive integer) and applies it; returns the thread count in effect.
int configure_threads();

}  // namespace hyperloop::cli
