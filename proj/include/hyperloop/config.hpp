#pragma once

#include <cstdint>
#include <string>
#include <string_view>

#include <json.hpp>

#include "hyperloop/hyperconn.hpp"
#include "hyperloop/tensor.hpp"

namespace hyperloop {

enum class ArchKind { vanilla, mhc, looped, hyperloop };

std::string_view to_string(ArchKind kind);
ArchKind parse_arch_kind(std::string_view text);

/// Where hyper-connection sites sit over the unrolled middle block.
struct HcPlacement {
  enum class Kind { per_loop, per_layer, every_j_layers };
  Kind kind = Kind::per_loop;
  Index stride = 0;  // only for every_j_layers

  static HcPlacement per_loop() { return {}; }
  static HcPlacement per_layer() { return {Kind::per_layer, 0}; }
  static HcPlacement every(Index j) { return {Kind::every_j_layers, j}; }

  bool operator==(const HcPlacement&) const = default;
};

/// "per_loop", "per_layer" or "every_j_layers(J)".
std::string to_string(const HcPlacement& placement);
HcPlacement parse_hc_placement(std::string_view text);

struct ModelConfig {
  Index vocab_size = 257;
  Index model_dim = 64;
  Index head_count = 16;
  double rope_base = 10000.0;
  double ffn_mult = 2.75;
  Index ffn_multiple_of = 64;
  Index max_seq_len = 512;
  ArchKind arch_kind = ArchKind::hyperloop;
  Index begin_layers = 1;
  Index middle_layers = 2;
  Index loops = 3;
  Index end_layers = 1;
  Index streams = 4;
  HresMode hres_mode = HresMode::diagonal;
  HcPlacement hc_placement;
  Index lora_rank = 0;
  std::uint64_t seed = 0;

  Index ffn_dim() const;
  Index head_dim() const { return model_dim / head_count; }
  /// b + m*L + k
  Index unrolled_depth() const { return begin_layers + middle_layers * loops + end_layers; }
  bool has_hyperconn() const { return arch_kind == ArchKind::mhc || arch_kind == ArchKind::hyperloop; }
  bool shares_middle() const { return arch_kind == ArchKind::looped || arch_kind == ArchKind::hyperloop; }

  bool operator==(const ModelConfig&) const = default;
};

/// Throws ConfigError naming every violated field.
void validate(const ModelConfig& config);

nlohmann::json to_json(const ModelConfig& config);
/// Missing fields keep their defaults; unknown fields are rejected.
ModelConfig model_config_from_json(const nlohmann::json& doc);

/// Vanilla (or mHC when `keep_hyperconn`) model with the same unrolled depth and
/// unshared weights: b' = b, m' = m*L, L' = 1, k' = k.
ModelConfig depth_matched_twin(const ModelConfig& config, bool keep_hyperconn = false);
/// Same block structure with hyper-connections removed.
ModelConfig looped_twin(const ModelConfig& config);

}  // namespace hyperloop
