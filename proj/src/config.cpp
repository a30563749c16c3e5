#include "hyperloop/config.hpp"

#include <algorithm>
#include <charconv>
#include <vector>

#include "hyperloop/error.hpp"
#include "hyperloop/nn.hpp"

namespace hyperloop {

std::string_view to_string(ArchKind kind) {
  switch (kind) {
    case ArchKind::vanilla: return "vanilla";
    case ArchKind::mhc: return "mhc";
    case ArchKind::looped: return "looped";
    case ArchKind::hyperloop: return "hyperloop";
  }
  return "?";
}

ArchKind parse_arch_kind(std::string_view text) {
  if (text == "vanilla") return ArchKind::vanilla;
  if (text == "mhc") return ArchKind::mhc;
  if (text == "looped") return ArchKind::looped;
  if (text == "hyperloop") return ArchKind::hyperloop;
  throw ConfigError("arch_kind: unknown value '" + std::string(text) + "' (expected vanilla|mhc|looped|hyperloop)");
}

std::string to_string(const HcPlacement& placement) {
  switch (placement.kind) {
    case HcPlacement::Kind::per_loop: return "per_loop";
    case HcPlacement::Kind::per_layer: return "per_layer";
    case HcPlacement::Kind::every_j_layers: return "every_j_layers(" + std::to_string(placement.stride) + ")";
  }
  return "?";
}

HcPlacement parse_hc_placement(std::string_view text) {
  if (text == "per_loop") return HcPlacement::per_loop();
  if (text == "per_layer") return HcPlacement::per_layer();
  constexpr std::string_view head = "every_j_layers(";
  if (text.starts_with(head) && text.ends_with(")")) {
    const auto digits = text.substr(head.size(), text.size() - head.size() - 1);
    Index j = 0;
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), j);
    if (ec == std::errc() && ptr == digits.data() + digits.size() && j >= 1) return HcPlacement::every(j);
  }
  throw ConfigError("hc_placement: unknown value '" + std::string(text) +
                    "' (expected per_loop|per_layer|every_j_layers(J))");
}

Index ModelConfig::ffn_dim() const { return hyperloop::ffn_dim(model_dim, ffn_mult, ffn_multiple_of); }

void validate(const ModelConfig& c) {
  std::vector<std::string> bad;
  auto need = [&](bool ok, std::string msg) {
    if (!ok) bad.push_back(std::move(msg));
  };
  need(c.vocab_size >= 2, "vocab_size must be >= 2");
  need(c.model_dim >= 2, "model_dim must be >= 2");
  need(c.head_count >= 1, "head_count must be >= 1");
  if (c.head_count >= 1 && c.model_dim >= 1) {
    need(c.model_dim % c.head_count == 0, "model_dim must be divisible by head_count");
    need(c.model_dim % c.head_count != 0 || c.head_dim() % 2 == 0, "head_dim (model_dim/head_count) must be even");
  }
  need(c.rope_base > 1.0, "rope_base must be > 1");
  need(c.ffn_mult > 0.0, "ffn_mult must be > 0");
  need(c.ffn_multiple_of >= 1, "ffn_multiple_of must be >= 1");
  need(c.max_seq_len >= 1, "max_seq_len must be >= 1");
  need(c.begin_layers >= 0, "begin_layers must be >= 0");
  need(c.middle_layers >= 1, "middle_layers must be >= 1");
  need(c.end_layers >= 0, "end_layers must be >= 0");
  need(c.loops >= 1, "loops must be >= 1");
  need(c.streams >= 1, "streams must be >= 1");
  need(c.lora_rank >= 0, "lora_rank must be >= 0");

  switch (c.arch_kind) {
    case ArchKind::vanilla:
    case ArchKind::mhc:
      need(c.loops == 1, "loops must be 1 for " + std::string(to_string(c.arch_kind)) + " (weights are unshared)");
      break;
    case ArchKind::looped:
    case ArchKind::hyperloop:
      break;
  }
  if (!c.has_hyperconn()) need(c.streams == 1, "streams must be 1 without hyper-connections");
  if (c.arch_kind == ArchKind::mhc) need(c.hres_mode == HresMode::sinkhorn, "hres_mode must be sinkhorn for mhc");
  if (c.arch_kind != ArchKind::hyperloop) {
    need(c.hc_placement == HcPlacement::per_loop(), "hc_placement applies to hyperloop only");
  }
  if (c.hc_placement.kind == HcPlacement::Kind::every_j_layers) {
    need(c.hc_placement.stride >= 1, "hc_placement stride must be >= 1");
  }
  if (c.lora_rank > 0) {
    need(c.arch_kind == ArchKind::looped, "lora_rank requires arch_kind looped");
  }
  if (!bad.empty()) {
    std::string msg = "invalid model config: ";
    for (std::size_t i = 0; i < bad.size(); ++i) msg += (i ? "; " : "") + bad[i];
    throw ConfigError(msg);
  }
}

nlohmann::json to_json(const ModelConfig& c) {
  return {
      {"vocab_size", c.vocab_size},
      {"model_dim", c.model_dim},
      {"head_count", c.head_count},
      {"rope_base", c.rope_base},
      {"ffn_mult", c.ffn_mult},
      {"ffn_multiple_of", c.ffn_multiple_of},
      {"max_seq_len", c.max_seq_len},
      {"arch_kind", to_string(c.arch_kind)},
      {"begin_layers", c.begin_layers},
      {"middle_layers", c.middle_layers},
      {"loops", c.loops},
      {"end_layers", c.end_layers},
      {"streams", c.streams},
      {"hres_mode", to_string(c.hres_mode)},
      {"hc_placement", to_string(c.hc_placement)},
      {"lora_rank", c.lora_rank},
      {"seed", c.seed},
  };
}

namespace {

template <typename V>
void read_field(const nlohmann::json& doc, const char* key, V& out) {
  const auto it = doc.find(key);
  if (it == doc.end()) return;
  try {
    out = it->get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string(key) + ": wrong type (" + it->type_name() + ")");
  }
}

}  // namespace

ModelConfig model_config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("model config: expected an object");
  static const std::vector<std::string> known{
      "vocab_size", "model_dim", "head_count", "rope_base", "ffn_mult",  "ffn_multiple_of",
      "max_seq_len", "arch_kind", "begin_layers", "middle_layers", "loops", "end_layers",
      "streams",     "hres_mode", "hc_placement", "lora_rank",    "seed"};
  for (const auto& [key, _] : doc.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("model config: unknown field '" + key + "'");
    }
  }
  ModelConfig c;
  read_field(doc, "vocab_size", c.vocab_size);
  read_field(doc, "model_dim", c.model_dim);
  read_field(doc, "head_count", c.head_count);
  read_field(doc, "rope_base", c.rope_base);
  read_field(doc, "ffn_mult", c.ffn_mult);
  read_field(doc, "ffn_multiple_of", c.ffn_multiple_of);
  read_field(doc, "max_seq_len", c.max_seq_len);
  read_field(doc, "begin_layers", c.begin_layers);
  read_field(doc, "middle_layers", c.middle_layers);
  read_field(doc, "loops", c.loops);
  read_field(doc, "end_layers", c.end_layers);
  read_field(doc, "streams", c.streams);
  read_field(doc, "lora_rank", c.lora_rank);
  read_field(doc, "seed", c.seed);
  std::string text;
  if (doc.contains("arch_kind")) {
    read_field(doc, "arch_kind", text);
    c.arch_kind = parse_arch_kind(text);
  }
  if (doc.contains("hres_mode")) {
    read_field(doc, "hres_mode", text);
    c.hres_mode = parse_hres_mode(text);
  }
  if (doc.contains("hc_placement")) {
    read_field(doc, "hc_placement", text);
    c.hc_placement = parse_hc_placement(text);
  }
  return c;
}

ModelConfig depth_matched_twin(const ModelConfig& config, bool keep_hyperconn) {
  ModelConfig twin = config;
  twin.middle_layers = config.middle_layers * config.loops;
  twin.loops = 1;
  twin.lora_rank = 0;
  twin.hc_placement = HcPlacement::per_loop();
  if (keep_hyperconn) {
    twin.arch_kind = ArchKind::mhc;
    twin.hres_mode = HresMode::sinkhorn;
  } else {
    twin.arch_kind = ArchKind::vanilla;
    twin.streams = 1;
  }
  return twin;
}

ModelConfig looped_twin(const ModelConfig& config) {
  ModelConfig twin = config;
  twin.arch_kind = ArchKind::looped;
  twin.streams = 1;
  twin.hc_placement = HcPlacement::per_loop();
  return twin;
}

}  // namespace hyperloop
