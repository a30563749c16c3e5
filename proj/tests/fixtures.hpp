#pragma once

// Toy models and weight-copying helpers shared by the unit and acceptance suites.

#include <map>
#include <string>
#include <vector>

#include "hyperloop/model.hpp"
#include "hyperloop/rng.hpp"

namespace hyperloop::testing {

inline ModelConfig tiny_config(ArchKind kind, Index dim = 16, Index streams = 2) {
  ModelConfig c;
  c.vocab_size = 13;
  c.model_dim = dim;
  c.head_count = 2;
  c.ffn_multiple_of = 8;
  c.max_seq_len = 64;
  c.arch_kind = kind;
  c.begin_layers = 1;
  c.middle_layers = 2;
  c.loops = kind == ArchKind::looped || kind == ArchKind::hyperloop ? 2 : 1;
  c.end_layers = 1;
  c.streams = kind == ArchKind::mhc || kind == ArchKind::hyperloop ? streams : 1;
  c.hres_mode = kind == ArchKind::mhc ? HresMode::sinkhorn : HresMode::diagonal;
  c.seed = 5;
  return c;
}

inline std::vector<std::int32_t> random_tokens(Index count, Index vocab, std::uint64_t seed) {
  CounterRng rng(CounterRng::mix(seed));
  std::vector<std::int32_t> out(static_cast<std::size_t>(count));
  for (auto& t : out) t = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab)));
  return out;
}

/// Copies values from `src` into `dst` for every name in `rename` (dst name -> src name),
/// or for every shared name when `rename` is empty.
template <typename T>
void copy_weights(const Model<T>& src, Model<T>& dst, const std::map<std::string, std::string>& rename = {}) {
  std::map<std::string, Tensor<T>> from;
  for (auto& [name, t] : src.named_parameters()) from.emplace(name, t);
  for (auto& [name, t] : dst.named_parameters()) {
    std::string key = name;
    if (!rename.empty()) {
      auto it = rename.find(name);
      if (it == rename.end()) continue;
      key = it->second;
    }
    auto it = from.find(key);
    if (it == from.end()) continue;
    auto d = t.data_mut();
    std::copy(it->second.data().begin(), it->second.data().end(), d.begin());
  }
}

/// Moves every hyper-connection parameter off its initial value so that no map is trivial.
template <typename T>
void randomize_hyperconn(Model<T>& model, double scale, std::uint64_t seed) {
  for (auto& [name, t] : model.named_parameters()) {
    if (group_of(name) != ParamGroup::hyperconn) continue;
    auto rng = CounterRng::stream(seed, name);
    for (auto& v : t.data_mut()) v += static_cast<T>(scale * rng.normal());
  }
}

/// Scales every block weight so the layers do visible work at tiny widths.
template <typename T>
void amplify_blocks(Model<T>& model, T factor) {
  for (auto& [name, t] : model.named_parameters()) {
    const auto g = group_of(name);
    if ((g == ParamGroup::begin || g == ParamGroup::middle || g == ParamGroup::end) && decays(name)) {
      for (auto& v : t.data_mut()) v *= factor;
    }
  }
}

}  // namespace hyperloop::testing
