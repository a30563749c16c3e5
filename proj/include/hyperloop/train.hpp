#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hyperloop/checkpoint.hpp"
#include "hyperloop/model.hpp"

namespace hyperloop {

struct TrainConfig {
  Index batch_size = 8;
  Index seq_len = 64;
  double max_lr = 1e-3;
  double min_lr = 1e-4;
  Index warmup_steps = 50;
  Index total_steps = 500;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double clip_norm = 1.0;
  Index eval_every = 100;
  Index eval_windows = 64;  // held-out windows scored at each eval; 0 = all
  double held_out_fraction = 0.05;
  std::uint64_t seed = 0;

  bool operator==(const TrainConfig&) const = default;
};

void validate(const TrainConfig& config);
nlohmann::json to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& doc);

// ---- data ----

inline constexpr std::int32_t kBosToken = 256;
inline constexpr Index kByteVocab = 257;

/// Byte corpus split into a training prefix and a held-out suffix.
class TokenStream {
 public:
  TokenStream(std::vector<std::uint8_t> bytes, double held_out_fraction);
  static TokenStream from_file(const std::filesystem::path& path, double held_out_fraction);

  std::span<const std::uint8_t> train() const;
  std::span<const std::uint8_t> held_out() const;
  std::size_t split() const { return split_; }

 private:
  std::vector<std::uint8_t> bytes_;
  std::size_t split_ = 0;
};

/// Inputs are BOS followed by the first T-1 bytes of a window; targets are the T window bytes.
struct Batch {
  std::vector<std::int32_t> inputs;
  std::vector<std::int32_t> targets;
  Shape shape;  // [B, T]
};

/// Number of non-overlapping length-T windows in `bytes`.
Index window_count(std::span<const std::uint8_t> bytes, Index seq_len);
Batch make_batch(std::span<const std::uint8_t> bytes, std::span<const Index> windows, Index seq_len);

/// Fixed seed-derived permutation of training windows; step s uses entries s*B .. s*B+B-1 (mod N).
class BatchSchedule {
 public:
  BatchSchedule(Index windows, Index batch_size, std::uint64_t seed);
  std::vector<Index> windows_for_step(Index step) const;
  Index size() const { return static_cast<Index>(order_.size()); }

 private:
  std::vector<Index> order_;
  Index batch_ = 1;
};

/// Deterministic pseudo-English text of exactly `bytes` bytes.
std::vector<std::uint8_t> generate_corpus(std::size_t bytes, std::uint64_t seed);

// ---- optimization ----

/// Linear warmup to max_lr, then cosine decay to min_lr at total_steps.
double lr_at(Index step, const TrainConfig& config);

using NamedParams = std::vector<std::pair<std::string, Tensorf>>;

double global_grad_norm(const NamedParams& params);
/// Scales all gradients by clip/norm when norm > clip; returns the pre-clip norm.
double clip_grad_norm(const NamedParams& params, double clip);

struct AdamState {
  Index step = 0;  // completed updates
  std::vector<std::vector<float>> m, v;
};

/// One decoupled AdamW update with learning rate `lr`. Throws NumericError naming
/// the first parameter whose gradient is not finite.
void adamw_step(const NamedParams& params, AdamState& state, double lr, const TrainConfig& config);

// ---- loop ----

struct StepRecord {
  Index step = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;
  Index tokens_seen = 0;
};

nlohmann::json to_json(const StepRecord& r);

struct TrainState {
  Index step = 0;
  AdamState adam;
};

struct TrainOptions {
  /// Stop before this step (exclusive); negative runs to total_steps.
  Index stop_at_step = -1;
  /// When set, metrics.jsonl, eval.jsonl and checkpoint.hltc are written here.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const StepRecord&)> on_step;
};

std::vector<StepRecord> train_loop(Model<float>& model, TrainState& state, const TokenStream& data,
                                   const TrainConfig& config, const TrainOptions& options = {});

struct EvalResult {
  double mean_ce = 0;
  double ppl = 0;
  Index tokens = 0;
};

/// exp of the mean token cross-entropy over non-overlapping held-out windows.
template <typename T>
EvalResult evaluate_ppl(const Model<T>& model, std::span<const std::uint8_t> held_out, Index seq_len,
                        Index max_windows = 0, Index batch_size = 8);

// ---- persistence ----

Checkpoint make_checkpoint(const Model<float>& model, const TrainConfig& train, const TrainState& state);
void save_training_checkpoint(const std::filesystem::path& path, const Model<float>& model, const TrainConfig& train,
                              const TrainState& state);

struct LoadedRun {
  Model<float> model;
  TrainConfig train;
  TrainState state;
};

/// Loads a float32 training checkpoint. Optimizer moments are restored when present.
LoadedRun load_training_checkpoint(const std::filesystem::path& path);
LoadedRun load_training_checkpoint(const Checkpoint& ckpt);

}  // namespace hyperloop
