#include "hyperloop/train.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

#include "hyperloop/error.hpp"
#include "hyperloop/ops.hpp"
#include "hyperloop/rng.hpp"

namespace hyperloop {

void validate(const TrainConfig& c) {
  std::vector<std::string> bad;
  auto need = [&](bool ok, const char* msg) {
    if (!ok) bad.emplace_back(msg);
  };
  need(c.batch_size >= 1, "batch_size must be >= 1");
  need(c.seq_len >= 1, "seq_len must be >= 1");
  need(c.total_steps >= 1, "total_steps must be >= 1");
  need(c.warmup_steps >= 0 && c.warmup_steps < c.total_steps, "warmup_steps must be in [0, total_steps)");
  need(c.max_lr > 0.0, "max_lr must be > 0");
  need(c.min_lr >= 0.0 && c.min_lr <= c.max_lr, "min_lr must be in [0, max_lr]");
  need(c.beta1 >= 0.0 && c.beta1 < 1.0, "beta1 must be in [0, 1)");
  need(c.beta2 >= 0.0 && c.beta2 < 1.0, "beta2 must be in [0, 1)");
  need(c.adam_eps > 0.0, "adam_eps must be > 0");
  need(c.weight_decay >= 0.0, "weight_decay must be >= 0");
  need(c.clip_norm > 0.0, "clip_norm must be > 0");
  need(c.eval_every >= 0, "eval_every must be >= 0");
  need(c.eval_windows >= 0, "eval_windows must be >= 0");
  need(c.held_out_fraction > 0.0 && c.held_out_fraction < 1.0, "held_out_fraction must be in (0, 1)");
  if (!bad.empty()) {
    std::string msg = "invalid train config: ";
    for (std::size_t i = 0; i < bad.size(); ++i) msg += (i ? "; " : "") + bad[i];
    throw ConfigError(msg);
  }
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"batch_size", c.batch_size},
          {"seq_len", c.seq_len},
          {"max_lr", c.max_lr},
          {"min_lr", c.min_lr},
          {"warmup_steps", c.warmup_steps},
          {"total_steps", c.total_steps},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"eval_every", c.eval_every},
          {"eval_windows", c.eval_windows},
          {"held_out_fraction", c.held_out_fraction},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("train config: expected an object");
  TrainConfig c;
  const auto known = to_json(c);
  for (const auto& [key, _] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("train config: unknown field '" + key + "'");
  }
  auto read = [&](const char* key, auto& out) {
    const auto it = doc.find(key);
    if (it == doc.end()) return;
    try {
      out = it->get<std::remove_reference_t<decltype(out)>>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(std::string(key) + ": wrong type (" + it->type_name() + ")");
    }
  };
  read("batch_size", c.batch_size);
  read("seq_len", c.seq_len);
  read("max_lr", c.max_lr);
  read("min_lr", c.min_lr);
  read("warmup_steps", c.warmup_steps);
  read("total_steps", c.total_steps);
  read("beta1", c.beta1);
  read("beta2", c.beta2);
  read("adam_eps", c.adam_eps);
  read("weight_decay", c.weight_decay);
  read("clip_norm", c.clip_norm);
  read("eval_every", c.eval_every);
  read("eval_windows", c.eval_windows);
  read("held_out_fraction", c.held_out_fraction);
  read("seed", c.seed);
  return c;
}

TokenStream::TokenStream(std::vector<std::uint8_t> bytes, double held_out_fraction) : bytes_(std::move(bytes)) {
  if (!(held_out_fraction > 0.0 && held_out_fraction < 1.0)) {
    throw ConfigError("held_out_fraction must be in (0, 1)");
  }
  const auto held = static_cast<std::size_t>(std::ceil(held_out_fraction * static_cast<double>(bytes_.size())));
  split_ = bytes_.size() - std::min(held, bytes_.size());
}

TokenStream TokenStream::from_file(const std::filesystem::path& path, double held_out_fraction) {
  return TokenStream(read_file(path), held_out_fraction);
}

std::span<const std::uint8_t> TokenStream::train() const { return {bytes_.data(), split_}; }
std::span<const std::uint8_t> TokenStream::held_out() const {
  return {bytes_.data() + split_, bytes_.size() - split_};
}

Index window_count(std::span<const std::uint8_t> bytes, Index seq_len) {
  return static_cast<Index>(bytes.size()) / seq_len;
}

Batch make_batch(std::span<const std::uint8_t> bytes, std::span<const Index> windows, Index seq_len) {
  Batch b;
  b.shape = {static_cast<Index>(windows.size()), seq_len};
  b.inputs.reserve(windows.size() * static_cast<std::size_t>(seq_len));
  b.targets.reserve(b.inputs.capacity());
  for (Index w : windows) {
    const auto start = static_cast<std::size_t>(w * seq_len);
    if (start + static_cast<std::size_t>(seq_len) > bytes.size()) {
      throw ContractError("make_batch: window " + std::to_string(w) + " runs past the data");
    }
    b.inputs.push_back(kBosToken);
    for (Index j = 0; j < seq_len; ++j) {
      const std::int32_t byte = bytes[start + static_cast<std::size_t>(j)];
      if (j + 1 < seq_len) b.inputs.push_back(byte);
      b.targets.push_back(byte);
    }
  }
  return b;
}

BatchSchedule::BatchSchedule(Index windows, Index batch_size, std::uint64_t seed) : batch_(batch_size) {
  if (windows < 1) throw InputError("training data holds no complete window");
  order_.resize(static_cast<std::size_t>(windows));
  for (Index i = 0; i < windows; ++i) order_[static_cast<std::size_t>(i)] = i;
  auto rng = CounterRng::stream(seed, "data.order");
  for (std::size_t i = order_.size(); i > 1; --i) {
    std::swap(order_[i - 1], order_[rng.below(i)]);
  }
}

std::vector<Index> BatchSchedule::windows_for_step(Index step) const {
  std::vector<Index> out(static_cast<std::size_t>(batch_));
  const auto n = static_cast<Index>(order_.size());
  for (Index i = 0; i < batch_; ++i) out[static_cast<std::size_t>(i)] = order_[static_cast<std::size_t>((step * batch_ + i) % n)];
  return out;
}

std::vector<std::uint8_t> generate_corpus(std::size_t bytes, std::uint64_t seed) {
  static const std::vector<std::string> nouns{
      "river", "garden", "teacher", "window", "market", "engine", "letter", "forest", "city",  "child",
      "doctor", "bridge", "house",  "song",   "storm",  "table",  "road",   "village", "ship", "farmer",
      "machine", "island", "school", "friend", "mountain", "lamp", "book",  "kitchen", "horse", "painter"};
  static const std::vector<std::string> verbs{"sees", "builds", "finds", "carries", "opens", "follows", "remembers",
                                              "paints", "crosses", "watches", "repairs", "sells", "reads", "hears"};
  static const std::vector<std::string> adjectives{"old", "quiet", "bright", "small", "heavy", "green",
                                                   "careful", "distant", "warm", "broken", "early", "tall"};
  static const std::vector<std::string> adverbs{"slowly", "again", "today", "at night", "in the rain",
                                                "before dawn", "with care", "every morning"};
  static const std::vector<std::string> links{"and then", "because", "while", "so", "but"};
  auto rng = CounterRng::stream(seed, "corpus");
  // Zipf-like preference for the first entries of each list.
  auto pick = [&](const std::vector<std::string>& words) -> const std::string& {
    const double u = rng.uniform();
    const auto i = static_cast<std::size_t>(std::floor(std::pow(u, 2.0) * static_cast<double>(words.size())));
    return words[std::min(i, words.size() - 1)];
  };
  auto phrase = [&](std::string& out, bool capital) {
    std::string np = "the ";
    if (rng.uniform() < 0.5) np += pick(adjectives) + " ";
    np += pick(nouns);
    if (capital) np[0] = 'T';
    out += np + " " + pick(verbs) + " the ";
    if (rng.uniform() < 0.3) out += pick(adjectives) + " ";
    out += pick(nouns);
    if (rng.uniform() < 0.4) out += " " + pick(adverbs);
  };
  std::string text;
  text.reserve(bytes + 256);
  while (text.size() < bytes) {
    phrase(text, true);
    if (rng.uniform() < 0.35) {
      text += ", " + pick(links) + " ";
      phrase(text, false);
    }
    text += rng.uniform() < 0.15 ? ".\n" : ". ";
  }
  text.resize(bytes);
  return {text.begin(), text.end()};
}

double lr_at(Index step, const TrainConfig& c) {
  step = std::clamp<Index>(step, 0, c.total_steps);
  if (c.warmup_steps > 0 && step <= c.warmup_steps) {
    return c.max_lr * static_cast<double>(step) / static_cast<double>(c.warmup_steps);
  }
  const double progress =
      static_cast<double>(step - c.warmup_steps) / static_cast<double>(c.total_steps - c.warmup_steps);
  return c.min_lr + 0.5 * (c.max_lr - c.min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

double global_grad_norm(const NamedParams& params) {
  double ss = 0.0;
  for (const auto& [_, t] : params) {
    for (float g : t.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(ss);
}

double clip_grad_norm(const NamedParams& params, double clip) {
  const double norm = global_grad_norm(params);
  if (std::isfinite(norm) && norm > clip) {
    const double s = clip / norm;
    for (const auto& [_, t] : params) {
      if (!t.has_grad()) continue;
      auto& g = t.impl()->grad;
      for (auto& v : g) v = static_cast<float>(static_cast<double>(v) * s);
    }
  }
  return norm;
}

void adamw_step(const NamedParams& params, AdamState& state, double lr, const TrainConfig& c) {
  if (state.m.empty()) {
    for (const auto& [_, t] : params) {
      state.m.emplace_back(static_cast<std::size_t>(t.numel()), 0.0f);
      state.v.emplace_back(static_cast<std::size_t>(t.numel()), 0.0f);
    }
  }
  if (state.m.size() != params.size()) throw StateError("adamw_step: optimizer state does not match parameters");
  for (const auto& [name, t] : params) {
    for (float g : t.grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + name);
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& [name, t] = params[p];
    auto w = t.impl()->data.data();
    const auto g = t.grad();
    auto& m = state.m[p];
    auto& v = state.v[p];
    const double decay = decays(name) ? lr * c.weight_decay : 0.0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
      double wi = static_cast<double>(w[i]) * (1.0 - decay);
      const double mi = c.beta1 * static_cast<double>(m[i]) + (1.0 - c.beta1) * gi;
      const double vi = c.beta2 * static_cast<double>(v[i]) + (1.0 - c.beta2) * gi * gi;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      wi -= lr * (mi / bc1) / (std::sqrt(vi / bc2) + c.adam_eps);
      w[i] = static_cast<float>(wi);
    }
  }
}

nlohmann::json to_json(const StepRecord& r) {
  return {{"step", r.step}, {"loss", r.loss}, {"lr", r.lr}, {"grad_norm", r.grad_norm}, {"tokens_seen", r.tokens_seen}};
}

template <typename T>
EvalResult evaluate_ppl(const Model<T>& model, std::span<const std::uint8_t> held_out, Index seq_len,
                        Index max_windows, Index batch_size) {
  Index windows = window_count(held_out, seq_len);
  if (max_windows > 0) windows = std::min(windows, max_windows);
  if (windows < 1) throw InputError("held-out data holds no complete window of " + std::to_string(seq_len) + " bytes");
  NoGradGuard no_grad;
  double total = 0.0;
  for (Index start = 0; start < windows; start += batch_size) {
    std::vector<Index> ids;
    for (Index w = start; w < std::min(windows, start + batch_size); ++w) ids.push_back(w);
    const auto batch = make_batch(held_out, ids, seq_len);
    const auto loss = lm_loss(model, batch.inputs, batch.targets, batch.shape);
    total += static_cast<double>(loss.item()) * static_cast<double>(batch.targets.size());
  }
  EvalResult r;
  r.tokens = windows * seq_len;
  r.mean_ce = total / static_cast<double>(r.tokens);
  r.ppl = std::exp(r.mean_ce);
  return r;
}

Checkpoint make_checkpoint(const Model<float>& model, const TrainConfig& train, const TrainState& state) {
  Checkpoint ckpt;
  const auto params = model.named_parameters();
  const auto rng = CounterRng::stream(train.seed, "data.order");
  ckpt.document = {{"model", to_json(model.config)},
                   {"train", to_json(train)},
                   {"state", {{"step", state.step}, {"adam_step", state.adam.step},
                              {"rng", {{"stream", "data.order"}, {"key", rng.key()}, {"counter", rng.counter()}}}}}};
  for (const auto& [name, t] : params) ckpt.tensors.push_back(float_record(name, t.shape(), t.data()));
  if (!state.adam.m.empty()) {
    for (std::size_t p = 0; p < params.size(); ++p) {
      ckpt.optimizer.push_back(float_record("adam.m." + params[p].first, params[p].second.shape(), state.adam.m[p]));
    }
    for (std::size_t p = 0; p < params.size(); ++p) {
      ckpt.optimizer.push_back(float_record("adam.v." + params[p].first, params[p].second.shape(), state.adam.v[p]));
    }
  }
  return ckpt;
}

void save_training_checkpoint(const std::filesystem::path& path, const Model<float>& model, const TrainConfig& train,
                              const TrainState& state) {
  write_checkpoint(path, make_checkpoint(model, train, state));
}

LoadedRun load_training_checkpoint(const Checkpoint& ckpt) {
  const auto& doc = ckpt.document;
  if (!doc.contains("model")) throw IoError("checkpoint: missing model config");
  LoadedRun run{build_model<float>(model_config_from_json(doc.at("model"))), {}, {}};
  if (doc.contains("train")) run.train = train_config_from_json(doc.at("train"));
  if (doc.contains("state")) {
    run.state.step = doc.at("state").value("step", Index{0});
    run.state.adam.step = doc.at("state").value("adam_step", Index{0});
  }
  const auto params = run.model.named_parameters();
  for (const auto& [name, t] : params) {
    const auto* rec = ckpt.find(name);
    if (!rec) throw IoError("checkpoint: missing tensor " + name);
    if (rec->shape != t.shape()) {
      throw IoError("checkpoint: tensor " + name + " has shape " + to_string(rec->shape) + ", model expects " +
                    to_string(t.shape()));
    }
    const auto values = float_values(*rec);
    std::copy(values.begin(), values.end(), t.impl()->data.begin());
  }
  if (ckpt.tensors.size() != params.size()) throw IoError("checkpoint: unexpected extra tensors");
  if (!ckpt.optimizer.empty()) {
    std::map<std::string, const TensorRecord*> opt;
    for (const auto& r : ckpt.optimizer) opt.emplace(r.name, &r);
    for (const char* kind : {"adam.m.", "adam.v."}) {
      auto& dst = std::string_view(kind) == "adam.m." ? run.state.adam.m : run.state.adam.v;
      for (const auto& [name, t] : params) {
        const auto it = opt.find(kind + name);
        if (it == opt.end()) throw IoError("checkpoint: missing optimizer tensor " + std::string(kind) + name);
        dst.push_back(float_values(*it->second));
        if (static_cast<Index>(dst.back().size()) != t.numel()) throw IoError("checkpoint: bad size for " + it->first);
      }
    }
  }
  return run;
}

LoadedRun load_training_checkpoint(const std::filesystem::path& path) {
  return load_training_checkpoint(read_checkpoint(path));
}

namespace {

void append_line(const std::filesystem::path& path, const nlohmann::json& record) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw IoError("cannot write " + path.string());
  out << record.dump() << '\n';
}

}  // namespace

std::vector<StepRecord> train_loop(Model<float>& model, TrainState& state, const TokenStream& data,
                                   const TrainConfig& config, const TrainOptions& options) {
  validate(config);
  if (config.seq_len > model.config.max_seq_len) {
    throw ConfigError("seq_len " + std::to_string(config.seq_len) + " exceeds max_seq_len " +
                      std::to_string(model.config.max_seq_len));
  }
  if (model.config.vocab_size < kByteVocab) {
    throw ConfigError("vocab_size must be >= " + std::to_string(kByteVocab) + " for byte-level data");
  }
  const BatchSchedule schedule(window_count(data.train(), config.seq_len), config.batch_size, config.seed);
  auto params = model.named_parameters();
  const Index stop = options.stop_at_step < 0 ? config.total_steps : std::min(options.stop_at_step, config.total_steps);

  std::filesystem::path metrics, evals, ckpt_path;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    metrics = *options.out_dir / "metrics.jsonl";
    evals = *options.out_dir / "eval.jsonl";
    ckpt_path = *options.out_dir / "checkpoint.hltc";
    if (state.step == 0) {
      std::filesystem::remove(metrics);
      std::filesystem::remove(evals);
    }
  }

  std::vector<StepRecord> log;
  for (Index s = state.step; s < stop; ++s) {
    const auto batch = make_batch(data.train(), schedule.windows_for_step(s), config.seq_len);
    for (auto& [_, t] : params) t.zero_grad();
    StepRecord rec;
    rec.step = s;
    try {
      const auto loss = lm_loss(model, batch.inputs, batch.targets, batch.shape);
      rec.loss = static_cast<double>(loss.item());
      if (!std::isfinite(rec.loss)) throw NumericError("loss is not finite at step " + std::to_string(s));
      loss.backward();
      rec.grad_norm = clip_grad_norm(params, config.clip_norm);
      rec.lr = lr_at(s + 1, config);
      adamw_step(params, state.adam, rec.lr, config);
    } catch (const NumericError&) {
      if (options.out_dir) save_training_checkpoint(*options.out_dir / "last.hltc", model, config, state);
      throw;
    }
    state.step = s + 1;
    rec.tokens_seen = state.step * config.batch_size * config.seq_len;
    log.push_back(rec);
    if (options.on_step) options.on_step(rec);
    if (options.out_dir) append_line(metrics, to_json(rec));

    const bool eval_now = config.eval_every > 0 && (state.step % config.eval_every == 0 || state.step == config.total_steps);
    if (eval_now && options.out_dir) {
      const auto ev = evaluate_ppl(model, data.held_out(), config.seq_len, config.eval_windows, config.batch_size);
      append_line(evals, {{"step", state.step}, {"ppl", ev.ppl}, {"mean_ce", ev.mean_ce}, {"tokens", ev.tokens}});
      save_training_checkpoint(ckpt_path, model, config, state);
    }
  }
  if (options.out_dir) save_training_checkpoint(ckpt_path, model, config, state);
  for (auto& [_, t] : params) t.zero_grad();
  return log;
}

template EvalResult evaluate_ppl(const Model<float>&, std::span<const std::uint8_t>, Index, Index, Index);
template EvalResult evaluate_ppl(const Model<double>&, std::span<const std::uint8_t>, Index, Index, Index);

}  // namespace hyperloop
