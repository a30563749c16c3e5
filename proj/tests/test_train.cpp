#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>

#include "fixtures.hpp"
#include "hyperloop/error.hpp"
#include "hyperloop/train.hpp"

using namespace hyperloop;
using namespace hyperloop::testing;

namespace {

ModelConfig byte_config(ArchKind kind) {
  auto c = tiny_config(kind, 16, 2);
  c.vocab_size = kByteVocab;
  return c;
}

TrainConfig short_run(Index steps) {
  TrainConfig t;
  t.batch_size = 2;
  t.seq_len = 16;
  t.total_steps = steps;
  t.warmup_steps = 1;
  t.eval_every = 0;
  t.seed = 3;
  return t;
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("hyperloop_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

NamedParams scalar_param(const std::string& name, float value, float grad) {
  auto t = Tensorf::from_vector({1}, {value}, true);
  t.impl()->grad_buffer()[0] = grad;
  return {{name, t}};
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.max_lr = 1e-3;
  c.min_lr = 1e-4;
  c.warmup_steps = 10;
  c.total_steps = 100;
  CHECK(lr_at(0, c) == 0.0);
  CHECK(lr_at(10, c) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(lr_at(100, c) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at(55, c) == doctest::Approx(5.5e-4).epsilon(1e-12));
  const double bound = c.max_lr / c.warmup_steps + c.max_lr * std::numbers::pi / (c.total_steps - c.warmup_steps);
  for (Index s = 0; s < c.total_steps; ++s) CHECK(std::abs(lr_at(s + 1, c) - lr_at(s, c)) <= bound);
}

TEST_CASE("gradient clipping") {
  auto a = Tensorf::from_vector({2}, {0, 0}, true);
  a.impl()->grad_buffer() = {1.2f, 1.6f};  // norm 2
  NamedParams p{{"a", a}};
  CHECK(clip_grad_norm(p, 1.0) == doctest::Approx(2.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6f));
  CHECK(a.grad()[1] == doctest::Approx(0.8f));
  CHECK(global_grad_norm(p) == doctest::Approx(1.0).epsilon(1e-6));

  CounterRng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    auto x = Tensorf::zeros({5}, true);
    auto y = Tensorf::zeros({3}, true);
    for (auto& g : x.impl()->grad_buffer()) g = static_cast<float>(3.0 * rng.normal());
    for (auto& g : y.impl()->grad_buffer()) g = static_cast<float>(0.2 * rng.normal());
    NamedParams q{{"x", x}, {"y", y}};
    const double clip = 0.5 + rng.uniform() * 4.0;
    const double pre = clip_grad_norm(q, clip);
    const double post = global_grad_norm(q);
    CHECK(post <= pre + 1e-6);
    CHECK(std::abs(post - std::min(pre, clip)) <= 1e-6 * std::max(1.0, pre));
  }
}

TEST_CASE("adamw with zero gradients only decays") {
  TrainConfig c;
  auto w = Tensorf::from_vector({2}, {1.0f, -2.0f}, true);
  auto n = Tensorf::from_vector({2}, {1.0f, 1.0f}, true);
  w.impl()->grad_buffer();
  n.impl()->grad_buffer();
  NamedParams p{{"middle.0.attn.wq", w}, {"middle.0.attn.norm", n}};
  AdamState st;
  adamw_step(p, st, 0.01, c);
  CHECK(w.data()[0] == doctest::Approx(1.0f * (1 - 0.01 * 0.1)));
  CHECK(w.data()[1] == doctest::Approx(-2.0f * (1 - 0.01 * 0.1)));
  CHECK(n.data()[0] == 1.0f);
}

TEST_CASE("adamw two scalar steps against a hand recomputation") {
  TrainConfig c;
  c.beta1 = 0.9;
  c.beta2 = 0.95;
  c.adam_eps = 1e-8;
  c.weight_decay = 0.1;
  auto p = scalar_param("w", 0.5f, 0.2f);
  AdamState st;
  adamw_step(p, st, 0.1, c);
  // Step 1: w = 0.5*(1-0.01) - 0.1 * m1hat / (sqrt(v1hat)+eps), m1hat = g, v1hat = g^2.
  double w = 0.5 * (1 - 0.01);
  w -= 0.1 * 0.2 / (0.2 + 1e-8);
  CHECK(p[0].second.data()[0] == doctest::Approx(w).epsilon(1e-6));
  p[0].second.impl()->grad_buffer()[0] = -0.4f;
  adamw_step(p, st, 0.05, c);
  const double m = 0.9 * (0.1 * 0.2) + 0.1 * -0.4;
  const double v = 0.95 * (0.05 * 0.04) + 0.05 * 0.16;
  const double mhat = m / (1 - 0.81);
  const double vhat = v / (1 - 0.9025);
  w = w * (1 - 0.005) - 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
  CHECK(p[0].second.data()[0] == doctest::Approx(w).epsilon(1e-6));
  CHECK(st.step == 2);
}

TEST_CASE("non-finite gradients abort naming the parameter") {
  TrainConfig c;
  auto p = scalar_param("end.0.mlp.w_up", 1.0f, std::nanf(""));
  AdamState st;
  try {
    adamw_step(p, st, 0.1, c);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    CHECK(std::string(e.what()).find("end.0.mlp.w_up") != std::string::npos);
  }
  CHECK(p[0].second.data()[0] == 1.0f);
}

TEST_CASE("byte windows, batches and the split") {
  std::vector<std::uint8_t> bytes(100);
  for (std::size_t i = 0; i < bytes.size(); ++i) bytes[i] = static_cast<std::uint8_t>(i);
  TokenStream ts(bytes, 0.2);
  CHECK(ts.train().size() == 80);
  CHECK(ts.held_out().size() == 20);
  CHECK(ts.held_out()[0] == 80);
  CHECK(window_count(ts.train(), 16) == 5);

  const std::vector<Index> ids{2, 0};
  auto b = make_batch(ts.train(), ids, 4);
  CHECK(b.shape == Shape{2, 4});
  CHECK(b.inputs == std::vector<std::int32_t>{kBosToken, 8, 9, 10, kBosToken, 0, 1, 2});
  CHECK(b.targets == std::vector<std::int32_t>{8, 9, 10, 11, 0, 1, 2, 3});

  BatchSchedule sched(5, 2, 11);
  std::set<Index> seen;
  for (Index s = 0; s < 5; ++s)
    for (Index w : sched.windows_for_step(s)) seen.insert(w);
  CHECK(seen.size() == 5);
  CHECK(sched.windows_for_step(3) == BatchSchedule(5, 2, 11).windows_for_step(3));
  // Training windows never reach past the split.
  for (Index s = 0; s < 10; ++s)
    for (Index w : sched.windows_for_step(s)) CHECK((w + 1) * 16 <= static_cast<Index>(ts.split()));
}

TEST_CASE("synthetic corpus is deterministic text") {
  auto a = generate_corpus(5000, 1);
  CHECK(a.size() == 5000);
  CHECK(a == generate_corpus(5000, 1));
  CHECK(a != generate_corpus(5000, 2));
  for (auto ch : a) CHECK(((ch >= 'a' && ch <= 'z') || ch == ' ' || ch == '.' || ch == ',' || ch == '\n' || ch == 'T'));
}

TEST_CASE("initial loss is near uniform and a uniform model has perplexity V") {
  TokenStream data(generate_corpus(20000, 4), 0.1);
  auto c = byte_config(ArchKind::hyperloop);
  auto m = build_model<float>(c);
  TrainState st;
  auto log = train_loop(m, st, data, short_run(2), {.stop_at_step = 1});
  CHECK(log.size() == 1);
  CHECK(std::abs(log[0].loss - std::log(257.0)) < 0.1);

  auto zero = build_model<float>(c);
  for (auto& v : zero.embedding.unembed.data_mut()) v = 0.0f;
  auto ev = evaluate_ppl(zero, data.held_out(), 16);
  CHECK(ev.ppl == doctest::Approx(257.0).epsilon(1e-5));
}

TEST_CASE("evaluation perplexity is exp of the training loss on the same windows") {
  TokenStream data(generate_corpus(4000, 5), 0.5);
  auto m = build_model<float>(byte_config(ArchKind::looped));
  const std::vector<Index> ids{0, 1, 2, 3};
  auto b = make_batch(data.held_out(), ids, 16);
  const double loss = lm_loss(m, b.inputs, b.targets, b.shape).item();
  auto ev = evaluate_ppl(m, data.held_out(), 16, 4, 4);
  CHECK(ev.tokens == 64);
  CHECK(ev.ppl == doctest::Approx(std::exp(loss)).epsilon(1e-6));
}

TEST_CASE("checkpoint bytes: layout, round trip and corruption") {
  auto m = build_model<float>(byte_config(ArchKind::hyperloop));
  TrainState st;
  st.step = 3;
  auto ckpt = make_checkpoint(m, short_run(5), st);
  auto bytes = serialize(ckpt);
  CHECK(std::memcmp(bytes.data(), "HLTC", 4) == 0);
  std::uint32_t version = 0, doc_len = 0;
  std::memcpy(&version, bytes.data() + 4, 4);
  std::memcpy(&doc_len, bytes.data() + 8, 4);
  CHECK(version == kCheckpointVersion);
  auto doc = nlohmann::json::parse(std::string(bytes.begin() + 12, bytes.begin() + 12 + doc_len));
  CHECK(doc.at("state").at("step") == 3);
  std::uint32_t count = 0;
  std::memcpy(&count, bytes.data() + 12 + doc_len, 4);
  CHECK(count == m.named_parameters().size());

  auto back = deserialize(bytes);
  auto run = load_training_checkpoint(back);
  CHECK(serialize(make_checkpoint(run.model, run.train, run.state)) == bytes);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 3);
  CHECK_THROWS_AS(deserialize(truncated), IoError);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize(bad), IoError);
  CHECK(payload_size(DType::int4, {3, 5}) == 9);
}

TEST_CASE("training resumes bit-identically from a checkpoint") {
  TokenStream data(generate_corpus(20000, 6), 0.1);
  const auto cfg = byte_config(ArchKind::hyperloop);
  const auto t = short_run(4);
  auto dir = scratch_dir("resume");

  auto full = build_model<float>(cfg);
  TrainState full_state;
  train_loop(full, full_state, data, t, {.out_dir = dir / "full"});

  auto part = build_model<float>(cfg);
  TrainState part_state;
  train_loop(part, part_state, data, t, {.stop_at_step = 2, .out_dir = dir / "part"});
  CHECK(part_state.step == 2);
  auto run = load_training_checkpoint(dir / "part" / "checkpoint.hltc");
  CHECK(run.state.step == 2);
  train_loop(run.model, run.state, data, run.train, {.out_dir = dir / "part"});

  CHECK(read_file(dir / "full" / "checkpoint.hltc") == read_file(dir / "part" / "checkpoint.hltc"));
  CHECK(read_file(dir / "full" / "metrics.jsonl") == read_file(dir / "part" / "metrics.jsonl"));

  std::ifstream in(dir / "full" / "metrics.jsonl");
  std::string line;
  Index lines = 0;
  while (std::getline(in, line)) {
    auto rec = nlohmann::json::parse(line);
    CHECK(rec.at("step") == lines);
    CHECK(rec.at("tokens_seen") == (lines + 1) * 2 * 16);
    for (const char* key : {"loss", "lr", "grad_norm"}) CHECK(rec.at(key).is_number());
    ++lines;
  }
  CHECK(lines == 4);
}

TEST_CASE("a non-finite loss aborts and dumps the last state") {
  TokenStream data(generate_corpus(20000, 7), 0.1);
  auto m = build_model<float>(byte_config(ArchKind::looped));
  m.embedding.unembed.data_mut()[5] = std::numeric_limits<float>::infinity();
  auto dir = scratch_dir("nan");
  TrainState st;
  CHECK_THROWS_AS(train_loop(m, st, data, short_run(3), {.out_dir = dir}), NumericError);
  CHECK(std::filesystem::exists(dir / "last.hltc"));
}

TEST_CASE("train config validation") {
  auto t = short_run(10);
  t.warmup_steps = 10;
  CHECK_THROWS_AS(validate(t), ConfigError);
  auto doc = to_json(short_run(10));
  CHECK(train_config_from_json(doc) == short_run(10));
  doc["learning_rate"] = 1;
  CHECK_THROWS_AS(train_config_from_json(doc), ConfigError);
}
