#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fixtures.hpp"
#include "hyperloop/error.hpp"
#include "hyperloop/quant.hpp"

using namespace hyperloop;
using namespace hyperloop::testing;

namespace {

Eigen::MatrixXd random_matrix(Index rows, Index cols, std::uint64_t seed, double scale = 1.0) {
  CounterRng rng(CounterRng::mix(seed));
  Eigen::MatrixXd m(rows, cols);
  for (Index r = 0; r < rows; ++r)
    for (Index c = 0; c < cols; ++c) m(r, c) = scale * rng.normal();
  return m;
}

std::vector<std::uint8_t> corpus(std::size_t n) { return generate_corpus(n, 11); }

}  // namespace

TEST_CASE("int4 packing round-trips every code in both nibbles") {
  std::vector<std::uint8_t> codes;
  for (int hi = 0; hi < 16; ++hi)
    for (int lo = 0; lo < 16; ++lo) {
      codes.push_back(static_cast<std::uint8_t>(lo));
      codes.push_back(static_cast<std::uint8_t>(hi));
    }
  const auto packed = pack_int4(codes, 2, 256);
  CHECK(packed.size() == 256);
  CHECK(packed[1] == 0x01);
  CHECK(unpack_int4(packed, 2, 256) == codes);

  const std::vector<std::uint8_t> odd{1, 2, 3, 4, 5, 6};
  CHECK(pack_int4(odd, 2, 3).size() == 4);
  CHECK(unpack_int4(pack_int4(odd, 2, 3), 2, 3) == odd);
  const std::vector<std::uint8_t> bad{16};
  CHECK_THROWS_AS(pack_int4(bad, 1, 1), ContractError);
}

TEST_CASE("RTN reproduces weights already on the grid") {
  const double s = 0.037;
  Eigen::MatrixXd w(2, 16);
  for (Index c = 0; c < 16; ++c) {
    w(0, c) = (static_cast<double>(c) - 8.0) * s;
    w(1, c) = (7.0 - static_cast<double>(c)) * s;
  }
  const auto q = rtn_quantize(w, 16, 4);
  CHECK((q.dequantize() - w).cwiseAbs().maxCoeff() < 1e-7);
  CHECK(q.zeros[0] == 8);
}

TEST_CASE("constant groups dequantize exactly") {
  for (double v : {0.0, 0.25, -1.5}) {
    Eigen::MatrixXd w = Eigen::MatrixXd::Constant(3, 8, v);
    const auto q = rtn_quantize(w, 4, 4);
    CHECK((q.dequantize() - w).cwiseAbs().maxCoeff() <= 1e-7);
  }
}

TEST_CASE("RTN error is at most half a step per group") {
  const auto w = random_matrix(8, 40, 3);
  for (int bits : {4, 8}) {
    const auto q = rtn_quantize(w, 16, bits);
    CHECK(q.groups() == 3);
    const auto d = q.dequantize();
    for (Index r = 0; r < w.rows(); ++r)
      for (Index c = 0; c < w.cols(); ++c) {
        const double s = q.scales[static_cast<std::size_t>(r * q.groups() + c / 16)];
        CHECK(std::abs(d(r, c) - w(r, c)) <= 0.5 * s * (1 + 1e-6));
        CHECK(q.code(r, c) <= q.max_code());
      }
  }
}

TEST_CASE("group size equal to row length is per-row quantization") {
  const auto w = random_matrix(4, 24, 9);
  const auto q = rtn_quantize(w, 24, 4);
  CHECK(q.groups() == 1);
  CHECK(q.scales.size() == 4);
  const auto capped = rtn_quantize(w, 100, 4);
  CHECK(capped.dequantize() == q.dequantize());
}

TEST_CASE("GPTQ with an identity Hessian matches RTN") {
  const auto w = random_matrix(6, 32, 5);
  const Eigen::MatrixXd h = Eigen::MatrixXd::Identity(32, 32);
  const auto g = gptq_quantize(w, h, 8, 4);
  CHECK_FALSE(g.fell_back);
  const auto r = rtn_quantize(w, 8, 4);
  CHECK(g.layer.packed == r.packed);
  CHECK(g.layer.scales == r.scales);
}

TEST_CASE("GPTQ leaves on-grid weights unchanged") {
  Eigen::MatrixXd w(3, 8);
  w << 0, 15, 3, 9, 1, 4, 12, 7,  //
      15, 2, 0, 5, 11, 6, 8, 13,   //
      6, 0, 14, 15, 3, 10, 2, 9;
  w = (w.array() - 8.0) * 0.125;
  const auto x = random_matrix(20, 8, 1);
  const Eigen::MatrixXd h = 2.0 * x.transpose() * x;
  const auto g = gptq_quantize(w, h, 8, 4);
  CHECK((g.layer.dequantize() - w).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("GPTQ beats RTN on correlated calibration inputs") {
  const auto w = random_matrix(4, 4, 21);
  Eigen::MatrixXd x(2, 4);
  x << 1.0, 0.9, -0.4, 0.2, 0.3, -1.0, 0.8, 0.5;
  const Eigen::MatrixXd h = 2.0 * x.transpose() * x;
  const auto g = gptq_quantize(w, h, 4, 4);
  const auto r = rtn_quantize(w, 4, 4);
  CHECK(calibration_loss(w, g.layer.dequantize(), h) <= calibration_loss(w, r.dequantize(), h) + 1e-12);

  const auto big = random_matrix(16, 64, 4);
  const Eigen::MatrixXd xs = random_matrix(200, 64, 6) + 0.5 * random_matrix(200, 1, 7).replicate(1, 64);
  const Eigen::MatrixXd hb = 2.0 * xs.transpose() * xs;
  const auto gb = gptq_quantize(big, hb, 16, 4);
  const auto rb = rtn_quantize(big, 16, 4);
  CHECK(calibration_loss(big, gb.layer.dequantize(), hb) < calibration_loss(big, rb.dequantize(), hb));
}

TEST_CASE("calibration loss equals summed squared output error") {
  const auto w = random_matrix(5, 7, 30);
  const auto wq = rtn_quantize(w, 4, 4).dequantize();
  const auto x = random_matrix(11, 7, 31);
  const Eigen::MatrixXd h = 2.0 * x.transpose() * x;
  const double direct = ((w - wq) * x.transpose()).squaredNorm();
  CHECK(calibration_loss(w, wq, h) == doctest::Approx(direct).epsilon(1e-10));
}

TEST_CASE("GPTQ handles dead columns and rejects mismatched Hessians") {
  const auto w = random_matrix(3, 6, 8);
  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(6, 6);
  h(2, 2) = 0.0;
  const auto g = gptq_quantize(w, h, 6, 4);
  CHECK_FALSE(g.fell_back);
  CHECK(g.layer.dequantize().allFinite());
  CHECK_THROWS_AS(gptq_quantize(w, Eigen::MatrixXd::Identity(5, 5), 6, 4), DimensionError);
  CHECK_THROWS_AS(rtn_quantize(w, 6, 3), ConfigError);
}

TEST_CASE("GPTQ falls back to RTN when the Hessian is not positive definite") {
  const auto w = random_matrix(3, 4, 12);
  Eigen::MatrixXd h = Eigen::MatrixXd::Identity(4, 4);
  h(0, 1) = h(1, 0) = 5.0;
  const auto g = gptq_quantize(w, h, 4, 4, 0.0);
  CHECK(g.fell_back);
  CHECK(g.layer.packed == rtn_quantize(w, 4, 4).packed);
}

TEST_CASE("Hessian accumulation of one-hot inputs") {
  HessianAccumulator acc;
  const std::vector<float> rows{0, 1, 0, 0, 1, 0};
  acc.add(rows, 3);
  CHECK(acc.samples == 2);
  Eigen::MatrixXd expect = Eigen::MatrixXd::Zero(3, 3);
  expect(1, 1) = 4.0;
  CHECK(acc.h == expect);
}

TEST_CASE("looped layers accumulate calibration inputs from every loop") {
  auto cfg = tiny_config(ArchKind::looped);
  cfg.vocab_size = kByteVocab;
  cfg.loops = 3;
  const auto model = build_model<float>(cfg);
  const auto bytes = corpus(4096);
  const std::vector<Index> windows{0, 3, 7};
  const auto hs = collect_hessians(model, bytes, 16, windows, true, 2);
  const Index tokens = 3 * 16;
  CHECK(hs.aggregated.at("begin.0.attn.wq").samples == tokens);
  CHECK(hs.aggregated.at("middle.0.attn.wq").samples == 3 * tokens);
  CHECK(hs.aggregated.at("middle.1.mlp.w_down").samples == 3 * tokens);
  CHECK(hs.aggregated.size() == projection_weights(cfg).size());

  // Aggregated Hessian of a shared layer = sum of the per-loop Hessians of its unrolled copies.
  auto twin_cfg = depth_matched_twin(cfg);
  twin_cfg.arch_kind = ArchKind::vanilla;
  auto twin = build_model<float>(twin_cfg);
  std::map<std::string, std::string> rename;
  for (const auto& spec : parameter_manifest(twin_cfg)) {
    std::string src = spec.name;
    if (src.rfind("middle.", 0) == 0) {
      const auto dot = src.find('.', 7);
      const Index idx = std::stoi(src.substr(7, dot - 7));
      src = "middle." + std::to_string(idx % cfg.middle_layers) + src.substr(dot);
    }
    rename.emplace(spec.name, src);
  }
  copy_weights(model, twin, rename);
  const auto ht = collect_hessians(twin, bytes, 16, windows, false, 2);
  for (const char* proj : {"attn.wq", "mlp.w_up", "mlp.w_down"}) {
    Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(cfg.model_dim, cfg.model_dim);
    const std::string shared = std::string("middle.1.") + proj;
    Eigen::MatrixXd unrolled;
    for (Index l = 0; l < cfg.loops; ++l) {
      const auto& copy = ht.aggregated.at("middle." + std::to_string(l * cfg.middle_layers + 1) + "." + proj).h;
      unrolled = unrolled.size() ? Eigen::MatrixXd(unrolled + copy) : copy;
      const auto& per = hs.per_loop.at({shared, l}).h;
      CHECK((per - copy).cwiseAbs().maxCoeff() <= 1e-6 * (1.0 + copy.cwiseAbs().maxCoeff()));
    }
    const auto& agg = hs.aggregated.at(shared).h;
    CHECK((agg - unrolled).cwiseAbs().maxCoeff() <= 1e-6 * (1.0 + unrolled.cwiseAbs().maxCoeff()));
  }
}

TEST_CASE("quantize_model reports every projection and GPTQ does not lose to RTN") {
  auto cfg = tiny_config(ArchKind::hyperloop);
  cfg.vocab_size = kByteVocab;
  const auto model = build_model<float>(cfg);
  const TokenStream data(corpus(8192), 0.05);
  QuantizeConfig qc;
  qc.group_size = 8;
  qc.calibration_sequences = 8;
  const auto q = quantize_model(model, data, 16, qc);
  CHECK(q.report.size() == projection_weights(cfg).size());
  CHECK(q.layers.size() == q.report.size());
  for (const auto& r : q.report) {
    CHECK_FALSE(r.fell_back);
    CHECK(r.gptq_loss <= r.rtn_loss * (1 + 1e-9) + 1e-12);
  }
  const auto deq = apply_quantization(model, q);
  const auto& wq = q.layers.at("middle.0.mlp.w_up");
  const auto m = wq.dequantize();
  for (auto& [name, t] : deq.named_parameters()) {
    if (name != "middle.0.mlp.w_up") continue;
    CHECK(t.dim(0) == wq.cols);
    CHECK(t.data()[1] == doctest::Approx(m(1, 0)));
  }
}

TEST_CASE("quantized checkpoints load back as dequantized float models") {
  auto cfg = tiny_config(ArchKind::hyperloop);
  cfg.vocab_size = kByteVocab;
  const auto model = build_model<float>(cfg);
  const TokenStream data(corpus(8192), 0.05);
  QuantizeConfig qc;
  qc.group_size = 8;
  qc.calibration_sequences = 4;
  for (int bits : {4, 8}) {
    qc.bits = bits;
    const auto q = quantize_model(model, data, 16, qc);
    const auto dir = std::filesystem::temp_directory_path() / "hyperloop_test_quant";
    const auto path = dir / ("q" + std::to_string(bits) + ".hltc");
    const auto ckpt = make_quantized_checkpoint(model, TrainConfig{}, q);
    write_checkpoint(path, ckpt);
    CHECK(ckpt.find("middle.0.attn.wq.qweight")->dtype == (bits == 4 ? DType::int4 : DType::u8));
    const auto loaded = load_any_checkpoint(path);
    const auto expect = apply_quantization(model, q);
    const auto a = expect.named_parameters();
    const auto b = loaded.model.named_parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].first == b[i].first);
      const auto da = a[i].second.data();
      const auto db = b[i].second.data();
      CHECK(std::equal(da.begin(), da.end(), db.begin(), db.end()));
    }
    if (bits == 4) {
      const auto plain = std::filesystem::file_size(dir / "q4.hltc");
      write_checkpoint(dir / "f.hltc", make_checkpoint(model, TrainConfig{}, TrainState{}));
      CHECK(plain < std::filesystem::file_size(dir / "f.hltc"));
    }
  }
}
