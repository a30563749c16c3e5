#include <doctest.h>

#include <cmath>
#include <vector>

#include "hyperloop/error.hpp"
#include "hyperloop/hyperconn.hpp"
#include "hyperloop/nn.hpp"
#include "support.hpp"

using namespace hyperloop;
using hyperloop::testing::gradcheck;
using hyperloop::testing::random_tensor;
using hyperloop::testing::weighted_sum;

namespace {

// Random values in every parameter so that no map is degenerate.
HyperConnectionParams<double> random_hc(HresMode mode, Index n, Index c, bool e, std::uint64_t seed) {
  auto p = init_hyperconn<double>("hc", mode, n, c, e);
  std::uint64_t s = seed;
  for (auto& [name, t] : p.named_parameters()) {
    auto r = random_tensor(t.shape(), ++s, 0.5, false);
    auto d = t.data_mut();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = r.data()[i];
  }
  return p;
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("expand copies and merge averages") {
  auto x = random_tensor({3, 5}, 1, 1.0, false);
  auto one = expand(x, 1);
  CHECK(one.y.shape() == Shape{3, 1, 5});
  for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(one.y.data()[i] == x.data()[i]);

  auto four = expand(x, 4);
  CHECK(four.y.shape() == Shape{3, 4, 5});
  for (Index t = 0; t < 3; ++t)
    for (Index i = 0; i < 4; ++i)
      for (Index c = 0; c < 5; ++c) CHECK(four.y.data()[(t * 4 + i) * 5 + c] == x.data()[t * 5 + c]);
  auto back = merge(four);
  for (std::size_t i = 0; i < x.data().size(); ++i) CHECK(back.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-15));

  auto v = random_tensor({2, 1, 3}, 2, 1.0, false);
  auto pm = merge(StreamState<double>{concat<double>({v, scale(v, -1.0)}, 1)});
  for (double z : pm.data()) CHECK(z == 0.0);
}

TEST_CASE("zero projections and biases give the sigmoid midpoints") {
  auto p = init_hyperconn<double>("hc", HresMode::diagonal, 3, 4, false);
  for (auto* t : {&p.alpha_pre, &p.alpha_post, &p.alpha_res, &p.b_pre, &p.b_post, &p.b_res})
    for (auto& v : t->data_mut()) v = 0.0;
  auto mix = compute_mix(StreamState<double>{random_tensor({2, 3, 4}, 3, 1.0, false)}, p);
  CHECK(mix.pre.shape() == Shape{2, 1, 3});
  CHECK(mix.post.shape() == Shape{2, 3, 1});
  CHECK(mix.res.shape() == Shape{2, 3, 3});
  for (double v : mix.pre.data()) CHECK(v == 0.5);
  for (double v : mix.post.data()) CHECK(v == 1.0);
  for (Index t = 0; t < 2; ++t)
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < 3; ++j) CHECK(mix.res.data()[(t * 3 + i) * 3 + j] == (i == j ? 0.5 : 0.0));
}

TEST_CASE("default initialization reads the mean and nearly preserves streams") {
  for (Index n : {1, 2, 4}) {
    auto p = init_hyperconn<double>("hc", HresMode::diagonal, n, 4, true);
    auto mix = compute_mix(StreamState<double>{random_tensor({2, n, 4}, 4, 1.0, false)}, p);
    const double expect_pre = n == 1 ? 0.99 : 1.0 / static_cast<double>(n);
    for (double v : mix.pre.data()) CHECK(v == doctest::Approx(expect_pre).epsilon(1e-12));
    for (double v : mix.post.data()) CHECK(v == 1.0);
    for (Index i = 0; i < n; ++i) CHECK(mix.res.data()[i * n + i] == doctest::Approx(0.99).epsilon(1e-12));
  }
  auto s = init_hyperconn<double>("hc", HresMode::sinkhorn, 4, 4, false);
  auto mix = compute_mix(StreamState<double>{random_tensor({1, 4, 4}, 5, 1.0, false)}, s);
  for (Index i = 0; i < 4; ++i) CHECK(mix.res.data()[i * 4 + i] > 0.98);
}

TEST_CASE("sinkhorn normalization closed forms") {
  auto half = sinkhorn_normalize(Tensord::zeros({2, 2}));
  for (double v : half.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(sinkhorn_normalize(Tensord::from_vector({1, 1}, {-3.7})).data()[0] == 1.0);
  auto near_eye = sinkhorn_normalize(Tensord::from_vector({2, 2}, {10, -10, -10, 10}));
  CHECK(std::abs(near_eye.data()[0] - 1.0) < 1e-3);
  CHECK(std::abs(near_eye.data()[1]) < 1e-3);
}

TEST_CASE("sinkhorn mode keeps H_res doubly stochastic") {
  auto p = random_hc(HresMode::sinkhorn, 4, 3, false, 10);
  auto mix = compute_mix(StreamState<double>{random_tensor({5, 4, 3}, 11, 2.0, false)}, p);
  for (Index t = 0; t < 5; ++t) {
    const double* m = mix.res.data().data() + t * 16;
    for (Index i = 0; i < 4; ++i) {
      double row = 0, col = 0;
      for (Index j = 0; j < 4; ++j) {
        row += m[i * 4 + j];
        col += m[j * 4 + i];
        CHECK(m[i * 4 + j] > 0.0);
      }
      CHECK(std::abs(row - 1.0) <= 1e-6);
      CHECK(std::abs(col - 1.0) <= 1e-3);
    }
  }
}

TEST_CASE("H_res never amplifies a stream") {
  for (auto mode : {HresMode::sinkhorn, HresMode::diagonal}) {
    auto p = random_hc(mode, 4, 3, false, 20);
    auto y = random_tensor({6, 4, 3}, 21, 1.5, false);
    auto mix = compute_mix(StreamState<double>{y}, p);
    auto out = matmul(mix.res, y);
    for (Index t = 0; t < 6; ++t) {
      for (Index c = 0; c < 3; ++c) {
        double vmax = 0;
        for (Index i = 0; i < 4; ++i) vmax = std::max(vmax, std::abs(y.data()[(t * 4 + i) * 3 + c]));
        for (Index i = 0; i < 4; ++i) {
          const double o = std::abs(out.data()[(t * 4 + i) * 3 + c]);
          if (mode == HresMode::diagonal) {
            CHECK(o <= std::abs(y.data()[(t * 4 + i) * 3 + c]));
          } else {
            CHECK(o <= vmax + 1e-12);
          }
        }
      }
    }
    for (double v : mix.post.data()) {
      CHECK(v > 0.0);
      CHECK(v < 2.0);
    }
  }
}

TEST_CASE("identity maps reduce to the plain residual update") {
  auto y = random_tensor({3, 1, 4}, 30, 1.0, false);
  auto w = random_tensor({4, 4}, 31, 1.0, false);
  std::function<Tensord(const Tensord&)> f = [&](const Tensord& x) { return matmul(x, w); };
  StreamState<double> st{y};
  auto out = hc_apply(st, identity_mix(st), f, static_cast<const Tensord*>(nullptr));
  auto x = reshape(y, {3, 4});
  auto expected = add(x, matmul(x, w));
  for (std::size_t i = 0; i < expected.data().size(); ++i)
    CHECK(out.y.data()[i] == doctest::Approx(expected.data()[i]).epsilon(1e-14));
}

TEST_CASE("zero sublayer output leaves only stream mixing") {
  auto p = random_hc(HresMode::sinkhorn, 3, 4, true, 40);
  for (auto& v : p.loop_embedding.data_mut()) v = 0.0;
  StreamState<double> st{random_tensor({2, 3, 4}, 41, 1.0, false)};
  auto mix = compute_mix(st, p);
  std::function<Tensord(const Tensord&)> zero = [](const Tensord& x) { return scale(x, 0.0); };
  auto out = hc_apply(st, mix, zero, &p.loop_embedding);
  auto expected = matmul(mix.res, st.y);
  for (std::size_t i = 0; i < expected.data().size(); ++i) CHECK(out.y.data()[i] == doctest::Approx(expected.data()[i]));
}

TEST_CASE("hc_apply matches a per-token scalar recomputation") {
  const Index t_len = 3, n = 2, c = 4, nc = n * c;
  for (auto mode : {HresMode::diagonal, HresMode::sinkhorn}) {
    auto p = random_hc(mode, n, c, true, 50);
    auto y = random_tensor({t_len, n, c}, 51, 1.0, false);
    auto w = random_tensor({c, c}, 52, 0.7, false);
    std::function<Tensord(const Tensord&)> f = [&](const Tensord& x) { return silu(matmul(x, w)); };
    StreamState<double> st{y};
    auto out = hc_apply(st, compute_mix(st, p), f, &p.loop_embedding);

    const auto Y = y.data();
    for (Index t = 0; t < t_len; ++t) {
      const double* yt = Y.data() + t * nc;
      double ss = 0;
      for (Index i = 0; i < nc; ++i) ss += yt[i] * yt[i];
      const double inv = 1.0 / std::sqrt(ss / nc + kNormEps);
      std::vector<double> z(nc);
      for (Index i = 0; i < nc; ++i) z[i] = yt[i] * inv * p.norm.data()[i];
      auto proj = [&](const Tensord& W, Index row) {
        double acc = 0;
        for (Index i = 0; i < nc; ++i) acc += W.data()[row * nc + i] * z[i];
        return acc;
      };
      std::vector<double> hpre(n), hpost(n);
      for (Index i = 0; i < n; ++i) {
        hpre[i] = sig(p.alpha_pre.data()[0] * proj(p.w_pre, i) + p.b_pre.data()[i]);
        hpost[i] = 2.0 * sig(p.alpha_post.data()[0] * proj(p.w_post, i) + p.b_post.data()[i]);
      }
      std::vector<double> hres(n * n, 0.0);
      if (mode == HresMode::diagonal) {
        for (Index i = 0; i < n; ++i) hres[i * n + i] = sig(p.alpha_res.data()[0] * proj(p.w_res, i) + p.b_res.data()[i]);
      } else {
        std::vector<double> lg(n * n);
        double mx = -1e300;
        for (Index k = 0; k < n * n; ++k) {
          lg[k] = p.alpha_res.data()[0] * proj(p.w_res, k) + p.b_res.data()[k];
          mx = std::max(mx, lg[k]);
        }
        for (Index k = 0; k < n * n; ++k) hres[k] = std::exp(lg[k] - mx);
        for (int it = 0; it < kSinkhornIters; ++it) {
          for (Index j = 0; j < n; ++j) {
            double s = 0;
            for (Index i = 0; i < n; ++i) s += hres[i * n + j];
            for (Index i = 0; i < n; ++i) hres[i * n + j] /= s;
          }
          for (Index i = 0; i < n; ++i) {
            double s = 0;
            for (Index j = 0; j < n; ++j) s += hres[i * n + j];
            for (Index j = 0; j < n; ++j) hres[i * n + j] /= s;
          }
        }
      }
      std::vector<double> xin(c, 0.0);
      for (Index i = 0; i < n; ++i)
        for (Index k = 0; k < c; ++k) xin[k] += hpre[i] * yt[i * c + k];
      std::vector<double> fx(c);
      for (Index k = 0; k < c; ++k) {
        double a = 0;
        for (Index j = 0; j < c; ++j) a += xin[j] * w.data()[j * c + k];
        fx[k] = a * sig(a) + p.loop_embedding.data()[k];
      }
      for (Index i = 0; i < n; ++i) {
        for (Index k = 0; k < c; ++k) {
          double ref = hpost[i] * fx[k];
          for (Index j = 0; j < n; ++j) ref += hres[i * n + j] * yt[j * c + k];
          CHECK(out.y.data()[t * nc + i * c + k] == doctest::Approx(ref).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("mode mismatch is a config error") {
  auto p = init_hyperconn<double>("hc", HresMode::diagonal, 2, 4, false);
  CHECK_THROWS_AS(compute_mix(StreamState<double>{Tensord::zeros({2, 3, 4})}, p), ConfigError);
  CHECK_THROWS_AS(parse_hres_mode("unitary"), ConfigError);
  CHECK(parse_hres_mode("sinkhorn") == HresMode::sinkhorn);
}

TEST_CASE("hyper-connection gradients are correct and alive") {
  for (auto mode : {HresMode::diagonal, HresMode::sinkhorn, HresMode::identity}) {
    auto p = random_hc(mode, 2, 3, true, 60);
    auto y = random_tensor({2, 2, 3}, 61);
    auto w = random_tensor({3, 3}, 62, 0.7);
    std::function<Tensord(const Tensord&)> f = [&](const Tensord& x) { return silu(matmul(x, w)); };
    auto leaves = p.named_parameters();
    leaves.emplace_back("y", y);
    auto res = gradcheck(leaves, [&] {
      StreamState<double> st{y};
      return weighted_sum(hc_apply(st, compute_mix(st, p), f, &p.loop_embedding).y);
    });
    CHECK_MESSAGE(res.max_rel_error <= 1e-4, res.worst);
    for (auto& [name, t] : p.named_parameters()) {
      double norm = 0;
      for (double g : t.grad()) norm += g * g;
      CHECK_MESSAGE(norm > 0.0, name);
    }
  }
}
