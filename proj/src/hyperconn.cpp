#include "hyperloop/hyperconn.hpp"

#include <cmath>

#include "hyperloop/error.hpp"
#include "hyperloop/nn.hpp"
#include "hyperloop/ops.hpp"

namespace hyperloop {

std::string_view to_string(HresMode mode) {
  switch (mode) {
    case HresMode::sinkhorn: return "sinkhorn";
    case HresMode::diagonal: return "diagonal";
    case HresMode::identity: return "identity";
  }
  return "?";
}

HresMode parse_hres_mode(std::string_view text) {
  if (text == "sinkhorn") return HresMode::sinkhorn;
  if (text == "diagonal") return HresMode::diagonal;
  if (text == "identity") return HresMode::identity;
  throw ConfigError("hres_mode: unknown value '" + std::string(text) + "' (expected sinkhorn|diagonal|identity)");
}

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

template <typename T>
Tensor<T> eye(Index n) {
  auto t = Tensor<T>::zeros({n, n});
  auto d = t.data_mut();
  for (Index i = 0; i < n; ++i) d[static_cast<std::size_t>(i * n + i)] = T(1);
  return t;
}

template <typename T>
Tensor<T> leaf(Shape shape, T value) {
  return Tensor<T>::full(std::move(shape), value, true);
}

Shape with_tail(const Shape& prefix, std::initializer_list<Index> tail) {
  Shape s(prefix);
  s.insert(s.end(), tail);
  return s;
}

}  // namespace

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> HyperConnectionParams<T>::named_parameters() const {
  std::vector<std::pair<std::string, Tensor<T>>> out{
      {prefix + ".w_pre", w_pre},   {prefix + ".b_pre", b_pre},   {prefix + ".alpha_pre", alpha_pre},
      {prefix + ".w_post", w_post}, {prefix + ".b_post", b_post}, {prefix + ".alpha_post", alpha_post},
  };
  if (mode != HresMode::identity) {
    out.emplace_back(prefix + ".w_res", w_res);
    out.emplace_back(prefix + ".b_res", b_res);
    out.emplace_back(prefix + ".alpha_res", alpha_res);
  }
  out.emplace_back(prefix + ".norm", norm);
  if (has_loop_embedding()) out.emplace_back(prefix + ".loop_embedding", loop_embedding);
  return out;
}

template <typename T>
HyperConnectionParams<T> init_hyperconn(std::string prefix, HresMode mode, Index streams, Index dim,
                                        bool loop_embedding) {
  if (streams < 1) throw ConfigError("streams: must be >= 1");
  const Index width = streams * dim;
  HyperConnectionParams<T> p;
  p.prefix = std::move(prefix);
  p.mode = mode;
  p.streams = streams;
  p.dim = dim;
  p.w_pre = leaf<T>({streams, width}, T(0));
  // 1/n would be an infinite logit at n = 1.
  p.b_pre = leaf<T>({streams}, static_cast<T>(logit(std::min(1.0 / static_cast<double>(streams), 0.99))));
  p.alpha_pre = leaf<T>({1}, T(1));
  p.w_post = leaf<T>({streams, width}, T(0));
  p.b_post = leaf<T>({streams}, T(0));
  p.alpha_post = leaf<T>({1}, T(1));
  if (mode == HresMode::diagonal) {
    p.w_res = leaf<T>({streams, width}, T(0));
    p.b_res = leaf<T>({streams}, static_cast<T>(logit(0.99)));
    p.alpha_res = leaf<T>({1}, T(1));
  } else if (mode == HresMode::sinkhorn) {
    p.w_res = leaf<T>({streams * streams, width}, T(0));
    p.b_res = leaf<T>({streams * streams}, T(0));
    auto b = p.b_res.data_mut();
    for (Index i = 0; i < streams; ++i) b[static_cast<std::size_t>(i * streams + i)] = T(6);
    p.alpha_res = leaf<T>({1}, T(1));
  }
  p.norm = leaf<T>({width}, T(1));
  if (loop_embedding) p.loop_embedding = leaf<T>({dim}, T(0));
  return p;
}

template <typename T>
StreamState<T> expand(const Tensor<T>& x, Index streams) {
  if (streams < 1) throw ConfigError("streams: must be >= 1");
  Shape s = x.shape();
  s.insert(s.end() - 1, 1);
  auto one = reshape(x, s);
  if (streams == 1) return {one};
  return {concat(std::vector<Tensor<T>>(static_cast<std::size_t>(streams), one), -2)};
}

template <typename T>
Tensor<T> merge(const StreamState<T>& state) {
  return mean(state.y, -2);
}

template <typename T>
Tensor<T> sinkhorn_normalize(const Tensor<T>& logits, int iters) {
  return sinkhorn(logits, iters);
}

template <typename T>
MixMatrices<T> compute_mix(const StreamState<T>& state, const HyperConnectionParams<T>& p) {
  const Index n = state.streams();
  if (n != p.streams || state.y.dim(-1) != p.dim) {
    throw ConfigError("hyperconn " + p.prefix + ": stream shape " + to_string(state.y.shape()) +
                      " does not match n=" + std::to_string(p.streams) + ", C=" + std::to_string(p.dim));
  }
  const Shape& ys = state.y.shape();
  const Shape prefix(ys.begin(), ys.end() - 2);

  auto z = rmsnorm(flatten(state.y, static_cast<int>(ys.size()) - 2), p.norm, static_cast<T>(kNormEps));
  auto project = [&](const Tensor<T>& w, const Tensor<T>& alpha, const Tensor<T>& b) {
    return add(mul(matmul(z, transpose(w)), alpha), b);
  };

  MixMatrices<T> mix;
  mix.pre = reshape(sigmoid(project(p.w_pre, p.alpha_pre, p.b_pre)), with_tail(prefix, {1, n}));
  mix.post = reshape(scale(sigmoid(project(p.w_post, p.alpha_post, p.b_post)), T(2)), with_tail(prefix, {n, 1}));
  switch (p.mode) {
    case HresMode::sinkhorn: {
      auto logits = reshape(project(p.w_res, p.alpha_res, p.b_res), with_tail(prefix, {n, n}));
      mix.res = sinkhorn_normalize(logits, kSinkhornIters);
      break;
    }
    case HresMode::diagonal: {
      auto d = reshape(sigmoid(project(p.w_res, p.alpha_res, p.b_res)), with_tail(prefix, {n, 1}));
      mix.res = mul(d, eye<T>(n));
      break;
    }
    case HresMode::identity:
      mix.res = add(Tensor<T>::zeros(with_tail(prefix, {n, n})), eye<T>(n));
      break;
  }
  return mix;
}

template <typename T>
MixMatrices<T> identity_mix(const StreamState<T>& state) {
  const Index n = state.streams();
  const Shape& ys = state.y.shape();
  const Shape prefix(ys.begin(), ys.end() - 2);
  MixMatrices<T> mix;
  mix.pre = Tensor<T>::full(with_tail(prefix, {1, n}), T(1) / static_cast<T>(n));
  mix.post = Tensor<T>::full(with_tail(prefix, {n, 1}), T(1));
  mix.res = add(Tensor<T>::zeros(with_tail(prefix, {n, n})), eye<T>(n));
  return mix;
}

template <typename T>
Tensor<T> hc_read(const StreamState<T>& state, const MixMatrices<T>& mix) {
  auto x = matmul(mix.pre, state.y);
  Shape s = x.shape();
  s.erase(s.end() - 2);
  return reshape(x, s);
}

template <typename T>
StreamState<T> hc_write(const StreamState<T>& state, const MixMatrices<T>& mix, const Tensor<T>& f,
                        const Tensor<T>* loop_embedding) {
  Tensor<T> out = f;
  if (loop_embedding && loop_embedding->numel() > 0) out = add(out, *loop_embedding);
  Shape s = out.shape();
  s.insert(s.end() - 1, 1);
  return {add(matmul(mix.res, state.y), matmul(mix.post, reshape(out, s)))};
}

template <typename T>
StreamState<T> hc_apply(const StreamState<T>& state, const MixMatrices<T>& mix,
                        const std::function<Tensor<T>(const Tensor<T>&)>& sublayer,
                        const Tensor<T>* loop_embedding) {
  return hc_write(state, mix, sublayer(hc_read(state, mix)), loop_embedding);
}

#define HYPERLOOP_INSTANTIATE_HC(T)                                                                       \
  template struct HyperConnectionParams<T>;                                                               \
  template HyperConnectionParams<T> init_hyperconn(std::string, HresMode, Index, Index, bool);            \
  template StreamState<T> expand(const Tensor<T>&, Index);                                                \
  template Tensor<T> merge(const StreamState<T>&);                                                        \
  template Tensor<T> sinkhorn_normalize(const Tensor<T>&, int);                                           \
  template MixMatrices<T> compute_mix(const StreamState<T>&, const HyperConnectionParams<T>&);            \
  template MixMatrices<T> identity_mix(const StreamState<T>&);                                            \
  template Tensor<T> hc_read(const StreamState<T>&, const MixMatrices<T>&);                               \
  template StreamState<T> hc_write(const StreamState<T>&, const MixMatrices<T>&, const Tensor<T>&,        \
                                   const Tensor<T>*);                                                     \
  template StreamState<T> hc_apply(const StreamState<T>&, const MixMatrices<T>&,                          \
                                   const std::function<Tensor<T>(const Tensor<T>&)>&, const Tensor<T>*);

HYPERLOOP_INSTANTIATE_HC(float)
HYPERLOOP_INSTANTIATE_HC(double)

}  // namespace hyperloop
