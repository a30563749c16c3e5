#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "hyperloop/tensor.hpp"

namespace hyperloop {

enum class HresMode { sinkhorn, diagonal, identity };

std::string_view to_string(HresMode mode);
HresMode parse_hres_mode(std::string_view text);

inline constexpr int kSinkhornIters = 20;

/// Learned read/write/mix maps for one hyper-connection site.
/// Projections are stored [rows, n*C] and applied to the normalized flattened stream z.
template <typename T>
struct HyperConnectionParams {
  std::string prefix;
  HresMode mode = HresMode::diagonal;
  Index streams = 1;
  Index dim = 0;
  Tensor<T> w_pre, b_pre, alpha_pre;
  Tensor<T> w_post, b_post, alpha_post;
  Tensor<T> w_res, b_res, alpha_res;  // empty in identity mode
  Tensor<T> norm;                     // [n*C]
  Tensor<T> loop_embedding;           // [C], empty unless the site ends a loop

  bool has_loop_embedding() const { return loop_embedding.numel() > 0; }
  std::vector<std::pair<std::string, Tensor<T>>> named_parameters() const;
};

/// Builds a site with the default initialization: zero projections, unit alphas,
/// reads averaging the streams, unit writes and H_res close to the identity.
template <typename T>
HyperConnectionParams<T> init_hyperconn(std::string prefix, HresMode mode, Index streams, Index dim,
                                        bool loop_embedding);

/// Outer residual stream y of shape [..., T, n, C].
template <typename T>
struct StreamState {
  Tensor<T> y;
  Index streams() const { return y.dim(-2); }
};

/// Per-token maps: pre [..., T, 1, n], post [..., T, n, 1], res [..., T, n, n].
template <typename T>
struct MixMatrices {
  Tensor<T> pre, post, res;
};

/// Copies x [..., T, C] into n identical streams.
template <typename T>
StreamState<T> expand(const Tensor<T>& x, Index streams);

/// Mean over the stream axis.
template <typename T>
Tensor<T> merge(const StreamState<T>& state);

template <typename T>
Tensor<T> sinkhorn_normalize(const Tensor<T>& logits, int iters = kSinkhornIters);

template <typename T>
MixMatrices<T> compute_mix(const StreamState<T>& state, const HyperConnectionParams<T>& p);

/// Fixed maps used to check that hyper-connections reduce to a plain residual:
/// pre = 1/n, post = 1, res = I.
template <typename T>
MixMatrices<T> identity_mix(const StreamState<T>& state);

/// H_pre y: [..., T, C].
template <typename T>
Tensor<T> hc_read(const StreamState<T>& state, const MixMatrices<T>& mix);

/// H_res y + H_post (f + e). `loop_embedding` may be null.
template <typename T>
StreamState<T> hc_write(const StreamState<T>& state, const MixMatrices<T>& mix, const Tensor<T>& f,
                        const Tensor<T>* loop_embedding);

template <typename T>
StreamState<T> hc_apply(const StreamState<T>& state, const MixMatrices<T>& mix,
                        const std::function<Tensor<T>(const Tensor<T>&)>& sublayer,
                        const Tensor<T>* loop_embedding);

}  // namespace hyperloop
