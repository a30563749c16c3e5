#pragma once

#include <functional>
#include <string>

#include "hyperloop/ops.hpp"
#include "hyperloop/tensor.hpp"

namespace hyperloop {

inline constexpr double kNormEps = 1e-5;

/// Receives the input activations of every projection just before it is applied.
/// Used for calibration statistics; `weight` is the parameter name.
template <typename T>
using LinearObserver = std::function<void(const std::string& weight, const Tensor<T>& input)>;

/// Pre-norm multi-head attention weights. Projections are [C, C] and applied as x * W.
template <typename T>
struct AttentionParams {
  std::string prefix;  // parameter-name prefix, e.g. "middle.0.attn"
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> norm;
};

/// SwiGLU MLP: w_gate and w_up are [C, F], w_down is [F, C].
template <typename T>
struct MlpParams {
  std::string prefix;
  Tensor<T> w_gate, w_up, w_down;
  Tensor<T> norm;
};

/// Untied token embedding and unembedding, both [V, C].
template <typename T>
struct EmbeddingParams {
  Tensor<T> tokens;
  Tensor<T> unembed;
  Tensor<T> final_norm;
};

struct AttentionShape {
  int heads = 16;
  double rope_base = 10000.0;
};

/// round(mult * C), rounded up to a multiple of `multiple_of`.
Index ffn_dim(Index model_dim, double mult, Index multiple_of);

/// Causal attention sublayer output for x of shape [T, C] or [B, T, C], without the residual add.
template <typename T>
Tensor<T> attention(const Tensor<T>& x, const AttentionParams<T>& p, const AttentionShape& shape,
                    const LinearObserver<T>* observer = nullptr);

/// W_down (silu(W_gate x̂) * W_up x̂) with x̂ = rmsnorm(x).
template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const MlpParams<T>& p, const LinearObserver<T>* observer = nullptr);

/// x + attn(x), then + mlp(.) of that.
template <typename T>
Tensor<T> transformer_layer(const Tensor<T>& x, const AttentionParams<T>& attn, const MlpParams<T>& ffn,
                            const AttentionShape& shape, const LinearObserver<T>* observer = nullptr);

/// Final RMSNorm followed by the unembedding: [..., C] -> [..., V].
template <typename T>
Tensor<T> lm_head(const Tensor<T>& x, const EmbeddingParams<T>& emb);

}  // namespace hyperloop
