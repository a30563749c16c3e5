#include "hyperloop/nn.hpp"

#include <cmath>

#include "hyperloop/error.hpp"

namespace hyperloop {

Index ffn_dim(Index model_dim, double mult, Index multiple_of) {
  const auto raw = static_cast<Index>(std::llround(mult * static_cast<double>(model_dim)));
  if (multiple_of <= 1) return raw;
  return ((raw + multiple_of - 1) / multiple_of) * multiple_of;
}

namespace {

template <typename T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, const std::string& name, const LinearObserver<T>* observer) {
  if (observer && *observer) (*observer)(name, x);
  return matmul(x, w);
}

}  // namespace

template <typename T>
Tensor<T> attention(const Tensor<T>& x, const AttentionParams<T>& p, const AttentionShape& shape,
                    const LinearObserver<T>* observer) {
  if (x.rank() < 2) throw DimensionError("attention: expects [T, C] or [B, T, C], got " + to_string(x.shape()));
  const Index t_len = x.dim(-2);
  const Index c = x.dim(-1);
  if (t_len == 0) throw ContractError("attention: sequence length must be >= 1");
  if (shape.heads <= 0 || c % shape.heads != 0) {
    throw DimensionError("attention: model dim " + std::to_string(c) + " not divisible by " +
                         std::to_string(shape.heads) + " heads");
  }
  const Index head_dim = c / shape.heads;

  const Tensor<T> xn = rmsnorm(x, p.norm, static_cast<T>(kNormEps));
  Shape split = x.shape();
  split.back() = shape.heads;
  split.push_back(head_dim);

  auto q = rope(reshape(project(xn, p.wq, p.prefix + ".wq", observer), split), shape.rope_base);
  auto k = rope(reshape(project(xn, p.wk, p.prefix + ".wk", observer), split), shape.rope_base);
  auto v = reshape(project(xn, p.wv, p.prefix + ".wv", observer), split);
  auto mixed = reshape(causal_attention(q, k, v), x.shape());
  return project(mixed, p.wo, p.prefix + ".wo", observer);
}

template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const MlpParams<T>& p, const LinearObserver<T>* observer) {
  const Tensor<T> xn = rmsnorm(x, p.norm, static_cast<T>(kNormEps));
  auto gate = silu(project(xn, p.w_gate, p.prefix + ".w_gate", observer));
  auto up = project(xn, p.w_up, p.prefix + ".w_up", observer);
  return project(mul(gate, up), p.w_down, p.prefix + ".w_down", observer);
}

template <typename T>
Tensor<T> transformer_layer(const Tensor<T>& x, const AttentionParams<T>& attn, const MlpParams<T>& ffn,
                            const AttentionShape& shape, const LinearObserver<T>* observer) {
  auto h = add(x, attention(x, attn, shape, observer));
  return add(h, mlp(h, ffn, observer));
}

template <typename T>
Tensor<T> lm_head(const Tensor<T>& x, const EmbeddingParams<T>& emb) {
  return matmul(rmsnorm(x, emb.final_norm, static_cast<T>(kNormEps)), transpose(emb.unembed));
}

#define HYPERLOOP_INSTANTIATE_NN(T)                                                                      \
  template Tensor<T> attention(const Tensor<T>&, const AttentionParams<T>&, const AttentionShape&,        \
                               const LinearObserver<T>*);                                                \
  template Tensor<T> mlp(const Tensor<T>&, const MlpParams<T>&, const LinearObserver<T>*);               \
  template Tensor<T> transformer_layer(const Tensor<T>&, const AttentionParams<T>&, const MlpParams<T>&, \
                                       const AttentionShape&, const LinearObserver<T>*);                 \
  template Tensor<T> lm_head(const Tensor<T>&, const EmbeddingParams<T>&);

HYPERLOOP_INSTANTIATE_NN(float)
HYPERLOOP_INSTANTIATE_NN(double)

}  // namespace hyperloop
