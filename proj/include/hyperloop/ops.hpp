#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hyperloop/tensor.hpp"

namespace hyperloop {

// Elementwise arithmetic with numpy-style broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& x, T s) { return scale(x, s); }
template <typename T> Tensor<T> operator*(T s, const Tensor<T>& x) { return scale(x, s); }
template <typename T> Tensor<T> operator-(const Tensor<T>& x) { return scale(x, T(-1)); }

/// Matrix product over the last two axes.
///
/// A rank-2 right operand acts as a shared linear map over every leading index of
/// `a`. Otherwise both operands carry batch axes, which must be equal or absent on
/// one side.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
/// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Merges axes [from_axis, rank) into one.
template <typename T> Tensor<T> flatten(const Tensor<T>& x, int from_axis = 0);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim = false);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim = false);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, Index start, Index stop);

template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> silu(const Tensor<T>& x);
template <typename T> Tensor<T> exp(const Tensor<T>& x);

/// Max-subtracted softmax along `axis`.
template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis = -1);
/// x / sqrt(mean(x^2) + eps) * weight over the last axis.
template <typename T> Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps);

/// Mean token cross-entropy. `logits` is [..., V]; one target per leading index.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets);

/// Row gather from a [V, C] table; output shape is `prefix + [C]`.
template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> tokens, Shape prefix);

/// Rotary position embedding on [..., T, H, D] with absolute positions 0..T-1
/// along axis -3. Adjacent pairs (2i, 2i+1) rotate by pos * base^(-2i/D).
template <typename T> Tensor<T> rope(const Tensor<T>& x, double base);

/// Causal scaled dot-product attention on [..., T, H, D] inputs.
template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v);

/// Sinkhorn-Knopp on the trailing n x n matrices: exp(m - max(m)), then `iters`
/// rounds of column normalization followed by row normalization.
template <typename T> Tensor<T> sinkhorn(const Tensor<T>& logits, int iters = 20);

}  // namespace hyperloop
