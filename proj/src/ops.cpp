#include "hyperloop/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "hyperloop/error.hpp"

namespace hyperloop {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

int normalize_axis(int axis, int rank, const char* op) {
  const int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                         std::to_string(rank));
  }
  return a;
}

/// Builds the output tensor and, when gradients are live, its graph node.
template <typename T, typename Backward>
Tensor<T> make_result(Shape shape, std::vector<T> data, std::vector<ImplPtr<T>> inputs, const char* op,
                      Backward&& backward) {
  auto out = std::make_shared<TensorImpl<T>>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  const bool track = grad_enabled() &&
                     std::any_of(inputs.begin(), inputs.end(), [](const ImplPtr<T>& p) { return p->requires_grad; });
  if (track) {
    out->requires_grad = true;
    auto node = std::make_shared<GraphNode<T>>();
    node->inputs = std::move(inputs);
    node->op = op;
    node->backward = std::forward<Backward>(backward);
    out->node = std::move(node);
  }
  return Tensor<T>(std::move(out));
}

/// outer x axis x inner decomposition of a shape around one axis.
struct AxisSplit {
  Index outer = 1;
  Index extent = 1;
  Index inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.extent = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// ---------------------------------------------------------------------------
// Broadcasting

struct BroadcastPlan {
  Shape out;
  std::vector<Index> a_stride;
  std::vector<Index> b_stride;
};

std::vector<Index> contiguous_strides(const Shape& s) {
  std::vector<Index> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] * s[static_cast<std::size_t>(i) + 1];
  }
  return st;
}

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  BroadcastPlan p;
  p.out.assign(r, 1);
  p.a_stride.assign(r, 0);
  p.b_stride.assign(r, 0);
  const auto as = contiguous_strides(a);
  const auto bs = contiguous_strides(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ia = i + a.size();  // index from the right
    const bool has_a = ia >= r;
    const bool has_b = i + b.size() >= r;
    const Index da = has_a ? a[ia - r] : 1;
    const Index db = has_b ? b[i + b.size() - r] : 1;
    if (da != db && da != 1 && db != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast shapes " + to_string(a) + " and " + to_string(b));
    }
    p.out[i] = std::max(da, db);
    if (has_a && da != 1) p.a_stride[i] = as[ia - r];
    if (has_b && db != 1) p.b_stride[i] = bs[i + b.size() - r];
  }
  return p;
}

template <typename F>
void for_each_broadcast(const BroadcastPlan& p, F&& f) {
  const std::size_t r = p.out.size();
  const Index n = numel(p.out);
  std::vector<Index> idx(r, 0);
  Index ao = 0;
  Index bo = 0;
  for (Index i = 0; i < n; ++i) {
    f(i, ao, bo);
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      ao += p.a_stride[du];
      bo += p.b_stride[du];
      if (idx[du] < p.out[du]) break;
      ao -= p.a_stride[du] * p.out[du];
      bo -= p.b_stride[du] * p.out[du];
      idx[du] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, BinOp kind, const char* name) {
  const auto ai = a.impl();
  const auto bi = b.impl();
  if (!ai || !bi) throw StateError(std::string(name) + ": undefined operand");
  const T* ad = ai->data.data();
  const T* bd = bi->data.data();

  auto apply = [kind](T x, T y) {
    switch (kind) {
      case BinOp::kAdd: return x + y;
      case BinOp::kSub: return x - y;
      case BinOp::kMul: return x * y;
    }
    return T(0);
  };

  if (ai->shape == bi->shape) {
    std::vector<T> out(ai->data.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply(ad[i], bd[i]);
    return make_result<T>(ai->shape, std::move(out), {ai, bi}, name, [ai, bi, kind](TensorImpl<T>& o) {
      const auto& g = o.grad;
      if (ai->requires_grad) {
        auto& ga = ai->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += kind == BinOp::kMul ? g[i] * bi->data[i] : g[i];
      }
      if (bi->requires_grad) {
        auto& gb = bi->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) {
          gb[i] += kind == BinOp::kMul ? g[i] * ai->data[i] : (kind == BinOp::kSub ? -g[i] : g[i]);
        }
      }
    });
  }

  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(ai->shape, bi->shape, name));
  std::vector<T> out(static_cast<std::size_t>(numel(plan->out)));
  for_each_broadcast(*plan, [&](Index i, Index ao, Index bo) { out[static_cast<std::size_t>(i)] = apply(ad[ao], bd[bo]); });
  return make_result<T>(plan->out, std::move(out), {ai, bi}, name, [ai, bi, kind, plan](TensorImpl<T>& o) {
    const auto& g = o.grad;
    T* ga = ai->requires_grad ? ai->grad_buffer().data() : nullptr;
    T* gb = bi->requires_grad ? bi->grad_buffer().data() : nullptr;
    for_each_broadcast(*plan, [&](Index i, Index ao, Index bo) {
      const T gi = g[static_cast<std::size_t>(i)];
      if (ga) ga[ao] += kind == BinOp::kMul ? gi * bi->data[static_cast<std::size_t>(bo)] : gi;
      if (gb) {
        gb[bo] += kind == BinOp::kMul ? gi * ai->data[static_cast<std::size_t>(ao)] : (kind == BinOp::kSub ? -gi : gi);
      }
    });
  });
}

/// Elementwise unary op; `deriv(x, y)` returns dy/dx.
template <typename T, typename Fwd, typename Deriv>
Tensor<T> unary(const Tensor<T>& x, const char* name, Fwd fwd, Deriv deriv) {
  const auto xi = x.impl();
  if (!xi) throw StateError(std::string(name) + ": undefined operand");
  std::vector<T> out(xi->data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(xi->data[i]);
  return make_result<T>(xi->shape, std::move(out), {xi}, name, [xi, deriv](TensorImpl<T>& o) {
    auto& gx = xi->grad_buffer();
    for (std::size_t i = 0; i < o.grad.size(); ++i) gx[i] += o.grad[i] * deriv(xi->data[i], o.data[i]);
  });
}

template <typename T>
T stable_sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kAdd, "add");
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kSub, "sub");
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, BinOp::kMul, "mul");
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(x, "scale", [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary(x, "add_scalar", [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(x, "sigmoid", [](T v) { return stable_sigmoid(v); }, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& x) {
  return unary(
      x, "silu", [](T v) { return v * stable_sigmoid(v); },
      [](T v, T) {
        const T s = stable_sigmoid(v);
        return s * (T(1) + v * (T(1) - s));
      });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
  return unary(x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const auto ai = a.impl();
  const auto bi = b.impl();
  const Shape& as = ai->shape;
  const Shape& bs = bi->shape;
  auto mismatch = [&](const char* what) {
    return DimensionError(std::string("matmul: ") + what + ": " + to_string(as) + " x " + to_string(bs));
  };
  if (as.empty() || bs.size() < 2) throw mismatch("operand rank too small");

  const Index k = as.back();
  const Index n = bs.back();
  if (bs[bs.size() - 2] != k) throw mismatch("inner dimensions differ");

  if (bs.size() == 2) {
    // Shared linear map over all leading indices of a.
    const Index m = numel(as) / std::max<Index>(k, 1);
    Shape out_shape = as;
    out_shape.back() = n;
    std::vector<T> out(static_cast<std::size_t>(m * n));
    MapR<T>(out.data(), m, n).noalias() = CMapR<T>(ai->data.data(), m, k) * CMapR<T>(bi->data.data(), k, n);
    return make_result<T>(std::move(out_shape), std::move(out), {ai, bi}, "matmul", [ai, bi, m, k, n](TensorImpl<T>& o) {
      CMapR<T> g(o.grad.data(), m, n);
      if (ai->requires_grad) {
        MapR<T>(ai->grad_buffer().data(), m, k).noalias() += g * CMapR<T>(bi->data.data(), k, n).transpose();
      }
      if (bi->requires_grad) {
        MapR<T>(bi->grad_buffer().data(), k, n).noalias() += CMapR<T>(ai->data.data(), m, k).transpose() * g;
      }
    });
  }

  if (as.size() < 2) throw mismatch("operand rank too small");
  const Shape a_batch(as.begin(), as.end() - 2);
  const Shape b_batch(bs.begin(), bs.end() - 2);
  if (!a_batch.empty() && !b_batch.empty() && a_batch != b_batch) throw mismatch("batch dimensions differ");
  const Shape& batch = a_batch.empty() ? b_batch : a_batch;
  const Index nb = numel(batch);
  const Index m = as[as.size() - 2];
  const Index a_step = a_batch.empty() ? 0 : m * k;
  const Index b_step = b_batch.empty() ? 0 : k * n;
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(nb * m * n));
  for (Index i = 0; i < nb; ++i) {
    MapR<T>(out.data() + i * m * n, m, n).noalias() =
        CMapR<T>(ai->data.data() + i * a_step, m, k) * CMapR<T>(bi->data.data() + i * b_step, k, n);
  }
  return make_result<T>(std::move(out_shape), std::move(out), {ai, bi}, "bmm",
                        [ai, bi, nb, m, k, n, a_step, b_step](TensorImpl<T>& o) {
                          T* ga = ai->requires_grad ? ai->grad_buffer().data() : nullptr;
                          T* gb = bi->requires_grad ? bi->grad_buffer().data() : nullptr;
                          for (Index i = 0; i < nb; ++i) {
                            CMapR<T> g(o.grad.data() + i * m * n, m, n);
                            if (ga) {
                              MapR<T>(ga + i * a_step, m, k).noalias() +=
                                  g * CMapR<T>(bi->data.data() + i * b_step, k, n).transpose();
                            }
                            if (gb) {
                              MapR<T>(gb + i * b_step, k, n).noalias() +=
                                  CMapR<T>(ai->data.data() + i * a_step, m, k).transpose() * g;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  const auto xi = x.impl();
  if (xi->shape.size() < 2) throw DimensionError("transpose: needs rank >= 2, got " + to_string(xi->shape));
  const Index r = xi->shape[xi->shape.size() - 2];
  const Index c = xi->shape.back();
  const Index nb = numel(xi->shape) / std::max<Index>(r * c, 1);
  Shape out_shape = xi->shape;
  std::swap(out_shape[out_shape.size() - 2], out_shape.back());
  std::vector<T> out(xi->data.size());
  for (Index b = 0; b < nb; ++b) {
    MapR<T>(out.data() + b * r * c, c, r) = CMapR<T>(xi->data.data() + b * r * c, r, c).transpose();
  }
  return make_result<T>(std::move(out_shape), std::move(out), {xi}, "transpose", [xi, nb, r, c](TensorImpl<T>& o) {
    auto& g = xi->grad_buffer();
    for (Index b = 0; b < nb; ++b) {
      MapR<T>(g.data() + b * r * c, r, c) += CMapR<T>(o.grad.data() + b * r * c, c, r).transpose();
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  const auto xi = x.impl();
  if (numel(shape) != numel(xi->shape)) {
    throw DimensionError("reshape: " + to_string(xi->shape) + " cannot become " + to_string(shape));
  }
  return make_result<T>(std::move(shape), xi->data, {xi}, "reshape", [xi](TensorImpl<T>& o) {
    auto& g = xi->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& x, int from_axis) {
  const Shape& s = x.shape();
  if (s.empty()) return reshape(x, {1});
  const int a = normalize_axis(from_axis, static_cast<int>(s.size()), "flatten");
  Shape out(s.begin(), s.begin() + a);
  Index tail = 1;
  for (std::size_t i = static_cast<std::size_t>(a); i < s.size(); ++i) tail *= s[i];
  out.push_back(tail);
  return reshape(x, std::move(out));
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto xi = x.impl();
  T total = T(0);
  for (T v : xi->data) total += v;
  return make_result<T>({}, {total}, {xi}, "sum", [xi](TensorImpl<T>& o) {
    auto& g = xi->grad_buffer();
    for (auto& v : g) v += o.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  const Index n = x.numel();
  if (n == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), T(1) / static_cast<T>(n));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x, int axis, bool keepdim) {
  const auto xi = x.impl();
  const int a = normalize_axis(axis, static_cast<int>(xi->shape.size()), "sum");
  const AxisSplit s = split_at(xi->shape, a);
  Shape out_shape = xi->shape;
  if (keepdim) {
    out_shape[static_cast<std::size_t>(a)] = 1;
  } else {
    out_shape.erase(out_shape.begin() + a);
  }
  std::vector<T> out(static_cast<std::size_t>(s.outer * s.inner), T(0));
  for (Index o = 0; o < s.outer; ++o) {
    for (Index e = 0; e < s.extent; ++e) {
      const T* src = xi->data.data() + (o * s.extent + e) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (Index i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  }
  return make_result<T>(std::move(out_shape), std::move(out), {xi}, "sum_axis", [xi, s](TensorImpl<T>& o) {
    auto& g = xi->grad_buffer();
    for (Index ou = 0; ou < s.outer; ++ou) {
      for (Index e = 0; e < s.extent; ++e) {
        T* dst = g.data() + (ou * s.extent + e) * s.inner;
        const T* src = o.grad.data() + ou * s.inner;
        for (Index i = 0; i < s.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis, bool keepdim) {
  const Index extent = x.dim(axis);
  if (extent == 0) throw ContractError("mean over an empty axis");
  return scale(sum(x, axis, keepdim), T(1) / static_cast<T>(extent));
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& ref = parts.front().shape();
  const int a = normalize_axis(axis, static_cast<int>(ref.size()), "concat");
  std::vector<ImplPtr<T>> inputs;
  std::vector<Index> extents;
  Index total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == ref.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (static_cast<int>(i) != a && s[i] != ref[i]) ok = false;
    }
    if (!ok) throw DimensionError("concat: shape " + to_string(s) + " incompatible with " + to_string(ref));
    inputs.push_back(p.impl());
    extents.push_back(s[static_cast<std::size_t>(a)]);
    total += extents.back();
  }
  const AxisSplit s = split_at(ref, a);
  Shape out_shape = ref;
  out_shape[static_cast<std::size_t>(a)] = total;
  std::vector<T> out(static_cast<std::size_t>(s.outer * total * s.inner));
  Index offset = 0;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    const Index w = extents[p] * s.inner;
    for (Index o = 0; o < s.outer; ++o) {
      std::copy_n(inputs[p]->data.data() + o * w, w, out.data() + (o * total + offset) * s.inner);
    }
    offset += extents[p];
  }
  return make_result<T>(std::move(out_shape), std::move(out), inputs, "concat",
                        [inputs, extents, s, total](TensorImpl<T>& o) {
                          Index off = 0;
                          for (std::size_t p = 0; p < inputs.size(); ++p) {
                            const Index w = extents[p] * s.inner;
                            if (inputs[p]->requires_grad) {
                              auto& g = inputs[p]->grad_buffer();
                              for (Index ou = 0; ou < s.outer; ++ou) {
                                const T* src = o.grad.data() + (ou * total + off) * s.inner;
                                T* dst = g.data() + ou * w;
                                for (Index i = 0; i < w; ++i) dst[i] += src[i];
                              }
                            }
                            off += extents[p];
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, Index start, Index stop) {
  const auto xi = x.impl();
  const int a = normalize_axis(axis, static_cast<int>(xi->shape.size()), "slice");
  const AxisSplit s = split_at(xi->shape, a);
  if (start < 0 || stop > s.extent || start > stop) {
    throw DimensionError("slice: range [" + std::to_string(start) + "," + std::to_string(stop) +
                         ") invalid for axis of extent " + std::to_string(s.extent));
  }
  const Index w = stop - start;
  Shape out_shape = xi->shape;
  out_shape[static_cast<std::size_t>(a)] = w;
  std::vector<T> out(static_cast<std::size_t>(s.outer * w * s.inner));
  for (Index o = 0; o < s.outer; ++o) {
    std::copy_n(xi->data.data() + (o * s.extent + start) * s.inner, w * s.inner, out.data() + o * w * s.inner);
  }
  return make_result<T>(std::move(out_shape), std::move(out), {xi}, "slice", [xi, s, start, w](TensorImpl<T>& o) {
    auto& g = xi->grad_buffer();
    for (Index ou = 0; ou < s.outer; ++ou) {
      const T* src = o.grad.data() + ou * w * s.inner;
      T* dst = g.data() + (ou * s.extent + start) * s.inner;
      for (Index i = 0; i < w * s.inner; ++i) dst[i] += src[i];
    }
  });
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const auto xi = x.impl();
  const int a = normalize_axis(axis, static_cast<int>(xi->shape.size()), "softmax");
  const AxisSplit s = split_at(xi->shape, a);
  std::vector<T> out(xi->data.size());
  for (Index o = 0; o < s.outer; ++o) {
    for (Index i = 0; i < s.inner; ++i) {
      const Index base = o * s.extent * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (Index e = 0; e < s.extent; ++e) mx = std::max(mx, xi->data[static_cast<std::size_t>(base + e * s.inner)]);
      T z = T(0);
      for (Index e = 0; e < s.extent; ++e) {
        const auto idx = static_cast<std::size_t>(base + e * s.inner);
        out[idx] = std::exp(xi->data[idx] - mx);
        z += out[idx];
      }
      for (Index e = 0; e < s.extent; ++e) out[static_cast<std::size_t>(base + e * s.inner)] /= z;
    }
  }
  return make_result<T>(xi->shape, std::move(out), {xi}, "softmax", [xi, s](TensorImpl<T>& o) {
    auto& g = xi->grad_buffer();
    for (Index ou = 0; ou < s.outer; ++ou) {
      for (Index i = 0; i < s.inner; ++i) {
        const Index base = ou * s.extent * s.inner + i;
        T dot = T(0);
        for (Index e = 0; e < s.extent; ++e) {
          const auto idx = static_cast<std::size_t>(base + e * s.inner);
          dot += o.grad[idx] * o.data[idx];
        }
        for (Index e = 0; e < s.extent; ++e) {
          const auto idx = static_cast<std::size_t>(base + e * s.inner);
          g[idx] += o.data[idx] * (o.grad[idx] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> rmsnorm(const Tensor<T>& x, const Tensor<T>& weight, T eps) {
  const auto xi = x.impl();
  const auto wi = weight.impl();
  if (xi->shape.empty() || wi->shape.size() != 1 || wi->shape[0] != xi->shape.back()) {
    throw DimensionError("rmsnorm: weight " + to_string(wi->shape) + " does not match last axis of " +
                         to_string(xi->shape));
  }
  const Index c = xi->shape.back();
  const Index rows = numel(xi->shape) / std::max<Index>(c, 1);
  std::vector<T> out(xi->data.size());
  auto inv = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
  for (Index r = 0; r < rows; ++r) {
    const T* xr = xi->data.data() + r * c;
    T ss = T(0);
    for (Index j = 0; j < c; ++j) ss += xr[j] * xr[j];
    const T inv_rms = T(1) / std::sqrt(ss / static_cast<T>(c) + eps);
    (*inv)[static_cast<std::size_t>(r)] = inv_rms;
    for (Index j = 0; j < c; ++j) out[static_cast<std::size_t>(r * c + j)] = xr[j] * inv_rms * wi->data[static_cast<std::size_t>(j)];
  }
  return make_result<T>(xi->shape, std::move(out), {xi, wi}, "rmsnorm", [xi, wi, inv, rows, c](TensorImpl<T>& o) {
    T* gx = xi->requires_grad ? xi->grad_buffer().data() : nullptr;
    T* gw = wi->requires_grad ? wi->grad_buffer().data() : nullptr;
    for (Index r = 0; r < rows; ++r) {
      const T* xr = xi->data.data() + r * c;
      const T* gr = o.grad.data() + r * c;
      const T ir = (*inv)[static_cast<std::size_t>(r)];
      T dot = T(0);  // sum_j g_j w_j xhat_j
      for (Index j = 0; j < c; ++j) {
        const T xh = xr[j] * ir;
        if (gw) gw[j] += gr[j] * xh;
        dot += gr[j] * wi->data[static_cast<std::size_t>(j)] * xh;
      }
      if (gx) {
        const T m = dot / static_cast<T>(c);
        for (Index j = 0; j < c; ++j) {
          gx[r * c + j] += ir * (gr[j] * wi->data[static_cast<std::size_t>(j)] - xr[j] * ir * m);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const auto li = logits.impl();
  if (li->shape.empty()) throw DimensionError("cross_entropy: logits must have a class axis");
  const Index v = li->shape.back();
  const Index n = numel(li->shape) / std::max<Index>(v, 1);
  if (static_cast<Index>(targets.size()) != n) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         to_string(li->shape));
  }
  if (n == 0) throw ContractError("cross_entropy over zero tokens");
  auto probs = std::make_shared<std::vector<T>>(li->data.size());
  auto tgt = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  double total = 0.0;
  for (Index r = 0; r < n; ++r) {
    const std::int32_t t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= v) throw InputError("cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(v) + ")");
    const T* row = li->data.data() + r * v;
    T* pr = probs->data() + r * v;
    const T mx = *std::max_element(row, row + v);
    T z = T(0);
    for (Index j = 0; j < v; ++j) {
      pr[j] = std::exp(row[j] - mx);
      z += pr[j];
    }
    for (Index j = 0; j < v; ++j) pr[j] /= z;
    total += static_cast<double>(std::log(z) + mx - row[t]);
  }
  const T loss = static_cast<T>(total / static_cast<double>(n));
  return make_result<T>({}, {loss}, {li}, "cross_entropy", [li, probs, tgt, n, v](TensorImpl<T>& o) {
    auto& g = li->grad_buffer();
    const T s = o.grad[0] / static_cast<T>(n);
    for (Index r = 0; r < n; ++r) {
      for (Index j = 0; j < v; ++j) g[static_cast<std::size_t>(r * v + j)] += s * (*probs)[static_cast<std::size_t>(r * v + j)];
      g[static_cast<std::size_t>(r * v + (*tgt)[static_cast<std::size_t>(r)])] -= s;
    }
  });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::int32_t> tokens, Shape prefix) {
  const auto ti = table.impl();
  if (ti->shape.size() != 2) throw DimensionError("embedding: table must be [V,C], got " + to_string(ti->shape));
  if (numel(prefix) != static_cast<Index>(tokens.size())) {
    throw DimensionError("embedding: prefix " + to_string(prefix) + " does not hold " + std::to_string(tokens.size()) +
                         " tokens");
  }
  const Index v = ti->shape[0];
  const Index c = ti->shape[1];
  auto ids = std::make_shared<std::vector<std::int32_t>>(tokens.begin(), tokens.end());
  std::vector<T> out(tokens.size() * static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const std::int32_t t = tokens[i];
    if (t < 0 || t >= v) {
      throw InputError("token id " + std::to_string(t) + " outside vocabulary of size " + std::to_string(v));
    }
    std::copy_n(ti->data.data() + t * c, c, out.data() + static_cast<Index>(i) * c);
  }
  Shape out_shape = std::move(prefix);
  out_shape.push_back(c);
  return make_result<T>(std::move(out_shape), std::move(out), {ti}, "embedding", [ti, ids, c](TensorImpl<T>& o) {
    auto& g = ti->grad_buffer();
    for (std::size_t i = 0; i < ids->size(); ++i) {
      T* dst = g.data() + (*ids)[i] * c;
      const T* src = o.grad.data() + static_cast<Index>(i) * c;
      for (Index j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

template <typename T>
Tensor<T> rope(const Tensor<T>& x, double base) {
  const auto xi = x.impl();
  const Shape& s = xi->shape;
  if (s.size() < 3 || s.back() % 2 != 0) {
    throw DimensionError("rope: expects [..., T, H, D] with even D, got " + to_string(s));
  }
  const Index d = s.back();
  const Index h = s[s.size() - 2];
  const Index t_len = s[s.size() - 3];
  const Index nb = numel(s) / std::max<Index>(t_len * h * d, 1);
  const Index half = d / 2;
  auto cs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(t_len * half));
  auto sn = std::make_shared<std::vector<T>>(static_cast<std::size_t>(t_len * half));
  for (Index p = 0; p < t_len; ++p) {
    for (Index i = 0; i < half; ++i) {
      const double theta = static_cast<double>(p) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      (*cs)[static_cast<std::size_t>(p * half + i)] = static_cast<T>(std::cos(theta));
      (*sn)[static_cast<std::size_t>(p * half + i)] = static_cast<T>(std::sin(theta));
    }
  }
  auto rotate = [=](const T* src, T* dst, bool inverse, bool accumulate) {
    for (Index b = 0; b < nb; ++b) {
      for (Index p = 0; p < t_len; ++p) {
        for (Index hh = 0; hh < h; ++hh) {
          const Index off = ((b * t_len + p) * h + hh) * d;
          for (Index i = 0; i < half; ++i) {
            const T c = (*cs)[static_cast<std::size_t>(p * half + i)];
            const T sv = inverse ? -(*sn)[static_cast<std::size_t>(p * half + i)] : (*sn)[static_cast<std::size_t>(p * half + i)];
            const T x0 = src[off + 2 * i];
            const T x1 = src[off + 2 * i + 1];
            const T y0 = x0 * c - x1 * sv;
            const T y1 = x0 * sv + x1 * c;
            if (accumulate) {
              dst[off + 2 * i] += y0;
              dst[off + 2 * i + 1] += y1;
            } else {
              dst[off + 2 * i] = y0;
              dst[off + 2 * i + 1] = y1;
            }
          }
        }
      }
    }
  };
  std::vector<T> out(xi->data.size());
  rotate(xi->data.data(), out.data(), false, false);
  return make_result<T>(s, std::move(out), {xi}, "rope", [xi, rotate](TensorImpl<T>& o) {
    rotate(o.grad.data(), xi->grad_buffer().data(), true, true);
  });
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  const auto qi = q.impl();
  const auto ki = k.impl();
  const auto vi = v.impl();
  const Shape& s = qi->shape;
  if (s.size() < 3 || ki->shape != s || vi->shape != s) {
    throw DimensionError("causal_attention: q/k/v must share a [..., T, H, D] shape, got " + to_string(s) + ", " +
                         to_string(ki->shape) + ", " + to_string(vi->shape));
  }
  const Index d = s.back();
  const Index h = s[s.size() - 2];
  const Index t_len = s[s.size() - 3];
  if (t_len == 0) throw ContractError("causal_attention: sequence length must be >= 1");
  const Index nb = numel(s) / (t_len * h * d);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(d));
  const Index row_stride = h * d;

  // Per (batch, head): gather [T, D] matrices with a strided map.
  using Stride = Eigen::Stride<Eigen::Dynamic, 1>;
  using CStrided = Eigen::Map<const MatR<T>, 0, Stride>;
  using Strided = Eigen::Map<MatR<T>, 0, Stride>;

  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(nb * h * t_len * t_len));
  std::vector<T> out(qi->data.size());
  MatR<T> scores(t_len, t_len);
  for (Index b = 0; b < nb; ++b) {
    for (Index hh = 0; hh < h; ++hh) {
      const Index off = b * t_len * row_stride + hh * d;
      CStrided Q(qi->data.data() + off, t_len, d, Stride(row_stride, 1));
      CStrided K(ki->data.data() + off, t_len, d, Stride(row_stride, 1));
      CStrided V(vi->data.data() + off, t_len, d, Stride(row_stride, 1));
      scores.noalias() = (Q * K.transpose()) * inv_sqrt;
      MapR<T> P(probs->data() + (b * h + hh) * t_len * t_len, t_len, t_len);
      for (Index i = 0; i < t_len; ++i) {
        T mx = scores(i, 0);
        for (Index j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        T z = T(0);
        for (Index j = 0; j <= i; ++j) {
          P(i, j) = std::exp(scores(i, j) - mx);
          z += P(i, j);
        }
        for (Index j = 0; j <= i; ++j) P(i, j) /= z;
        for (Index j = i + 1; j < t_len; ++j) P(i, j) = T(0);
      }
      Strided O(out.data() + off, t_len, d, Stride(row_stride, 1));
      O.noalias() = P * V;
    }
  }
  return make_result<T>(s, std::move(out), {qi, ki, vi}, "causal_attention",
                        [qi, ki, vi, probs, nb, h, t_len, d, row_stride, inv_sqrt](TensorImpl<T>& o) {
                          T* gq = qi->requires_grad ? qi->grad_buffer().data() : nullptr;
                          T* gk = ki->requires_grad ? ki->grad_buffer().data() : nullptr;
                          T* gv = vi->requires_grad ? vi->grad_buffer().data() : nullptr;
                          MatR<T> dp(t_len, t_len);
                          MatR<T> ds(t_len, t_len);
                          for (Index b = 0; b < nb; ++b) {
                            for (Index hh = 0; hh < h; ++hh) {
                              const Index off = b * t_len * row_stride + hh * d;
                              const Stride st(row_stride, 1);
                              CStrided Q(qi->data.data() + off, t_len, d, st);
                              CStrided K(ki->data.data() + off, t_len, d, st);
                              CStrided V(vi->data.data() + off, t_len, d, st);
                              CStrided G(o.grad.data() + off, t_len, d, st);
                              CMapR<T> P(probs->data() + (b * h + hh) * t_len * t_len, t_len, t_len);
                              if (gv) Strided(gv + off, t_len, d, st).noalias() += P.transpose() * G;
                              dp.noalias() = G * V.transpose();
                              for (Index i = 0; i < t_len; ++i) {
                                T dot = T(0);
                                for (Index j = 0; j <= i; ++j) dot += dp(i, j) * P(i, j);
                                for (Index j = 0; j < t_len; ++j) ds(i, j) = j <= i ? P(i, j) * (dp(i, j) - dot) * inv_sqrt : T(0);
                              }
                              if (gq) Strided(gq + off, t_len, d, st).noalias() += ds * K;
                              if (gk) Strided(gk + off, t_len, d, st).noalias() += ds.transpose() * Q;
                            }
                          }
                        });
}

template <typename T>
Tensor<T> sinkhorn(const Tensor<T>& logits, int iters) {
  const auto li = logits.impl();
  const Shape& s = li->shape;
  if (s.size() < 2 || s[s.size() - 1] != s[s.size() - 2]) {
    throw DimensionError("sinkhorn: expects trailing square matrices, got " + to_string(s));
  }
  if (iters < 1) throw ContractError("sinkhorn: iters must be >= 1");
  const Index n = s.back();
  const Index nn = n * n;
  const Index nb = numel(s) / std::max<Index>(nn, 1);
  // Saved states per matrix: P0, then after each column and each row step.
  const Index states = 2 * static_cast<Index>(iters) + 1;
  auto saved = std::make_shared<std::vector<T>>(static_cast<std::size_t>(nb * states * nn));
  std::vector<T> out(li->data.size());
  for (Index b = 0; b < nb; ++b) {
    const T* m = li->data.data() + b * nn;
    T* st = saved->data() + b * states * nn;
    const T mx = *std::max_element(m, m + nn);
    for (Index i = 0; i < nn; ++i) st[i] = std::exp(m[i] - mx);
    for (int it = 0; it < iters; ++it) {
      const T* prev = st + (2 * it) * nn;
      T* col = st + (2 * it + 1) * nn;
      T* row = st + (2 * it + 2) * nn;
      for (Index c = 0; c < n; ++c) {
        T z = T(0);
        for (Index r = 0; r < n; ++r) z += prev[r * n + c];
        for (Index r = 0; r < n; ++r) col[r * n + c] = prev[r * n + c] / z;
      }
      for (Index r = 0; r < n; ++r) {
        T z = T(0);
        for (Index c = 0; c < n; ++c) z += col[r * n + c];
        for (Index c = 0; c < n; ++c) row[r * n + c] = col[r * n + c] / z;
      }
    }
    std::copy_n(st + (states - 1) * nn, nn, out.data() + b * nn);
  }
  return make_result<T>(s, std::move(out), {li}, "sinkhorn", [li, saved, nb, n, nn, states, iters](TensorImpl<T>& o) {
    auto& gl = li->grad_buffer();
    std::vector<T> g(static_cast<std::size_t>(nn));
    std::vector<T> gprev(static_cast<std::size_t>(nn));
    for (Index b = 0; b < nb; ++b) {
      const T* st = saved->data() + b * states * nn;
      std::copy_n(o.grad.data() + b * nn, nn, g.data());
      for (int it = iters - 1; it >= 0; --it) {
        const T* prev = st + (2 * it) * nn;
        const T* col = st + (2 * it + 1) * nn;
        const T* row = st + (2 * it + 2) * nn;
        // Row step: row = col / rowsum(col).
        for (Index r = 0; r < n; ++r) {
          T z = T(0);
          T dot = T(0);
          for (Index c = 0; c < n; ++c) {
            z += col[r * n + c];
            dot += g[static_cast<std::size_t>(r * n + c)] * row[r * n + c];
          }
          for (Index c = 0; c < n; ++c) gprev[static_cast<std::size_t>(r * n + c)] = (g[static_cast<std::size_t>(r * n + c)] - dot) / z;
        }
        std::swap(g, gprev);
        // Column step: col = prev / colsum(prev).
        for (Index c = 0; c < n; ++c) {
          T z = T(0);
          T dot = T(0);
          for (Index r = 0; r < n; ++r) {
            z += prev[r * n + c];
            dot += g[static_cast<std::size_t>(r * n + c)] * col[r * n + c];
          }
          for (Index r = 0; r < n; ++r) gprev[static_cast<std::size_t>(r * n + c)] = (g[static_cast<std::size_t>(r * n + c)] - dot) / z;
        }
        std::swap(g, gprev);
      }
      // exp(m - max): the shift cancels under normalization.
      for (Index i = 0; i < nn; ++i) gl[static_cast<std::size_t>(b * nn + i)] += g[static_cast<std::size_t>(i)] * st[i];
    }
  });
}

// ---------------------------------------------------------------------------

#define HYPERLOOP_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(const Tensor<T>&, T);                                                   \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> transpose(const Tensor<T>&);                                                  \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> flatten(const Tensor<T>&, int);                                               \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> sum(const Tensor<T>&, int, bool);                                             \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> mean(const Tensor<T>&, int, bool);                                            \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                   \
  template Tensor<T> slice(const Tensor<T>&, int, Index, Index);                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                    \
  template Tensor<T> silu(const Tensor<T>&);                                                       \
  template Tensor<T> exp(const Tensor<T>&);                                                        \
  template Tensor<T> softmax(const Tensor<T>&, int);                                               \
  template Tensor<T> rmsnorm(const Tensor<T>&, const Tensor<T>&, T);                               \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const std::int32_t>);               \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::int32_t>, Shape);            \
  template Tensor<T> rope(const Tensor<T>&, double);                                               \
  template Tensor<T> causal_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);       \
  template Tensor<T> sinkhorn(const Tensor<T>&, int);

HYPERLOOP_INSTANTIATE_OPS(float)
HYPERLOOP_INSTANTIATE_OPS(double)

#undef HYPERLOOP_INSTANTIATE_OPS

}  // namespace hyperloop
