#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace hyperloop {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string to_string(const Shape& shape);

template <typename T>
struct TensorImpl;

/// One recorded op. `backward` reads out.grad and accumulates into the
/// inputs that require gradients.
template <typename T>
struct GraphNode {
  std::vector<std::shared_ptr<TensorImpl<T>>> inputs;
  std::function<void(TensorImpl<T>& out)> backward;
  const char* op = "";
  bool consumed = false;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::shared_ptr<GraphNode<T>> node;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

/// Thread-local switch consulted by every op before recording a graph node.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major tensor with reverse-mode autodiff.
///
/// Copies share storage (handle semantics), which is what lets a looped block
/// reuse one set of parameter tensors across all loop iterations and have
/// their gradients accumulate in place.
template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl<T>> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  /// Extent of `axis`; negative axes count from the end.
  Index dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  Index numel() const;

  std::span<const T> data() const;
  std::span<T> data_mut();
  T item() const;
  T operator[](Index i) const { return data()[static_cast<std::size_t>(i)]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const T> grad() const;
  /// Gradient as a detached tensor (zeros if none was accumulated).
  Tensor grad_tensor() const;
  void zero_grad();

  /// Reverse pass from a scalar produced by a live graph.
  /// Throws ContractError for non-scalars and StateError if the graph was already consumed.
  void backward() const;

  /// Value copy with no graph history.
  Tensor detach() const;
  /// Deep copy as a fresh leaf.
  Tensor clone() const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data().begin(), data().end());
    return Tensor<U>::from_vector(shape(), std::move(out));
  }

  const std::shared_ptr<TensorImpl<T>>& impl() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<TensorImpl<T>> impl_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace hyperloop
