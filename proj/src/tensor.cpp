#include "hyperloop/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "hyperloop/error.hpp"

namespace hyperloop {

namespace {
thread_local bool g_grad_enabled = true;
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value, bool requires_grad) {
  for (Index d : shape) {
    if (d < 0) throw DimensionError("negative extent in shape " + to_string(shape));
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->data.assign(static_cast<std::size_t>(hyperloop::numel(shape)), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::from_vector(Shape shape, std::vector<T> values, bool requires_grad) {
  if (hyperloop::numel(shape) != static_cast<Index>(values.size())) {
    throw DimensionError("from_vector: shape " + to_string(shape) + " needs " +
                         std::to_string(hyperloop::numel(shape)) + " values, got " +
                         std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_vector({}, {value}, requires_grad);
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!impl_) throw StateError("use of an undefined tensor");
  return impl_->shape;
}

template <typename T>
Index Tensor<T>::dim(int axis) const {
  const int r = rank();
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(a)];
}

template <typename T>
Index Tensor<T>::numel() const {
  return static_cast<Index>(impl_ ? impl_->data.size() : 0);
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!impl_) throw StateError("use of an undefined tensor");
  return impl_->data;
}

template <typename T>
std::span<T> Tensor<T>::data_mut() {
  if (!impl_) throw StateError("use of an undefined tensor");
  return impl_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return impl_ && impl_->requires_grad;
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool on) {
  if (!impl_) throw StateError("use of an undefined tensor");
  if (impl_->node) throw StateError("requires_grad can only be changed on leaf tensors");
  impl_->requires_grad = on;
  return *this;
}

template <typename T>
bool Tensor<T>::is_leaf() const {
  return impl_ && !impl_->node;
}

template <typename T>
bool Tensor<T>::has_grad() const {
  return impl_ && !impl_->grad.empty();
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!has_grad()) return {};
  return impl_->grad;
}

template <typename T>
Tensor<T> Tensor<T>::grad_tensor() const {
  if (!has_grad()) return zeros(shape());
  return from_vector(shape(), impl_->grad);
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (impl_) impl_->grad.clear();
}

template <typename T>
void Tensor<T>::backward() const {
  if (!impl_) throw StateError("backward on an undefined tensor");
  if (numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + to_string(shape()));
  }
  if (!impl_->node) throw ContractError("backward requires a tensor produced by a live graph");

  // Iterative post-order DFS gives a topological order over graph nodes.
  std::vector<TensorImpl<T>*> order;
  std::unordered_set<TensorImpl<T>*> visited;
  std::vector<std::pair<TensorImpl<T>*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [cur, next] = stack.back();
    if (cur->node && next < cur->node->inputs.size()) {
      TensorImpl<T>* child = cur->node->inputs[next++].get();
      if (child->node && visited.insert(child).second) stack.push_back({child, 0});
      continue;
    }
    order.push_back(cur);
    stack.pop_back();
  }
  for (TensorImpl<T>* t : order) {
    if (t->node->consumed) {
      throw StateError("backward called twice on the same graph; rebuild it with a new forward pass");
    }
  }

  impl_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl<T>* t = *it;
    if (!t->grad.empty() && t->node->backward) t->node->backward(*t);
  }
  for (TensorImpl<T>* t : order) {
    t->node->consumed = true;
    t->node->backward = nullptr;
    t->node->inputs.clear();
    if (t != impl_.get()) {
      t->grad.clear();
      t->grad.shrink_to_fit();
    }
  }
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = shape();
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  auto impl = std::make_shared<TensorImpl<T>>();
  impl->shape = shape();
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad && !impl_->node;
  return Tensor(std::move(impl));
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace hyperloop
