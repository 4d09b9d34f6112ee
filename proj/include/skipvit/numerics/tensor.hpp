#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace skipvit::numerics {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Graph node behind a Tensor handle. Forward data is fixed at construction;
/// only the gradient accumulator (and leaf data, via the optimizer) mutate.
template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(TensorNode&)> backward_fn;

  bool is_leaf() const { return inputs.empty(); }
  std::vector<T>& grad_buffer();
};

/// Shared handle to a dense row-major array with optional gradient tracking.
/// Copies alias the same node, as with framework tensors.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);
  explicit Tensor(std::shared_ptr<TensorNode<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  /// Negative axes count from the back.
  std::size_t dim(int axis) const;
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  /// Direct write access; intended for leaves (initialisation, optimizer).
  std::span<T> mutable_data() { return node_->data; }
  T item() const;
  T at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad();

  /// Deep copy of the values with no graph history.
  Tensor detach() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Disables graph construction on this thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

/// Reverse topological record of the differentiable operations reachable
/// from a root. Each node appears exactly once.
template <typename T>
class ComputeTape {
 public:
  static ComputeTape record(const Tensor<T>& root);

  /// Nodes in forward-execution order (inputs before consumers).
  const std::vector<TensorNode<T>*>& nodes() const { return order_; }

  /// Seeds d(root)/d(root) = 1 and runs every backward rule in reverse.
  void replay_backward();

 private:
  std::vector<TensorNode<T>*> order_;
};

/// Populates grads of every requires_grad leaf reachable from a scalar loss.
/// Leaf gradients accumulate across calls until zero_grad().
template <typename T>
void backward(const Tensor<T>& loss);

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class ComputeTape<float>;
extern template class ComputeTape<double>;

}  // namespace skipvit::numerics
