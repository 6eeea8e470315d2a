#pragma once

// Reverse-mode differentiation over a dynamically recorded graph.
//
// A Var is a shared handle to a graph node. Leaves are created directly;
// every op returns a new node that remembers its parents and a closure that
// pushes the node's gradient back into them. Nodes whose parents never
// require a gradient record nothing, so inference and frozen subgraphs cost
// no extra memory.

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "brainseg/nn/tensor.hpp"

namespace brainseg::nn {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  /// Zero-initialized gradient buffer with the value's shape.
  Tensor<T>& grad_buffer() {
    if (grad.shape() != value.shape()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_->grad.shape() == node_->value.shape() && !node_->value.empty(); }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Whether ops on this thread record backward closures.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

/// Disables recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

/// Creates an op result. `backward` is recorded only when some parent
/// requires a gradient; it receives the result node and must accumulate into
/// the gradient buffers of those parents that require one.
template <typename T>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& parents,
                   std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->leaf = false;
  for (const auto& p : parents) {
    if (grad_mode() && p.defined() && p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (const auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Var<T>(std::move(node));
}

/// Backpropagates from a single-element `root`, seeding d(root)=1.
/// Leaf gradients accumulate across calls; interior gradients are reset, so
/// calling this twice on the same graph doubles every leaf gradient.
template <typename T>
void backward(const Var<T>& root);

/// Detached copy of a value (no graph connection).
template <typename T>
Var<T> constant(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

}  // namespace brainseg::nn
