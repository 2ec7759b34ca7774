#pragma once

// Minimal reverse-mode differentiation over Tensor values.
//
// Every op produces a Var whose node remembers its parents and a closure that
// pushes the node's gradient into them. Nodes are only linked when gradient
// recording is enabled and at least one input requires a gradient, so
// inference under NoGradGuard keeps no graph alive.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "fuselite/tensor.hpp"

namespace fuselite::ag {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) {
      grad = Tensor<T>(value.shape());
    }
    return grad;
  }
};

template <typename T>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<T>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Tensor<T> value) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    return Var(std::move(node));
  }

  // Leaf that accumulates gradients; `trainable` false gives a frozen leaf.
  static Var leaf(Tensor<T> value, bool trainable = true) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    node->requires_grad = trainable;
    return Var(std::move(node));
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const NodePtr& node() const noexcept { return node_; }

  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  // Empty tensor when nothing has been accumulated.
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }

  Var detach() const { return constant(node_->value); }

  // Seeds d(self)/d(self) = 1 for a single-element value and propagates.
  void backward() const {
    require(node_->value.size() == 1, ErrorCode::ShapeMismatch,
            "backward() needs a scalar root, got " + node_->value.shape().str());
    Tensor<T> seed(node_->value.shape(), T(1));
    backward(seed);
  }

  void backward(const Tensor<T>& seed) const {
    if (!node_->requires_grad) {
      return;
    }
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
      auto& [current, next_parent] = stack.back();
      if (next_parent < current->parents.size()) {
        Node<T>* parent = current->parents[next_parent++].get();
        if (parent && parent->requires_grad && visited.insert(parent).second) {
          stack.emplace_back(parent, 0);
        }
      } else {
        order.push_back(current);
        stack.pop_back();
      }
    }
    Tensor<T>& root_grad = node_->grad_buffer();
    for (std::size_t i = 0; i < root_grad.size(); ++i) {
      root_grad[i] += seed[i];
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node<T>* current = *it;
      if (!current->backward_fn || current->grad.empty()) {
        continue;
      }
      current->backward_fn(*current);
      // Interior gradients are not needed once pushed to the parents.
      current->grad = Tensor<T>();
    }
  }

 private:
  NodePtr node_;
};

// Builds an op result. The closure is attached only when recording is on and
// some input needs a gradient; otherwise the result is a plain constant.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward_fn) {
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) {
      needs_grad = needs_grad || in.requires_grad();
    }
  }
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (auto& in : inputs) {
      node->parents.push_back(in.node());
    }
    node->backward_fn = std::move(backward_fn);
  }
  return Var<T>(std::move(node));
}

template <typename T>
inline bool wants_grad(const Node<T>* parent) {
  return parent && parent->requires_grad;
}

// Adds `delta` into a parent's gradient when it wants one.
template <typename T>
inline void accumulate(Node<T>* parent, const Tensor<T>& delta) {
  if (!parent || !parent->requires_grad) {
    return;
  }
  Tensor<T>& g = parent->grad_buffer();
  T* dst = g.data();
  const T* src = delta.data();
  const std::size_t n = g.size();
  for (std::size_t i = 0; i < n; ++i) {
    dst[i] += src[i];
  }
}

}  // namespace fuselite::ag
