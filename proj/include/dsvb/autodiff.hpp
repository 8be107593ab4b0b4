/* Copyright 2026 The DSVB Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dsvb/errors.hpp"
#include "dsvb/tensor.hpp"

namespace dsvb {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates `grad` of this node into the grads of `inputs`. Only called
  // when at least one input requires a gradient.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const noexcept { return inputs.empty(); }
};

inline void ensure_grad(Node& n) {
  if (!n.grad.same_shape(n.value)) n.grad = Tensor(n.value.rows(), n.value.cols());
}

}  // namespace detail

/// Handle to a value in the computation graph.
///
/// Leaves created with `requires_grad = true` are parameters: their gradient
/// accumulates across backward passes until `zero_grad()`. Non-leaf values
/// are produced by the ops in ops.hpp and remember how to push gradients back
/// into their inputs. Copies share the underlying node.
class Var {
 public:
  Var() : node_(std::make_shared<detail::Node>()) {}
  explicit Var(Tensor value, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var constant(Tensor value) { return Var(std::move(value), false); }
  static Var parameter(Tensor value) { return Var(std::move(value), true); }

  // Builds an interior node. `fn` is dropped when no input needs gradients.
  static Var from_op(Tensor value, std::vector<Var> inputs, std::function<void(detail::Node&)> fn) {
    Var out(std::move(value), false);
    for (const auto& in : inputs) out.node_->requires_grad |= in.requires_grad();
    if (out.node_->requires_grad) {
      out.node_->inputs.reserve(inputs.size());
      for (auto& in : inputs) out.node_->inputs.push_back(std::move(in.node_));
      out.node_->backward_fn = std::move(fn);
    }
    return out;
  }

  const Tensor& value() const noexcept { return node_->value; }
  // Direct access for optimizers updating parameters in place.
  Tensor& mutable_value() noexcept { return node_->value; }
  const Tensor& grad() const noexcept { return node_->grad; }
  Tensor& mutable_grad() const {
    detail::ensure_grad(*node_);
    return node_->grad;
  }
  bool has_grad() const noexcept { return node_->grad.same_shape(node_->value) && !node_->value.empty(); }
  void zero_grad() const {
    detail::ensure_grad(*node_);
    node_->grad.fill(0.0);
  }

  bool requires_grad() const noexcept { return node_->requires_grad; }
  bool is_leaf() const noexcept { return node_->is_leaf(); }
  std::size_t rows() const noexcept { return node_->value.rows(); }
  std::size_t cols() const noexcept { return node_->value.cols(); }
  std::vector<std::size_t> shape() const { return node_->value.shape(); }
  double item() const { return node_->value.item(); }

  detail::Node* node() const noexcept { return node_.get(); }
  bool same_node(const Var& o) const noexcept { return node_ == o.node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Ordered record of every gradient-carrying node reachable from a loss.
/// Inputs always precede the nodes that consume them.
class Tape {
 public:
  static Tape record(const Var& loss) {
    Tape tape;
    if (!loss.requires_grad()) return tape;
    // Iterative post-order DFS; graphs from long rollouts are deep.
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node(), 0);
    visited.insert(loss.node());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        detail::Node* child = node->inputs[next++].get();
        if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      } else {
        tape.nodes_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  const std::vector<detail::Node*>& nodes() const noexcept { return nodes_; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Replays the tape in reverse. Interior gradients are recomputed from
  // scratch; leaf gradients accumulate.
  void replay() const {
    if (nodes_.empty()) return;
    for (auto* n : nodes_) {
      if (n->is_leaf()) {
        detail::ensure_grad(*n);
      } else {
        n->grad = Tensor(n->value.rows(), n->value.cols());
      }
    }
    nodes_.back()->grad[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node* n = *it;
      if (!n->is_leaf() && n->backward_fn) n->backward_fn(*n);
    }
  }

 private:
  std::vector<detail::Node*> nodes_;
};

/// Reverse-mode sweep from a scalar loss.
inline void backward(const Var& loss) {
  if (loss.value().size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + loss.value().shape_str());
  }
  Tape::record(loss).replay();
}

}  // namespace dsvb
