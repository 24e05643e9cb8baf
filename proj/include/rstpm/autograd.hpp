// Copyright 2026 The rstpm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rstpm/parameter.hpp"
#include "rstpm/tensor.hpp"

namespace rstpm {

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

/// Recorded-tape reverse-mode differentiator.
///
/// Nodes are appended in execution order, so reverse iteration is a valid
/// topological order. Backward closures address nodes by index and never hold
/// references into the node vector. When gradients are disabled no closures
/// are recorded and the tape acts as a plain value store.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  /// Leaf that never receives gradient.
  Var<T> constant(Tensor<T> v) { return push(std::move(v), false, {}); }

  /// Leaf whose gradient is wanted by the caller (read back with grad()).
  Var<T> input(Tensor<T> v) { return push(std::move(v), grad_enabled_, {}); }

  /// Leaf bound to a parameter; its gradient is accumulated into p.grad.
  Var<T> param(Parameter<T>& p) {
    Var<T> v = push(p.value, grad_enabled_ && p.trainable, {});
    nodes_[v.id].param = &p;
    return v;
  }

  /// Same value, cut from the graph.
  Var<T> detach(Var<T> x) { return constant(value(x)); }

  /// Records the result of an operation. The closure runs only if any input
  /// required grad; callers pass `needs` accordingly.
  Var<T> record(Tensor<T> v, bool needs, BackwardFn fn) {
    const bool rg = grad_enabled_ && needs;
    return push(std::move(v), rg, rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(Var<T> v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient buffer of a node, allocated as zeros on first access.
  Tensor<T>& grad(Var<T> v) { return grad(v.id); }
  Tensor<T>& grad(std::size_t id) {
    auto& node = nodes_.at(id);
    if (node.grad.empty()) node.grad = Tensor<T>(node.value.shape());
    return node.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_.at(id).grad.empty(); }
  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  std::size_t size() const { return nodes_.size(); }

  /// Runs reverse accumulation from a scalar loss and adds the gradients of
  /// every reachable trainable parameter into Parameter::grad.
  void backward(Var<T> loss) {
    RSTPM_REQUIRE(loss.tape == this && loss.id < nodes_.size(), StateError,
                  "backward called on a value that was not recorded on this tape");
    RSTPM_REQUIRE(!backward_done_, StateError, "backward called twice on the same tape");
    RSTPM_REQUIRE(nodes_[loss.id].value.size() == 1, ShapeError,
                  "backward needs a scalar loss, got " + nodes_[loss.id].value.shape().str());
    backward_done_ = true;
    if (!nodes_[loss.id].requires_grad) return;
    grad(loss.id).fill(T(1));
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!node.requires_grad || node.grad.empty()) continue;
      if (node.backward) node.backward(*this, i);
      if (node.param != nullptr) {
        auto& acc = node.param->grad.vec();
        const auto& g = node.grad.vec();
        for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += g[k];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    Parameter<T>* param = nullptr;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> v, bool rg, BackwardFn fn) {
    nodes_.push_back(Node{std::move(v), {}, rg, nullptr, std::move(fn)});
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool grad_enabled_;
  bool backward_done_ = false;
};

/// Backward entry that complains when no forward pass exists.
template <typename T>
void backward(Var<T> loss) {
  RSTPM_REQUIRE(loss.tape != nullptr, StateError, "backward before forward: no tape recorded");
  loss.tape->backward(loss);
}

}  // namespace rstpm
