/*
 * Copyright 2026 The pestnet Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "pestnet/error.hpp"

namespace pestnet {

inline std::size_t numel_of(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the autodiff graph. `backward` reads this node's grad and
/// accumulates into the parents that require grad.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

inline bool& grad_enabled() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime (evaluation passes).
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled()) { detail::grad_enabled() = false; }
  ~NoGradGuard() { detail::grad_enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Handle to an n-dimensional row-major array of doubles in the autodiff graph.
/// Copies alias the same storage; use clone() for a value copy.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::Node>()) { node_->data.assign(1, 0.0); }

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) : node_(std::make_shared<detail::Node>()) {
    if (numel_of(shape) != data.size()) {
      throw ShapeError("Tensor", "shape " + shape_str(shape) + " holds " + std::to_string(numel_of(shape)) +
                                     " values, got " + std::to_string(data.size()));
    }
    for (std::size_t d : shape) {
      if (d == 0) throw ShapeError("Tensor", "zero-sized dimension in " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }
  static Tensor ones(Shape shape, bool requires_grad = false) { return full(std::move(shape), 1.0, requires_grad); }
  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const std::size_t n = numel_of(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const double> data() const { return node_->data; }
  /// Mutable view, for parameter updates and initialization outside a pass.
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const& { return node_->data; }
  /// Copy for temporaries, so `for (double v : f(x).values())` stays valid.
  std::vector<double> values() const&& { return node_->data; }

  double item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  double operator[](std::size_t i) const { return node_->data[i]; }

  /// Row-major element access by multi-index.
  double at(std::initializer_list<std::size_t> idx) const { return node_->data[offset(idx)]; }
  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != rank()) throw ShapeError("at", "index rank mismatch for " + shape_str(shape()));
    std::size_t off = 0;
    std::size_t d = 0;
    for (std::size_t i : idx) {
      if (i >= node_->shape[d]) throw ShapeError("at", "index out of range for " + shape_str(shape()));
      off = off * node_->shape[d] + i;
      ++d;
    }
    return off;
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool r) {
    node_->requires_grad = r;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  double grad_at(std::size_t i) const { return node_->grad.at(i); }
  void zero_grad() { node_->grad.clear(); }

  bool is_leaf() const { return !node_->backward; }
  const char* op_name() const { return node_->op; }

  /// New leaf with a copy of the data and the same requires_grad flag.
  Tensor clone() const { return Tensor(shape(), node_->data, requires_grad()); }
  /// New leaf sharing nothing with the graph, requires_grad false.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  bool same_node(const Tensor& o) const { return node_ == o.node_; }

  // Low-level graph access for op implementations.
  const detail::NodePtr& node() const { return node_; }
  explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

 private:
  detail::NodePtr node_;
};

/// Builds an op result. When no parent requires grad (or recording is off)
/// the result is a plain leaf and the backward closure is dropped.
inline Tensor make_result(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                          std::function<void(detail::Node&)> backward, const char* op) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool needs = false;
  if (detail::grad_enabled()) {
    for (const Tensor& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const Tensor& p : parents) n->parents.push_back(p.node());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

/// Accumulation target for a parent's gradient, or nullptr when it needs none.
inline double* grad_sink(const detail::NodePtr& p) {
  if (!p->requires_grad) return nullptr;
  p->ensure_grad();
  return p->grad.data();
}

/// Nodes reachable from a root that require grad, in topological order
/// (operands before results). Each node appears once.
struct Tape {
  std::vector<detail::Node*> order;

  static Tape record(const Tensor& root) {
    Tape tape;
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS; graphs can be deep.
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    detail::Node* r = root.node().get();
    if (!r->requires_grad) return tape;
    stack.emplace_back(r, 0);
    seen.insert(r);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        tape.order.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }
};

/// Reverse-mode sweep from a scalar loss. Every grad on the tape is zeroed
/// first, so repeated calls never accumulate across losses.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss does not depend on any tensor requiring grad");
  }
  Tape tape = Tape::record(loss);
  for (detail::Node* n : tape.order) n->grad.assign(n->data.size(), 0.0);
  loss.node()->grad[0] = 1.0;
  for (auto it = tape.order.rbegin(); it != tape.order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

}  // namespace pestnet
