// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <unordered_set>
#include <vector>

#include "scale/numerics/tensor.hpp"

namespace scale {

// Reverse-mode differentiation over a dynamically recorded graph. Each op
// returns a Var holding its value plus a closure that pushes the output
// gradient into its inputs. A graph belongs to one thread and one step.

struct Node {
  Tensor value;
  Tensor grad;  // allocated lazily during backward
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;
  Parameter* param = nullptr;
  bool requires_grad = false;

  Tensor& grad_buffer() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

namespace detail {
inline thread_local bool grad_enabled = true;
}

// Disables graph recording in scope (feature extraction, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() noexcept { return detail::grad_enabled; }

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  // Constant input; never receives a gradient.
  static Var constant(Tensor value) {
    require_finite(value, "constant input");
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return Var(std::move(n));
  }

  // Leaf bound to a trainable parameter. Backward accumulates into p.grad.
  static Var param(Parameter& p) {
    auto n = std::make_shared<Node>();
    n->value = p.value;
    n->param = &p;
    n->requires_grad = grad_enabled();
    return Var(std::move(n));
  }

  const Tensor& value() const { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t rows() const { return node_->value.rows(); }
  std::size_t cols() const { return node_->value.cols(); }
  real item() const { return node_->value.item(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Builds an op result. The closure receives the output node and must add
// into inputs[i]->grad_buffer() for inputs that require grad.
inline Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backprop,
                       const char* op_name) {
  require_finite(value, std::string(op_name) + " output");
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  bool needs = false;
  if (grad_enabled()) {
    for (const Var& v : inputs) needs = needs || v.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (Var& v : inputs) n->inputs.push_back(v.node());
    n->backprop = std::move(backprop);
  }
  return Var(std::move(n));
}

inline void backward(const Var& loss) {
  if (!loss.defined() || loss.value().size() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " +
                     (loss.defined() ? shape_string(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->grad_buffer()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->grad.empty()) continue;
    require_finite(node->grad, "gradient");
    if (node->backprop) node->backprop(*node);
    if (node->param != nullptr) {
      auto& dst = node->param->grad.storage();
      const auto& src = node->grad.storage();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    }
  }
}

// Named parameter registry owned by a model. Names are unique and the
// insertion order is the canonical serialization order.
class ParamSet {
 public:
  Parameter& add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
    index_[name] = params_.size() - 1;
    return *params_.back();
  }

  Parameter& get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *params_[it->second];
  }
  const Parameter& get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return *params_[it->second];
  }
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::size_t size() const noexcept { return params_.size(); }
  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::vector<Parameter*> with_prefix(const std::string& prefix) {
    std::vector<Parameter*> out;
    for (auto& p : params_) {
      if (p->name.rfind(prefix, 0) == 0) out.push_back(p.get());
    }
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace scale
