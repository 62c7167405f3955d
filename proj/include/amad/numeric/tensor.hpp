#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "amad/errors.hpp"

namespace amad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first reached by backward
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(Node&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& finite_check_flag() {
#ifdef NDEBUG
  thread_local bool enabled = false;
#else
  thread_local bool enabled = true;
#endif
  return enabled;
}

}  // namespace detail

/// Whether operations currently record a graph for reverse-mode differentiation.
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime (inference, optimizer updates).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Post-op NaN/Inf scan. On by default in debug builds.
inline void set_finite_checks(bool enabled) { detail::finite_check_flag() = enabled; }
inline bool finite_checks() { return detail::finite_check_flag(); }

/// Dense row-major float64 array with optional gradient tracking.
///
/// A Tensor is a handle: copies share storage and graph identity, like the
/// tensors of most deep-learning frameworks. Use clone() for an independent
/// copy and detach() to cut a value out of the graph.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::Node>()) { node_->shape = {1}; node_->value.assign(1, 0.0); }

  explicit Tensor(Shape shape, double fill = 0.0) : node_(std::make_shared<detail::Node>()) {
    validate_shape(shape);
    node_->value.assign(shape_numel(shape), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values) : node_(std::make_shared<detail::Node>()) {
    validate_shape(shape);
    if (shape_numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + shape_str(shape) + " does not hold " + std::to_string(values.size()) +
                       " values");
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  static Tensor scalar(double v) { return Tensor(Shape{1}, std::vector<double>{v}); }

  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (double& v : t.node_->value) v = dist(rng);
    return t;
  }

  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& v : t.node_->value) v = dist(rng);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }

  std::span<double> data() { return node_->value; }
  std::span<const double> data() const { return node_->value; }
  std::vector<double>& values() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  double& operator[](std::size_t i) { return node_->value[i]; }
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const {
    if (!has_grad()) throw StateError("tensor " + shape_str(shape()) + " has no gradient");
    return node_->grad;
  }
  std::span<double> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }
  void clear_grad() { node_->grad.clear(); }

  /// Independent copy of the values, detached from any graph.
  Tensor clone() const { return Tensor(shape(), node_->value); }
  /// Shares nothing with the graph; grads never flow through the result.
  Tensor detach() const { return clone(); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  /// Accumulates d(this)/d(leaf) into every reachable leaf that requires grad.
  void backward() const;

  // Internal: graph construction used by ops.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  static void validate_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (std::size_t e : shape) {
      if (e == 0) throw ShapeError("tensor extent must be >= 1, got " + shape_str(shape));
    }
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline void check_finite(const Node& n, const char* op) {
  if (!finite_check_flag()) return;
  for (double v : n.value) {
    if (!std::isfinite(v)) throw StateError(std::string("non-finite value produced by ") + op);
  }
}

/// Builds the result node of an op. The node joins the graph only when grad
/// mode is on and at least one input tracks gradients.
inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward_fn, const char* op) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  check_finite(*n, op);
  if (grad_enabled()) {
    bool track = false;
    for (const Tensor& t : inputs) track = track || t.node()->requires_grad;
    if (track) {
      n->requires_grad = true;
      n->is_leaf = false;
      for (const Tensor& t : inputs) n->parents.push_back(t.node());
      n->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor::from_node(std::move(n));
}

}  // namespace detail

inline void Tensor::backward() const {
  if (numel() != 1) throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  // Reverse topological order via iterative DFS.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node* p = n->parents[next++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (detail::Node* n : order) {
    if (!n->is_leaf) n->grad.assign(n->value.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf || !n->backward_fn) continue;
    for (auto& p : n->parents) {
      if (p->requires_grad) p->ensure_grad();
    }
    n->backward_fn(*n);
  }
  for (detail::Node* n : order) {
    if (!n->is_leaf) n->grad.clear();
  }
}

}  // namespace amad
