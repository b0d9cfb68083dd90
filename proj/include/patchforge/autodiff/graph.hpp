#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <utility>
#include <vector>

#include "patchforge/error.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge::ad {

template <class T>
class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while its graph lives.
template <class T>
class Var {
 public:
  Var() = default;

  Graph<T>& graph() const noexcept { return *graph_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return graph_->value(*this); }
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const { return graph_->requires_grad(*this); }
  bool valid() const noexcept { return graph_ != nullptr; }

 private:
  friend class Graph<T>;
  Var(Graph<T>* g, std::size_t id) : graph_(g), id_(id) {}
  Graph<T>* graph_ = nullptr;
  std::size_t id_ = 0;
};

/// Tape of operation records in creation order, which is a topological order:
/// every node's parents were created before it. backward() walks the tape in
/// reverse, so each node is visited once, after all of its consumers.
///
/// Recorded values are never mutated. Leaf gradients accumulate across
/// backward() calls until zero_grad(); interior gradients are reset per call.
template <class T>
class Graph {
 public:
  /// Receives the node's own output gradient; accumulates into parents via grad_buffer().
  using BackwardFn = std::function<void(Graph&, const Tensor<T>& grad_out)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
    nodes_.push_back(Node{std::move(value), {}, requires_grad, true, {}});
    return Var<T>(this, nodes_.size() - 1);
  }

  Var<T> constant(Tensor<T> value) { return leaf(std::move(value), false); }

  /// Adds an interior node. The backward function is dropped when no parent
  /// requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    bool rg = false;
    for (const auto& p : parents) {
      check_owner(p);
      rg = rg || nodes_[p.id_].requires_grad;
    }
    nodes_.push_back(Node{std::move(value), {}, rg, false, rg ? std::move(fn) : BackwardFn{}});
    return Var<T>(this, nodes_.size() - 1);
  }

  const Tensor<T>& value(const Var<T>& v) const {
    check_owner(v);
    return nodes_[v.id_].value;
  }
  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }

  bool requires_grad(const Var<T>& v) const {
    check_owner(v);
    return nodes_[v.id_].requires_grad;
  }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  /// Gradient of the last backward() target w.r.t. v; zeros if nothing flowed.
  Tensor<T> grad(const Var<T>& v) const {
    check_owner(v);
    const Node& node = nodes_[v.id_];
    if (node.grad.empty()) return Tensor<T>(node.value.shape());
    return node.grad;
  }

  /// Mutable gradient slot of node `id`, zero-initialized on first use.
  Tensor<T>& grad_buffer(std::size_t id) {
    Node& node = nodes_.at(id);
    if (node.grad.empty() && node.value.numel() > 0) node.grad = Tensor<T>(node.value.shape());
    return node.grad;
  }

  void backward(const Var<T>& loss) {
    check_owner(loss);
    if (nodes_[loss.id_].value.numel() != 1)
      throw ContractError("backward() needs a scalar loss, got shape " + nodes_[loss.id_].value.shape().str());
    for (auto& node : nodes_)
      if (!node.leaf) node.grad = Tensor<T>();
    if (!nodes_[loss.id_].requires_grad) return;
    grad_buffer(loss.id_)[0] += T(1);
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (node.leaf || !node.backward || node.grad.empty()) continue;
      node.backward(*this, node.grad);
    }
  }

  void zero_grad() {
    for (auto& node : nodes_) node.grad = Tensor<T>();
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    bool leaf = false;
    BackwardFn backward;
  };

  void check_owner(const Var<T>& v) const {
    if (v.graph_ != this || v.id_ >= nodes_.size()) throw ContractError("variable does not belong to this graph");
  }

  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Branch tracing. Piecewise ops (relu, max pooling, min/max, clamp) feed their
// branch decisions into the active trace, if any. Gradient checks compare
// traces at x - eps, x and x + eps to detect when a finite difference straddles
// a kink, where it is not a valid derivative estimate.

struct BranchTrace {
  std::uint64_t hash = 0xcbf29ce484222325ULL;
  std::size_t decisions = 0;

  void feed(std::uint64_t v) noexcept {
    hash ^= v + 0x9e3779b97f4a7c15ULL + (hash << 6) + (hash >> 2);
    ++decisions;
  }
};

inline thread_local BranchTrace* active_trace = nullptr;

class ScopedTrace {
 public:
  explicit ScopedTrace(BranchTrace& t) noexcept : prev_(active_trace) { active_trace = &t; }
  ~ScopedTrace() { active_trace = prev_; }
  ScopedTrace(const ScopedTrace&) = delete;
  ScopedTrace& operator=(const ScopedTrace&) = delete;

 private:
  BranchTrace* prev_;
};

/// Packs a run of boolean decisions into the active trace.
class TraceWriter {
 public:
  TraceWriter() noexcept : trace_(active_trace) {}
  bool active() const noexcept { return trace_ != nullptr; }
  void bit(bool b) noexcept {
    if (!trace_) return;
    word_ = (word_ << 1) | static_cast<std::uint64_t>(b);
    if (++bits_ == 64) flush();
  }
  void value(std::uint64_t v) noexcept {
    if (trace_) trace_->feed(v);
  }
  ~TraceWriter() { flush(); }

 private:
  void flush() noexcept {
    if (trace_ && bits_ > 0) trace_->feed(word_ ^ (static_cast<std::uint64_t>(bits_) << 56));
    word_ = 0;
    bits_ = 0;
  }
  BranchTrace* trace_;
  std::uint64_t word_ = 0;
  int bits_ = 0;
};

}  // namespace patchforge::ad
