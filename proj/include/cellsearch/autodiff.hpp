#pragma once

#include <cstddef>
#include <functional>
#include <string_view>
#include <vector>

#include "cellsearch/param_store.hpp"
#include "cellsearch/tensor.hpp"

namespace cellsearch {

using NodeId = std::size_t;

template <typename T>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
 public:
  Var() = default;

  Tape<T>& tape() const { return *tape_; }
  NodeId id() const { return id_; }
  const Tensor<T>& value() const;
  const Tensor<T>& grad() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, NodeId id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Reverse-mode differentiation graph for one forward pass.
///
/// Nodes are appended in creation order, which is always a valid topological
/// order, so backward simply walks ids downwards. Leaf gradients (variables and
/// parameters) accumulate across backward calls; interior gradients are reset
/// at the start of every call.
template <typename T>
class Tape {
 public:
  /// Receives the gradient of the node being processed and pushes
  /// contributions into its parents through grad_sink().
  using BackwardFn = std::function<void(Tape&, const Tensor<T>&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value);
  Var<T> variable(Tensor<T> value);
  /// Leaf that reads `p.value` in place and accumulates into `p.grad`.
  Var<T> parameter(Parameter<T>& p);

  /// Append an interior node. Throws NumericError when `value` has NaN/Inf.
  Var<T> record(std::string_view op, Tensor<T> value, std::vector<NodeId> parents, BackwardFn fn);

  void backward(const Var<T>& loss);
  void zero_grad();

  const Tensor<T>& value(NodeId id) const;
  const Tensor<T>& grad(NodeId id) const;
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  const std::vector<NodeId>& parents(NodeId id) const { return nodes_[id].parents; }
  std::size_t size() const { return nodes_.size(); }

  /// Zero-initialized gradient buffer for `id`, or nullptr when the node does
  /// not require a gradient. Only meaningful during backward().
  Tensor<T>* grad_sink(NodeId id);

 private:
  struct Node {
    Tensor<T> value;
    Parameter<T>* param = nullptr;
    mutable Tensor<T> grad;
    std::vector<NodeId> parents;
    BackwardFn backward;
    bool requires_grad = false;
    bool leaf = true;
  };

  std::vector<Node> nodes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(id_);
}
template <typename T>
const Tensor<T>& Var<T>::grad() const {
  return tape_->grad(id_);
}
template <typename T>
bool Var<T>::requires_grad() const {
  return tape_->requires_grad(id_);
}

}  // namespace cellsearch
