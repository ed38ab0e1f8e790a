#include "cellsearch/autodiff.hpp"

#include <string>

#include "cellsearch/error.hpp"

namespace cellsearch {

template <typename T>
Parameter<T>& ParamStore<T>::add(const std::string& name, Tensor<T> init) {
  auto [it, inserted] = params_.try_emplace(name);
  if (!inserted) throw ArgumentError("duplicate parameter name: " + name);
  it->second.value = std::move(init);
  return it->second;
}

template <typename T>
Tensor<T>& ParamStore<T>::add_buffer(const std::string& name, Tensor<T> init) {
  auto [it, inserted] = buffers_.try_emplace(name, std::move(init));
  if (!inserted) throw ArgumentError("duplicate buffer name: " + name);
  return it->second;
}

template <typename T>
Parameter<T>& ParamStore<T>::param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ArgumentError("unknown parameter: " + name);
  return it->second;
}

template <typename T>
const Parameter<T>& ParamStore<T>::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ArgumentError("unknown parameter: " + name);
  return it->second;
}

template <typename T>
std::int64_t ParamStore<T>::count() const {
  std::int64_t n = 0;
  for (const auto& [name, p] : params_) n += p.value.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& [name, p] : params_) p.zero_grad();
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::variable(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::parameter(Parameter<T>& p) {
  Node n;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Tensor<T> value, std::vector<NodeId> parents, BackwardFn fn) {
  if (!value.all_finite())
    throw NumericError("non-finite value produced by " + std::string(op) + " " + value.shape().str());
  Node n;
  n.value = std::move(value);
  n.leaf = false;
  for (NodeId p : parents) {
    if (p >= nodes_.size()) throw InternalError("parent node does not precede its child");
    n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
  }
  n.parents = std::move(parents);
  if (n.requires_grad) n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
const Tensor<T>& Tape<T>::value(NodeId id) const {
  const Node& n = nodes_[id];
  return n.param ? n.param->value : n.value;
}

template <typename T>
const Tensor<T>& Tape<T>::grad(NodeId id) const {
  const Node& n = nodes_[id];
  Tensor<T>& g = n.param ? n.param->grad : n.grad;
  if (g.empty()) g = Tensor<T>(value(id).shape());
  return g;
}

template <typename T>
Tensor<T>* Tape<T>::grad_sink(NodeId id) {
  Node& n = nodes_[id];
  if (!n.requires_grad) return nullptr;
  Tensor<T>& g = n.param ? n.param->grad : n.grad;
  if (g.empty()) g = Tensor<T>(value(id).shape());
  return &g;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
  if (loss.tape_ != this) throw ArgumentError("backward: loss belongs to a different tape");
  if (value(loss.id()).numel() != 1)
    throw ArgumentError("backward: loss must be scalar, got shape " + value(loss.id()).shape().str());
  for (std::size_t i = 0; i <= loss.id(); ++i)
    if (!nodes_[i].leaf) nodes_[i].grad = Tensor<T>();
  Tensor<T>* seed = grad_sink(loss.id());
  if (!seed) return;
  (*seed)[0] += T(1);
  for (NodeId id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.leaf || !n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

template <typename T>
void Tape<T>::zero_grad() {
  for (auto& n : nodes_) {
    if (n.param)
      n.param->grad = Tensor<T>();
    else
      n.grad = Tensor<T>();
  }
}

template class ParamStore<float>;
template class ParamStore<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace cellsearch
