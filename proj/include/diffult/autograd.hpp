#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Tape records every node created during a forward pass in creation order,
// which is already a topological order. Tape::backward walks the nodes in
// reverse, invoking each node's backward closure once its gradient is final.
// Parameters enter the tape as leaves and receive their gradient in
// Parameter::grad (accumulated, so several backward passes sum).

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "diffult/tensor.hpp"

namespace diffult {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter(std::string n, Tensor<T> v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(T{0}); }
};

// Owns parameters with stable addresses; models hold raw pointers into it.
template <typename T>
class ParameterSet {
 public:
  Parameter<T>& add(std::string name, Tensor<T> value) {
    for (const auto& p : params_)
      if (p.name == name) throw std::logic_error("duplicate parameter name: " + name);
    params_.emplace_back(std::move(name), std::move(value));
    return params_.back();
  }

  std::size_t size() const { return params_.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }
  Parameter<T>& operator[](std::size_t i) { return params_[i]; }
  const Parameter<T>& operator[](std::size_t i) const { return params_[i]; }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  Parameter<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

 private:
  std::deque<Parameter<T>> params_;
};

template <typename T>
class Tape;

// Lightweight handle to a node on a tape.
template <typename T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Tensor<T>& value() const { return tape_->value(id_); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return value().dim(i); }
  bool requires_grad() const { return tape_->requires_grad(id_); }
  const Tensor<T>& grad() const { return tape_->grad(id_); }

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  // Grad-free tapes skip recording backward closures (inference).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false, nullptr); }

  Var<T> leaf(Parameter<T>& p) {
    // Parameters are copied in; gradients flow back to p.grad in backward().
    return push(p.value, record_, &p);
  }

  // Creates a node whose gradient flows to `parents` through `fn`.
  Var<T> op(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
    bool needs = false;
    if (record_)
      for (const auto& v : parents) needs = needs || requires_grad(v.id());
    auto var = push(std::move(value), needs, nullptr);
    if (needs) nodes_[var.id()].backward = std::move(fn);
    return var;
  }

  const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }

  const Tensor<T>& grad(std::size_t id) const {
    const auto& n = nodes_.at(id);
    if (!n.has_grad) throw std::logic_error("grad requested for node without gradient");
    return n.grad;
  }

  // Gradient buffer for accumulation (allocated as zeros on first use).
  Tensor<T>& grad_buffer(std::size_t id) {
    auto& n = nodes_[id];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void accumulate(std::size_t id, const Tensor<T>& g) {
    if (!nodes_[id].requires_grad) return;
    grad_buffer(id) += g;
  }

  // Seeds d(loss)/d(loss) = 1 for a scalar loss; a custom seed may be given
  // for non-scalar outputs.
  void backward(const Var<T>& out) { backward(out, Tensor<T>(out.shape(), T{1})); }

  void backward(const Var<T>& out, const Tensor<T>& seed) {
    if (!record_) throw std::logic_error("backward on a non-recording tape");
    if (!requires_grad(out.id())) return;
    if (!nodes_[out.id()].has_grad && out.value().size() != 1 && seed.size() != out.value().size())
      throw std::invalid_argument("backward seed shape mismatch");
    accumulate(out.id(), seed);
    for (std::size_t i = out.id() + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (!n.has_grad) continue;
      if (n.backward) n.backward(*this, i);
      if (n.param) n.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  Var<T> push(Tensor<T> value, bool requires_grad, Parameter<T>* param) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.param = requires_grad ? param : nullptr;
    nodes_.push_back(std::move(n));
    return Var<T>(this, nodes_.size() - 1);
  }

  std::deque<Node> nodes_;
  bool record_;
};

}  // namespace diffult
