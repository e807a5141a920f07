// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "wavllm/numerics/array.hpp"

namespace wavllm::numerics {

/// A named model parameter. `trainable == false` marks it frozen: the tape
/// never computes a gradient for it.
struct Parameter {
  std::string name;
  Array value;
  Array grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Array v, bool train = true)
      : name(std::move(n)), value(std::move(v)), grad(Array::zeros_like(value)), trainable(train) {}

  void zero_grad() {
    if (grad.shape() != value.shape()) grad = Array::zeros_like(value);
    else grad.fill(0.0);
  }
};

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::uint32_t id = 0;

  const Array& value() const;
  const Shape& shape() const { return value().shape(); }
  bool requires_grad() const;
};

/// Records primitive operations in execution order and replays their
/// backward rules in strict reverse order. Each backward rule reads the
/// recorded input values (immutable after recording) and accumulates into
/// the input gradient slots.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::uint32_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Array value) { return push(std::move(value), false, {}, nullptr, nullptr); }

  /// A leaf owned by the tape (gradcheck fixtures, ad-hoc inputs).
  Var input(Array value, bool requires_grad) { return push(std::move(value), requires_grad, {}, nullptr, nullptr); }

  /// A leaf bound to a parameter. Registering the same parameter twice
  /// returns the same node so gradients from all uses accumulate.
  Var param(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var{this, it->second};
    Var v = push(p.value, p.trainable && grad_enabled_, {}, nullptr, &p);
    param_nodes_.emplace(&p, v.id);
    return v;
  }

  /// Appends an operation. The backward rule is kept only when some input
  /// requires a gradient.
  Var record(Array value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(std::move(value), std::vector<Var>(inputs), std::move(fn));
  }

  Var record(Array value, const std::vector<Var>& inputs, BackwardFn fn) {
    bool rg = false;
    std::vector<std::uint32_t> ids;
    ids.reserve(inputs.size());
    for (const Var& v : inputs) {
      if (v.tape != this) throw std::invalid_argument("Tape::record: input belongs to a different tape");
      rg = rg || nodes_[v.id].requires_grad;
      ids.push_back(v.id);
    }
    rg = rg && grad_enabled_;
    return push(std::move(value), rg, std::move(ids), rg ? std::move(fn) : nullptr, nullptr);
  }

  const Array& value(std::uint32_t id) const { return nodes_.at(id).value; }
  const Array& value(Var v) const { return value(v.id); }
  bool requires_grad(std::uint32_t id) const { return nodes_.at(id).requires_grad; }
  const std::vector<std::uint32_t>& inputs(std::uint32_t id) const { return nodes_.at(id).inputs; }

  /// Gradient storage for node `id`, allocated on first use; nullptr when
  /// the node does not require a gradient.
  Array* grad_slot(std::uint32_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty()) n.grad = Array::zeros_like(n.value);
    return &n.grad;
  }

  const Array& grad(Var v) const {
    const Node& n = nodes_.at(v.id);
    if (n.grad.empty()) throw std::logic_error("Tape::grad: no gradient for node " + std::to_string(v.id));
    return n.grad;
  }
  bool has_grad(Var v) const { return !nodes_.at(v.id).grad.empty(); }

  /// Reverse-mode sweep from a scalar loss. Leaf gradients bound to
  /// parameters are added into Parameter::grad.
  void backward(Var loss) {
    if (loss.tape != this) throw std::invalid_argument("backward: loss belongs to a different tape");
    const Array& lv = nodes_.at(loss.id).value;
    if (lv.size() != 1) throw ShapeError("backward: loss must be scalar, got shape " + shape_str(lv.shape()));
    if (!nodes_[loss.id].requires_grad) throw std::logic_error("backward: loss does not depend on any trainable leaf");
    grad_slot(loss.id)->fill(1.0);
    visit_order_.clear();
    for (std::uint32_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.backward || n.grad.empty()) continue;
      visit_order_.push_back(i);
      n.backward(*this, i);
    }
    for (auto& [param, id] : param_nodes_) {
      const Node& n = nodes_[id];
      if (n.requires_grad && !n.grad.empty()) {
        if (param->grad.shape() != param->value.shape()) param->grad = Array::zeros_like(param->value);
        param->grad += n.grad;
      }
    }
  }

  /// Node ids whose backward rule ran during the last sweep, in visit order.
  const std::vector<std::uint32_t>& last_visit_order() const { return visit_order_; }

  std::size_t size() const { return nodes_.size(); }

  /// Disables gradient recording for everything pushed afterwards.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  struct Node {
    Array value;
    Array grad;
    bool requires_grad = false;
    std::vector<std::uint32_t> inputs;
    BackwardFn backward;
    Parameter* param = nullptr;
  };

  Var push(Array value, bool rg, std::vector<std::uint32_t> inputs, BackwardFn fn, Parameter* p) {
    nodes_.push_back(Node{std::move(value), Array{}, rg, std::move(inputs), std::move(fn), p});
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  std::deque<Node> nodes_;
  std::unordered_map<Parameter*, std::uint32_t> param_nodes_;
  std::vector<std::uint32_t> visit_order_;
  bool grad_enabled_ = true;
};

inline const Array& Var::value() const { return tape->value(id); }
inline bool Var::requires_grad() const { return tape->requires_grad(id); }

}  // namespace wavllm::numerics
