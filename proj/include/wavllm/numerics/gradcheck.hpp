// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "wavllm/numerics/array.hpp"
#include "wavllm/numerics/tape.hpp"

namespace wavllm::numerics {

/// Worst entry found by a finite-difference sweep.
struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t entries = 0;
  std::size_t worst_leaf = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double max_abs_error = 0.0;
  double max_abs_grad = 0.0;

  /// Largest absolute error over the largest analytic entry. Entries far
  /// below the function's gradient scale lose most of their digits to
  /// rounding in the difference quotient; this form is not thrown off by them.
  double scaled_error() const { return max_abs_grad > 0 ? max_abs_error / max_abs_grad : max_abs_error; }
};

class NonDeterministicError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr double kGradCheckFloor = 1e-8;

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kGradCheckFloor});
  return std::abs(analytic - numeric) / denom;
}

namespace detail {

inline void require_step(double step) {
  if (!(step > 0.0)) throw std::invalid_argument("finite_diff_check: step must be positive");
}

inline void update_report(GradCheckReport& rep, std::size_t leaf, std::size_t idx, double a, double c) {
  const double e = relative_error(a, c);
  ++rep.entries;
  rep.max_abs_error = std::max(rep.max_abs_error, std::abs(a - c));
  rep.max_abs_grad = std::max(rep.max_abs_grad, std::abs(a));
  if (e > rep.max_rel_error || rep.entries == 1) {
    rep.max_rel_error = std::max(rep.max_rel_error, e);
    rep.worst_leaf = leaf;
    rep.worst_index = idx;
    rep.worst_analytic = a;
    rep.worst_numeric = c;
  }
}

}  // namespace detail

/// Scalar function of tape leaves.
using LeafFn = std::function<Var(Tape&, std::span<const Var>)>;

/// Compares reverse-mode gradients of `fn` at `leaves` with central
/// differences (f(x+h) - f(x-h)) / 2h over every entry of every leaf.
inline GradCheckReport finite_diff_check(const LeafFn& fn, std::vector<Array> leaves, double step = 1e-5) {
  detail::require_step(step);
  auto eval = [&](bool with_grad, std::vector<Array>* grads) {
    Tape tape;
    tape.set_grad_enabled(with_grad);
    std::vector<Var> vars;
    vars.reserve(leaves.size());
    for (const Array& l : leaves) vars.push_back(tape.input(l, with_grad));
    Var loss = fn(tape, vars);
    if (loss.value().size() != 1) throw ShapeError("finite_diff_check: function must return a scalar, got " + shape_str(loss.shape()));
    const double v = loss.value()[0];
    if (grads) {
      tape.backward(loss);
      for (const Var& x : vars) grads->push_back(tape.has_grad(x) ? tape.grad(x) : Array::zeros_like(x.value()));
    }
    return v;
  };

  std::vector<Array> analytic;
  const double f0 = eval(true, &analytic);
  if (eval(false, nullptr) != f0) throw NonDeterministicError("finite_diff_check: two evaluations at the same point differ");

  GradCheckReport rep;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    for (std::size_t i = 0; i < leaves[l].size(); ++i) {
      const double x0 = leaves[l][i];
      leaves[l][i] = x0 + step;
      const double fp = eval(false, nullptr);
      leaves[l][i] = x0 - step;
      const double fm = eval(false, nullptr);
      leaves[l][i] = x0;
      detail::update_report(rep, l, i, analytic[l][i], (fp - fm) / (2.0 * step));
    }
  }
  return rep;
}

/// Same check over model parameters: `fn` builds the loss from scratch on a
/// fresh tape, reading parameter values via Tape::param. Only entries listed
/// in `params` are perturbed; their trainable flags are honoured as-is.
inline GradCheckReport finite_diff_check(const std::function<Var(Tape&)>& fn, std::span<Parameter* const> params,
                                         double step = 1e-5) {
  detail::require_step(step);
  for (Parameter* p : params) p->zero_grad();
  double f0 = 0.0;
  {
    Tape tape;
    Var loss = fn(tape);
    if (loss.value().size() != 1) throw ShapeError("finite_diff_check: function must return a scalar, got " + shape_str(loss.shape()));
    f0 = loss.value()[0];
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape tape;
    tape.set_grad_enabled(false);
    return fn(tape).value()[0];
  };
  if (eval() != f0) throw NonDeterministicError("finite_diff_check: two evaluations at the same point differ");

  GradCheckReport rep;
  for (std::size_t l = 0; l < params.size(); ++l) {
    Parameter& p = *params[l];
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double x0 = p.value[i];
      p.value[i] = x0 + step;
      const double fp = eval();
      p.value[i] = x0 - step;
      const double fm = eval();
      p.value[i] = x0;
      detail::update_report(rep, l, i, p.grad[i], (fp - fm) / (2.0 * step));
    }
  }
  return rep;
}

}  // namespace wavllm::numerics
