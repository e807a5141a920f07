// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <vector>

#include "wavllm/common.hpp"
#include "wavllm/numerics/ops.hpp"

namespace wavllm::prompt_adapter {

using numerics::Parameter;
using numerics::Tape;
using numerics::Var;

/// Maps prompt hidden states t [M x D] to one scaling vector r [1 x D]:
/// o = GeLU(t P_down^T) P_up^T, w = softmax over positions of o W_A^T,
/// r = sum_m w_m o_m.
class PromptAdapter {
 public:
  PromptAdapter() = default;
  PromptAdapter(std::size_t dim, std::size_t bottleneck, Rng& rng, double up_std = 0.02) {
    if (dim == 0 || bottleneck == 0) throw std::invalid_argument("PromptAdapter: dims must be positive");
    down_ = {"pa.down", randn({bottleneck, dim}, rng, 1.0 / std::sqrt(static_cast<double>(dim)))};
    up_ = {"pa.up", randn({dim, bottleneck}, rng, up_std)};
    attn_ = {"pa.attn", Array({1, dim})};
  }

  std::size_t dim() const { return down_.value.cols(); }
  std::size_t bottleneck() const { return down_.value.rows(); }

  Parameter& down() { return down_; }
  Parameter& up() { return up_; }
  Parameter& attn() { return attn_; }

  std::vector<Parameter*> params() { return {&down_, &up_, &attn_}; }

  Var bottleneck(Tape& t, Var hidden) {
    using namespace numerics;
    return matmul_nt(gelu(matmul_nt(hidden, t.param(down_))), t.param(up_));
  }

  /// Softmax pooling weights over the M positions, as an [M x 1] column.
  Var pool_weights(Tape& t, Var o) { return numerics::softmax(numerics::matmul_nt(o, t.param(attn_)), 0); }

  Var pool(Tape& t, Var o) {
    if (o.value().rows() == 0) throw std::invalid_argument("pool: no positions");
    return numerics::sum(numerics::mul_col(o, pool_weights(t, o)), 0);
  }

  Var scaling(Tape& t, const Array& prompt_hidden) { return pool(t, bottleneck(t, t.constant(prompt_hidden))); }

 private:
  Parameter down_, up_, attn_;
};

}  // namespace wavllm::prompt_adapter
