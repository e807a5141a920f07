// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "wavllm/common.hpp"
#include "wavllm/numerics/ops.hpp"

namespace wavllm::adapters {

using numerics::Parameter;
using numerics::Tape;
using numerics::Var;

inline constexpr std::size_t kStageStride = 2;

/// Frame count after both stride-2 convolutions: ceil(ceil(N/2)/2).
inline std::size_t adapted_length(std::size_t n) {
  return numerics::conv1d_out_len(numerics::conv1d_out_len(n, kStageStride), kStageStride);
}

/// conv(stride 2) + GeLU, conv(stride 2) + GeLU, residual bottleneck
/// x + Up GeLU(Down x), then a linear projector.
class ModalityAdapter {
 public:
  ModalityAdapter() = default;
  ModalityAdapter(const std::string& name, std::size_t in_dim, std::size_t bottleneck, std::size_t out_dim,
                  std::size_t kernel, Rng& rng) {
    if (kernel % 2 == 0) throw std::invalid_argument("ModalityAdapter: kernel size must be odd");
    const double e = static_cast<double>(in_dim);
    conv1_k_ = {name + ".conv1.k", randn({in_dim, in_dim, kernel}, rng, 1.0 / std::sqrt(e * kernel))};
    conv1_b_ = {name + ".conv1.b", Array({1, in_dim})};
    conv2_k_ = {name + ".conv2.k", randn({in_dim, in_dim, kernel}, rng, 1.0 / std::sqrt(e * kernel))};
    conv2_b_ = {name + ".conv2.b", Array({1, in_dim})};
    down_ = {name + ".down", randn({bottleneck, in_dim}, rng, 1.0 / std::sqrt(e))};
    up_ = {name + ".up", randn({in_dim, bottleneck}, rng, 0.01)};
    proj_w_ = {name + ".proj.w", randn({out_dim, in_dim}, rng, 1.0 / std::sqrt(e))};
    proj_b_ = {name + ".proj.b", Array({1, out_dim})};
  }

  std::size_t out_dim() const { return proj_w_.value.rows(); }

  Var adapt(Tape& t, Var seq) {
    using namespace numerics;
    if (seq.value().empty()) throw std::invalid_argument("adapt: empty input sequence");
    Var y = gelu(conv1d(seq, t.param(conv1_k_), t.param(conv1_b_), kStageStride));
    y = gelu(conv1d(y, t.param(conv2_k_), t.param(conv2_b_), kStageStride));
    y = add(y, matmul_nt(gelu(matmul_nt(y, t.param(down_))), t.param(up_)));
    return add_row(matmul_nt(y, t.param(proj_w_)), t.param(proj_b_));
  }

  std::vector<Parameter*> params() {
    return {&conv1_k_, &conv1_b_, &conv2_k_, &conv2_b_, &down_, &up_, &proj_w_, &proj_b_};
  }

  Parameter& up() { return up_; }

 private:
  Parameter conv1_k_, conv1_b_, conv2_k_, conv2_b_, down_, up_, proj_w_, proj_b_;
};

/// Concatenates the two adapted streams along features and projects to D.
class FusionProjector {
 public:
  FusionProjector() = default;
  FusionProjector(std::size_t sem_dim, std::size_t ac_dim, std::size_t model_dim, Rng& rng)
      : sem_dim_(sem_dim), ac_dim_(ac_dim) {
    w_ = {"fuse.w", randn({model_dim, sem_dim + ac_dim}, rng, 1.0 / std::sqrt(static_cast<double>(sem_dim + ac_dim)))};
    b_ = {"fuse.b", Array({1, model_dim})};
  }

  Var fuse(Tape& t, Var sem, Var ac) {
    using namespace numerics;
    if (sem.value().rows() != ac.value().rows())
      throw ShapeError("fuse: frame-count mismatch " + std::to_string(sem.value().rows()) + " vs " +
                       std::to_string(ac.value().rows()));
    if (sem.value().cols() != sem_dim_ || ac.value().cols() != ac_dim_)
      shape_fail("fuse", Shape{sem.value().cols(), ac.value().cols()}, Shape{sem_dim_, ac_dim_});
    return add_row(matmul_nt(concat_cols({sem, ac}), t.param(w_)), t.param(b_));
  }

  std::vector<Parameter*> params() { return {&w_, &b_}; }
  Parameter& weight() { return w_; }
  Parameter& bias() { return b_; }

 private:
  std::size_t sem_dim_ = 0;
  std::size_t ac_dim_ = 0;
  Parameter w_, b_;
};

}  // namespace wavllm::adapters
