// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "wavllm/common.hpp"
#include "wavllm/numerics/ops.hpp"

namespace wavllm::encoders {

using numerics::Parameter;
using numerics::Tape;
using numerics::Var;

/// Stack of frozen random affine maps with GeLU, stride 1.
class SyntheticEncoder {
 public:
  SyntheticEncoder() = default;
  SyntheticEncoder(const std::string& name, std::size_t in_dim, std::size_t dim, std::size_t layers, std::uint64_t seed,
                   double bias_std = 0.1)
      : in_dim_(in_dim), dim_(dim) {
    if (in_dim == 0 || dim == 0 || layers == 0) throw std::invalid_argument("SyntheticEncoder: dims and layer count must be positive");
    Rng rng(seed);
    for (std::size_t l = 0; l < layers; ++l) {
      const std::size_t fan_in = l ? dim : in_dim;
      weights_.emplace_back(name + ".l" + std::to_string(l) + ".w",
                            randn({dim, fan_in}, rng, 1.0 / std::sqrt(static_cast<double>(fan_in))), false);
      biases_.emplace_back(name + ".l" + std::to_string(l) + ".b",
                           bias_std > 0 ? randn({1, dim}, rng, bias_std) : Array({1, dim}), false);
    }
  }

  std::size_t layers() const { return weights_.size(); }
  std::size_t dim() const { return dim_; }
  std::size_t in_dim() const { return in_dim_; }

  /// Every layer's output, recorded on `tape`.
  std::vector<Var> encode_layers(Tape& tape, const FeatureSequence& speech) {
    if (speech.frames.empty()) throw std::invalid_argument("encode: empty speech input");
    if (speech.dim() != in_dim_)
      numerics::shape_fail("encode", speech.frames.shape(), Shape{speech.length(), in_dim_});
    std::vector<Var> out;
    Var x = tape.constant(speech.frames);
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      x = numerics::gelu(numerics::add_row(numerics::matmul_nt(x, tape.param(weights_[l])), tape.param(biases_[l])));
      out.push_back(x);
    }
    return out;
  }

  /// Semantic role: final layer only.
  FeatureSequence semantic_encode(const FeatureSequence& speech) {
    Tape t;
    t.set_grad_enabled(false);
    return {encode_layers(t, speech).back().value(), speech.frame_stride};
  }

  /// Acoustic role: all layers.
  std::vector<FeatureSequence> acoustic_encode(const FeatureSequence& speech) {
    Tape t;
    t.set_grad_enabled(false);
    std::vector<FeatureSequence> out;
    for (Var v : encode_layers(t, speech)) out.push_back({v.value(), speech.frame_stride});
    return out;
  }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out;
    for (std::size_t l = 0; l < weights_.size(); ++l) {
      out.push_back(&weights_[l]);
      out.push_back(&biases_[l]);
    }
    return out;
  }

 private:
  std::size_t in_dim_ = 0;
  std::size_t dim_ = 0;
  std::vector<Parameter> weights_;
  std::vector<Parameter> biases_;
};

/// Softmax-normalised mixing logits over encoder layers.
struct LayerWeights {
  Parameter logits;

  LayerWeights() = default;
  explicit LayerWeights(std::size_t layers) : logits("layer_weights", Array({1, layers}), true) {}

  std::vector<double> normalized() const {
    Tape t;
    Var w = numerics::softmax(t.constant(logits.value), 1);
    return w.value().storage();
  }
};

/// sum_l softmax(logits)_l * layer_l; the layers are stacked so the mix is a
/// single [1 x L] by [L x N*E] product.
inline Var layer_weighted_sum(const std::vector<Var>& layers, Var logits) {
  if (layers.empty()) throw std::invalid_argument("layer_weighted_sum: no layers");
  if (logits.value().rank() != 2 || logits.value().rows() != 1 || logits.value().cols() != layers.size())
    numerics::shape_fail("layer_weighted_sum", logits.shape(), Shape{1, layers.size()});
  const Shape shape = layers.front().shape();
  std::vector<Var> flat;
  for (Var l : layers) {
    if (l.shape() != shape) numerics::shape_fail("layer_weighted_sum", shape, l.shape());
    flat.push_back(numerics::reshape(l, {1, l.value().size()}));
  }
  Var w = numerics::softmax(logits, 1);
  return numerics::reshape(numerics::matmul(w, numerics::concat_rows(flat)), shape);
}

}  // namespace wavllm::encoders
