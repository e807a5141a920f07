// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer: learned positions, pre-RMSNorm blocks with
// causal multi-head attention and a GeLU MLP, no biases. Activations are
// row-major [positions x D]; every weight is stored [out x in] and applied
// as x W^T.

#pragma once

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "wavllm/common.hpp"
#include "wavllm/numerics/ops.hpp"

namespace wavllm::backbone {

using numerics::Parameter;
using numerics::Segment;
using numerics::Tape;
using numerics::Var;

struct BackboneConfig {
  std::size_t vocab = 0;
  std::size_t dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t max_len = 160;
  std::size_t mlp_mult = 4;
  double emb_std = 1.0;
  double pos_std = 0.3;
  double head_std = 0.03;
};

inline constexpr double kNormEps = 1e-6;

enum Proj : std::size_t { kQ = 0, kK = 1, kV = 2, kO = 3 };
inline constexpr std::array<const char*, 4> kProjNames{"q", "k", "v", "o"};

struct Block {
  std::array<Parameter, 4> attn;  ///< q, k, v, o: D x D
  Parameter w1;                   ///< mlp_mult*D x D
  Parameter w2;                   ///< D x mlp_mult*D
};

/// Frozen low-rank pair for one projection: A is R x D, B is D x R.
struct AdaptiveLoraLayer {
  Parameter a;
  Parameter b;
  std::string site;  ///< injection point, e.g. "l2.v"
};

/// LoRA factors for every block and projection.
class LoraSet {
 public:
  LoraSet() = default;
  LoraSet(std::size_t depth, std::size_t dim, std::size_t rank, Rng& rng, double a_std) {
    if (rank == 0) throw std::invalid_argument("LoraSet: rank must be positive");
    layers_.resize(depth);
    for (std::size_t l = 0; l < depth; ++l)
      for (std::size_t p = 0; p < 4; ++p) {
        const std::string site = "l" + std::to_string(l) + "." + kProjNames[p];
        layers_[l][p] = {{"lora." + site + ".a", randn({rank, dim}, rng, a_std)}, {"lora." + site + ".b", Array({dim, rank})}, site};
      }
  }

  AdaptiveLoraLayer& at(std::size_t layer, Proj p) { return layers_.at(layer)[p]; }
  const AdaptiveLoraLayer& at(std::size_t layer, Proj p) const { return layers_.at(layer)[p]; }
  std::size_t depth() const { return layers_.size(); }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out;
    for (auto& l : layers_)
      for (auto& p : l) {
        out.push_back(&p.a);
        out.push_back(&p.b);
      }
    return out;
  }

 private:
  std::vector<std::array<AdaptiveLoraLayer, 4>> layers_;
};

/// h = x W0^T + ((x A^T) B^T) ⊙ r, with r either one [1 x D] row broadcast
/// over all positions or a per-row [T x D] matrix. Without r the low-rank
/// branch is added unscaled.
inline Var lora_linear(Var x, Var w0, Var a, Var b, const Var* r) {
  using namespace numerics;
  Var base = matmul_nt(x, w0);
  Var low = matmul_nt(matmul_nt(x, a), b);
  if (r) {
    const Array& rv = r->value();
    if (rv.rank() != 2 || rv.cols() != base.value().cols())
      throw ShapeError("lora_linear: scaling vector has shape " + shape_str(rv.shape()) + ", expected " +
                       std::to_string(base.value().cols()) + " columns");
    low = rv.rows() == 1 ? mul_row(low, *r) : mul(low, *r);
  }
  return add(base, low);
}

/// LoRA state passed into a forward pass; `lora == nullptr` runs the base.
struct Adaptation {
  LoraSet* lora = nullptr;
  const Var* scaling = nullptr;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    if (cfg.vocab == 0 || cfg.dim == 0 || cfg.depth == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0)
      throw std::invalid_argument("Backbone: invalid dimensions");
    Rng rng(seed);
    const double d = static_cast<double>(cfg.dim);
    const std::size_t hidden = cfg.mlp_mult * cfg.dim;
    emb_ = {"bb.emb", randn({cfg.vocab, cfg.dim}, rng, cfg.emb_std), false};
    pos_ = {"bb.pos", randn({cfg.max_len, cfg.dim}, rng, cfg.pos_std), false};
    head_ = {"bb.head", randn({cfg.vocab, cfg.dim}, rng, cfg.head_std), false};
    blocks_.resize(cfg.depth);
    for (std::size_t l = 0; l < cfg.depth; ++l) {
      const std::string pre = "bb.l" + std::to_string(l) + ".";
      for (std::size_t p = 0; p < 4; ++p)
        blocks_[l].attn[p] = {pre + kProjNames[p], randn({cfg.dim, cfg.dim}, rng, 1.0 / std::sqrt(d)), false};
      blocks_[l].w1 = {pre + "w1", randn({hidden, cfg.dim}, rng, 1.0 / std::sqrt(d)), false};
      blocks_[l].w2 = {pre + "w2", randn({cfg.dim, hidden}, rng, 1.0 / std::sqrt(static_cast<double>(hidden))), false};
    }
  }

  const BackboneConfig& config() const { return cfg_; }
  Parameter& embedding() { return emb_; }
  Parameter& positions() { return pos_; }
  Parameter& head() { return head_; }
  Block& block(std::size_t l) { return blocks_.at(l); }
  const Block& block(std::size_t l) const { return blocks_.at(l); }
  const Parameter& embedding() const { return emb_; }
  const Parameter& positions() const { return pos_; }
  const Parameter& head() const { return head_; }

  std::vector<Parameter*> params() {
    std::vector<Parameter*> out{&emb_, &pos_, &head_};
    for (auto& b : blocks_) {
      for (auto& p : b.attn) out.push_back(&p);
      out.push_back(&b.w1);
      out.push_back(&b.w2);
    }
    return out;
  }

  /// Final hidden states for packed input embeddings x [T x D]; positions
  /// restart at 0 in every segment.
  Var hidden(Tape& t, Var x, std::span<const Segment> segments, Adaptation ad = {}) {
    using namespace numerics;
    std::vector<std::size_t> pos_ids;
    for (const Segment& s : segments) {
      if (s.length > cfg_.max_len)
        throw std::length_error("Backbone: sequence of " + std::to_string(s.length) + " exceeds max length " +
                                std::to_string(cfg_.max_len));
      for (std::size_t i = 0; i < s.length; ++i) pos_ids.push_back(i);
    }
    if (x.value().rank() != 2 || x.value().cols() != cfg_.dim || x.value().rows() != pos_ids.size())
      shape_fail("Backbone::hidden", x.shape(), Shape{pos_ids.size(), cfg_.dim});
    if (ad.lora && ad.lora->depth() != cfg_.depth) throw std::invalid_argument("Backbone: LoRA depth mismatch");
    Var h = add(x, embedding_lookup(t.param(pos_), pos_ids));
    for (std::size_t l = 0; l < cfg_.depth; ++l) {
      Block& b = blocks_[l];
      auto proj = [&](Var in, Proj p) {
        if (!ad.lora) return matmul_nt(in, t.param(b.attn[p]));
        AdaptiveLoraLayer& lr = ad.lora->at(l, p);
        return lora_linear(in, t.param(b.attn[p]), t.param(lr.a), t.param(lr.b), ad.scaling);
      };
      Var z = rms_norm(h, kNormEps);
      Var att = causal_attention(proj(z, kQ), proj(z, kK), proj(z, kV), segments, cfg_.heads);
      h = add(h, proj(att, kO));
      Var m = matmul_nt(gelu(matmul_nt(rms_norm(h, kNormEps), t.param(b.w1))), t.param(b.w2));
      h = add(h, m);
    }
    return h;
  }

  Var logits(Tape& t, Var h) { return numerics::matmul_nt(h, t.param(head_)); }

  /// Final-layer hidden states of a text-only pass over `prompt` with base
  /// weights only.
  Array prompt_hidden(const std::vector<std::size_t>& prompt) {
    if (prompt.empty()) throw std::invalid_argument("prompt_hidden: empty prompt");
    Tape t;
    t.set_grad_enabled(false);
    Var x = numerics::embedding_lookup(t.param(emb_), prompt);
    const Segment seg{0, prompt.size()};
    return hidden(t, x, std::span<const Segment>(&seg, 1)).value();
  }

 private:
  BackboneConfig cfg_;
  Parameter emb_, pos_, head_;
  std::vector<Block> blocks_;
};

/// Incremental single-sequence evaluation with cached keys and values, used
/// for greedy decoding. Mirrors Backbone::hidden for one segment.
class Decoder {
 public:
  using RowMat = numerics::detail::RowMat;
  using RowVec = Eigen::Matrix<double, 1, Eigen::Dynamic>;

  Decoder(const Backbone& bb, const LoraSet* lora, const Array* scaling) : bb_(bb), lora_(lora) {
    const auto& c = bb.config();
    if (scaling) {
      if (scaling->size() != c.dim) throw numerics::ShapeError("Decoder: scaling vector size " + std::to_string(scaling->size()));
      r_ = Eigen::Map<const RowVec>(scaling->data(), c.dim);
    }
    keys_.assign(c.depth, RowMat(c.max_len, c.dim));
    values_.assign(c.depth, RowMat(c.max_len, c.dim));
  }

  std::size_t length() const { return len_; }

  /// Feeds one input embedding row; returns the next-token logits.
  RowVec step(const RowVec& x) {
    const auto& c = bb_.config();
    if (len_ >= c.max_len) throw std::length_error("Decoder: sequence exceeds max length " + std::to_string(c.max_len));
    const std::size_t hd = c.dim / c.heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    RowVec h = x + map(bb_.positions().value).row(len_);
    for (std::size_t l = 0; l < c.depth; ++l) {
      const Block& b = bb_.block(l);
      RowVec z = rms(h);
      keys_[l].row(len_) = proj(z, l, kK);
      values_[l].row(len_) = proj(z, l, kV);
      RowVec q = proj(z, l, kQ);
      RowVec att(c.dim);
      const std::size_t n = len_ + 1;
      for (std::size_t hh = 0; hh < c.heads; ++hh) {
        RowVec s = (q.segment(hh * hd, hd) * keys_[l].block(0, hh * hd, n, hd).transpose()) * scale;
        s = (s.array() - s.maxCoeff()).exp();
        s /= s.sum();
        att.segment(hh * hd, hd) = s * values_[l].block(0, hh * hd, n, hd);
      }
      h += proj(att, l, kO);
      RowVec m = rms(h) * map(b.w1.value).transpose();
      for (auto& v : m) v = numerics::detail::gelu(v);
      h += m * map(b.w2.value).transpose();
    }
    ++len_;
    return h * map(bb_.head().value).transpose();
  }

 private:
  static Eigen::Map<const RowMat> map(const Array& a) { return numerics::detail::cmat(a); }

  static RowVec rms(const RowVec& x) {
    const double ms = x.squaredNorm() / static_cast<double>(x.size());
    return x / std::sqrt(ms + kNormEps);
  }

  RowVec proj(const RowVec& x, std::size_t l, Proj p) const {
    RowVec out = x * map(bb_.block(l).attn[p].value).transpose();
    if (lora_) {
      const AdaptiveLoraLayer& lr = lora_->at(l, p);
      RowVec low = (x * map(lr.a.value).transpose()) * map(lr.b.value).transpose();
      if (r_) low = low.cwiseProduct(*r_);
      out += low;
    }
    return out;
  }

  const Backbone& bb_;
  const LoraSet* lora_;
  std::optional<RowVec> r_;
  std::vector<RowMat> keys_, values_;
  std::size_t len_ = 0;
};

}  // namespace wavllm::backbone
