// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0
//
// Full speech LLM: frozen feature tables, encoders and decoder, plus the
// trainable layer weights, modality adapters, fusion layer, LoRA factors and
// prompt adapter.

#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "wavllm/adapters.hpp"
#include "wavllm/backbone.hpp"
#include "wavllm/config.hpp"
#include "wavllm/encoders.hpp"
#include "wavllm/prompt_adapter.hpp"
#include "wavllm/taskforge.hpp"

namespace wavllm {

using numerics::Parameter;
using numerics::Segment;
using numerics::Tape;
using numerics::Var;
using taskforge::InstructionSample;

/// Rewrites labels in place; `mask[i]` tells whether row i is scored.
using LabelHook = std::function<void(std::vector<std::size_t>& labels, const std::vector<double>& mask)>;

inline taskforge::TaskSpace make_task_space(const DataConfig& d) {
  taskforge::TaskSpace ts(d.translate_shift);
  ts.min_len = d.min_symbols;
  ts.max_len = d.max_symbols;
  ts.summary_k = d.summary_k;
  return ts;
}

/// Rows of a packed batch. Input row i reads row `rows[i]` of the table
/// [token embeddings; speech rows of every sample].
struct PackedBatch {
  std::vector<std::size_t> rows;
  std::vector<std::size_t> labels;  ///< next-token id for each row
  std::vector<double> mask;         ///< 1 where the next token is a target
  std::vector<std::size_t> owner;   ///< sample index per row
  std::vector<Segment> segments;
};

inline PackedBatch pack(const std::vector<taskforge::RenderedSample>& rendered, std::size_t vocab) {
  PackedBatch b;
  std::size_t speech_base = vocab;
  for (std::size_t s = 0; s < rendered.size(); ++s) {
    const auto& r = rendered[s];
    b.segments.push_back({b.rows.size(), r.ids.size()});
    for (std::size_t j = 0; j < r.ids.size(); ++j) {
      const bool speech = j >= r.speech_start && j < r.speech_start + r.speech_len;
      b.rows.push_back(speech ? speech_base + (j - r.speech_start) : r.ids[j]);
      const bool last = j + 1 == r.ids.size();
      b.labels.push_back(last ? 0 : r.ids[j + 1]);
      b.mask.push_back(last ? 0.0 : r.mask[j + 1]);
      b.owner.push_back(s);
    }
    speech_base += r.speech_len;
  }
  return b;
}

/// Mean next-token cross-entropy over the scored rows of `hidden`.
inline Var scored_loss(backbone::Backbone& bb, Tape& t, Var hidden, const PackedBatch& b) {
  std::vector<std::size_t> rows, targets;
  for (std::size_t i = 0; i < b.mask.size(); ++i)
    if (b.mask[i] == 1.0) {
      rows.push_back(i);
      targets.push_back(b.labels[i]);
    }
  if (rows.empty()) throw std::invalid_argument("loss: batch has no target tokens");
  Var logits = bb.logits(t, numerics::embedding_lookup(hidden, rows));
  const std::vector<double> ones(rows.size(), 1.0);
  return numerics::masked_cross_entropy(logits, targets, ones);
}

class WavLLM {
 public:
  WavLLM(const RunConfig& cfg, std::uint64_t init_seed)
      : cfg_(cfg), ts_(make_task_space(cfg.data)), vocab_(ts_) {
    const auto& m = cfg.model;
    const std::uint64_t w = cfg.data.world_seed;
    synth_ = taskforge::FeatureSynth(ts_, m.feat_dim, cfg.data.noise, w);
    sem_enc_ = encoders::SyntheticEncoder("enc.sem", m.feat_dim, m.sem_dim, m.sem_layers, mix_seed(w, 1), m.encoder_bias_std);
    ac_enc_ = encoders::SyntheticEncoder("enc.ac", m.feat_dim, m.ac_dim, m.ac_layers, mix_seed(w, 2), m.encoder_bias_std);
    backbone::BackboneConfig bc;
    bc.vocab = vocab_.size();
    bc.dim = m.dim;
    bc.depth = m.depth;
    bc.heads = m.heads;
    bc.max_len = m.max_len;
    bc.head_std = m.head_std;
    bb_ = backbone::Backbone(bc, mix_seed(w, 3));

    Rng rng(init_seed);
    lw_ = encoders::LayerWeights(m.ac_layers);
    sem_ad_ = adapters::ModalityAdapter("ad.sem", m.sem_dim, m.adapter_bottleneck, m.sem_dim, m.adapter_kernel, rng);
    ac_ad_ = adapters::ModalityAdapter("ad.ac", m.ac_dim, m.adapter_bottleneck, m.ac_dim, m.adapter_kernel, rng);
    fuse_ = adapters::FusionProjector(m.sem_dim, m.ac_dim, m.dim, rng);
    lora_ = backbone::LoraSet(m.depth, m.dim, m.lora_rank, rng, m.lora_a_std);
    pa_ = prompt_adapter::PromptAdapter(m.dim, m.pa_bottleneck, rng, m.pa_up_std);
  }

  WavLLM(const WavLLM&) = default;
  WavLLM& operator=(const WavLLM&) = default;

  const RunConfig& config() const { return cfg_; }
  const taskforge::TaskSpace& tasks() const { return ts_; }
  const taskforge::Vocab& vocab() const { return vocab_; }
  backbone::Backbone& base() { return bb_; }
  backbone::LoraSet& lora() { return lora_; }
  prompt_adapter::PromptAdapter& prompt_adapter() { return pa_; }
  encoders::LayerWeights& layer_weights() { return lw_; }

  /// Every parameter, ordered by name.
  std::vector<Parameter*> params() {
    std::vector<Parameter*> out{&lw_.logits};
    for (auto* group : {&sem_enc_, &ac_enc_})
      for (Parameter* p : group->params()) out.push_back(p);
    for (Parameter* p : bb_.params()) out.push_back(p);
    for (auto* group : {&sem_ad_, &ac_ad_})
      for (Parameter* p : group->params()) out.push_back(p);
    for (Parameter* p : fuse_.params()) out.push_back(p);
    for (Parameter* p : lora_.params()) out.push_back(p);
    for (Parameter* p : pa_.params()) out.push_back(p);
    std::sort(out.begin(), out.end(), [](const Parameter* a, const Parameter* b) { return a->name < b->name; });
    return out;
  }

  Parameter& param(const std::string& name) {
    for (Parameter* p : params())
      if (p->name == name) return *p;
    throw std::out_of_range("unknown parameter '" + name + "'");
  }

  /// Applies `selected` to every parameter name and sets the trainable flags.
  void set_trainable(const std::function<bool(const std::string&)>& selected) {
    for (Parameter* p : params()) p->trainable = selected(p->name);
  }

  /// Fused speech embedding, one row per latent symbol.
  Var speech_embedding(Tape& t, const InstructionSample& s) {
    const FeatureSequence f = synth_.synthesize(s);
    Var sem = sem_ad_.adapt(t, sem_enc_.encode_layers(t, f).back());
    Var ac = ac_ad_.adapt(t, encoders::layer_weighted_sum(ac_enc_.encode_layers(t, f), t.param(lw_.logits)));
    Var e = fuse_.fuse(t, sem, ac);
    if (e.value().rows() != s.symbols.size())
      throw std::logic_error("speech_embedding: " + std::to_string(e.value().rows()) + " rows for " +
                             std::to_string(s.symbols.size()) + " speech slots");
    return e;
  }

  /// Base-model hidden states of the bare instruction text, cached per prompt.
  const Array& prompt_states(const std::string& prompt) {
    auto it = prompt_cache_.find(prompt);
    if (it == prompt_cache_.end()) it = prompt_cache_.emplace(prompt, bb_.prompt_hidden(vocab_.encode(prompt))).first;
    return it->second;
  }

  void clear_prompt_cache() { prompt_cache_.clear(); }

  Var scaling(Tape& t, const std::string& prompt) { return pa_.scaling(t, prompt_states(prompt)); }

  /// Target-only next-token loss over a packed batch.
  Var loss(Tape& t, const std::vector<InstructionSample>& samples, bool use_pa, const LabelHook& hook = {}) {
    if (samples.empty()) throw std::invalid_argument("loss: empty batch");
    std::vector<taskforge::RenderedSample> rendered;
    std::vector<Var> table{t.param(bb_.embedding())};
    for (const auto& s : samples) {
      rendered.push_back(taskforge::render_template(s, vocab_, cfg_.model.max_len));
      table.push_back(speech_embedding(t, s));
    }
    PackedBatch b = pack(rendered, vocab_.size());
    if (hook) hook(b.labels, b.mask);
    Var x = numerics::embedding_lookup(numerics::concat_rows(table), b.rows);
    Var r;
    backbone::Adaptation ad{&lora_, nullptr};
    if (use_pa) {
      std::vector<Var> rs;
      for (const auto& s : samples) rs.push_back(scaling(t, s.prompt));
      r = samples.size() == 1 ? rs.front() : numerics::embedding_lookup(numerics::concat_rows(rs), b.owner);
      ad.scaling = &r;
    }
    return scored_loss(bb_, t, bb_.hidden(t, x, b.segments, ad), b);
  }

  /// Same loss with the text stand-in for speech: each slot holds the
  /// embedding of its symbol word plus that of the category word. Used to
  /// pretrain the decoder before it is frozen.
  Var text_loss(Tape& t, const std::vector<InstructionSample>& samples) {
    if (samples.empty()) throw std::invalid_argument("text_loss: empty batch");
    std::vector<taskforge::RenderedSample> rendered;
    Var emb = t.param(bb_.embedding());
    std::vector<Var> table{emb};
    for (const auto& s : samples) {
      rendered.push_back(taskforge::render_template(s, vocab_, cfg_.model.max_len));
      std::vector<std::size_t> sym;
      for (auto c : s.symbols) sym.push_back(vocab_.id(taskforge::TaskSpace::symbol(c)));
      Var cat = numerics::embedding_lookup(emb, std::vector<std::size_t>{vocab_.id(ts_.categories.at(s.category))});
      table.push_back(numerics::add_row(numerics::embedding_lookup(emb, sym), cat));
    }
    PackedBatch b = pack(rendered, vocab_.size());
    Var x = numerics::embedding_lookup(numerics::concat_rows(table), b.rows);
    return scored_loss(bb_, t, bb_.hidden(t, x, b.segments), b);
  }

  /// Greedy decoding after [/INST]; stops after <eos> (included) or
  /// `max_new` tokens. `with_lora == false` decodes with the base weights.
  std::vector<std::size_t> generate_ids(const InstructionSample& s, bool use_pa, std::size_t max_new,
                                        bool with_lora = true) {
    if (max_new == 0) throw std::invalid_argument("generate: max_new must be at least 1");
    using RowVec = backbone::Decoder::RowVec;
    Tape t;
    t.set_grad_enabled(false);
    const auto r = taskforge::render_template(s, vocab_, cfg_.model.max_len, false);
    const Array speech = speech_embedding(t, s).value();
    Array rv;
    if (use_pa) rv = scaling(t, s.prompt).value();
    backbone::Decoder dec(bb_, with_lora ? &lora_ : nullptr, use_pa && with_lora ? &rv : nullptr);
    const auto emb = numerics::detail::cmat(bb_.embedding().value);
    const auto sp = numerics::detail::cmat(speech);
    RowVec logits;
    for (std::size_t j = 0; j < r.ids.size(); ++j) {
      const bool is_speech = j >= r.speech_start && j < r.speech_start + r.speech_len;
      logits = dec.step(is_speech ? RowVec(sp.row(j - r.speech_start)) : RowVec(emb.row(r.ids[j])));
    }
    const std::size_t eos = vocab_.id("<eos>");
    std::vector<std::size_t> out;
    while (out.size() < max_new) {
      Eigen::Index best = 0;
      logits.maxCoeff(&best);
      out.push_back(static_cast<std::size_t>(best));
      if (out.back() == eos || dec.length() >= cfg_.model.max_len) break;
      logits = dec.step(emb.row(best));
    }
    return out;
  }

  std::string generate(const InstructionSample& s, bool use_pa, std::size_t max_new) {
    auto ids = generate_ids(s, use_pa, max_new);
    if (!ids.empty() && ids.back() == vocab_.id("<eos>")) ids.pop_back();
    return vocab_.decode(ids);
  }

 private:
  RunConfig cfg_;
  taskforge::TaskSpace ts_;
  taskforge::Vocab vocab_;
  taskforge::FeatureSynth synth_;
  encoders::SyntheticEncoder sem_enc_, ac_enc_;
  backbone::Backbone bb_;
  encoders::LayerWeights lw_;
  adapters::ModalityAdapter sem_ad_, ac_ad_;
  adapters::FusionProjector fuse_;
  backbone::LoraSet lora_;
  prompt_adapter::PromptAdapter pa_;
  std::map<std::string, Array> prompt_cache_;
};

}  // namespace wavllm
