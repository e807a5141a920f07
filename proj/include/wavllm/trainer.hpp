// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "wavllm/model.hpp"

namespace wavllm::trainer {

using taskforge::Split;
using taskforge::TaskKind;

/// Linear warmup over the first `warmup` fraction of steps, then linear
/// decay to zero at `total`.
inline double lr_at(std::size_t step, std::size_t total, double peak, double warmup = 0.1) {
  if (step > total) throw std::out_of_range("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  const auto wu = std::max<std::size_t>(1, static_cast<std::size_t>(static_cast<double>(total) * warmup));
  if (step < wu) return peak * static_cast<double>(step) / static_cast<double>(wu);
  if (total == wu) return peak;
  return peak * static_cast<double>(total - step) / static_cast<double>(total - wu);
}

inline double lr_at(std::size_t step, const StageConfig& c) { return lr_at(step, c.steps, c.lr, c.warmup); }

struct OptimizerState {
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Array> m, v;
};

/// One bias-corrected Adam update of every parameter in `params`, reading
/// Parameter::grad.
inline void adam_step(const std::vector<Parameter*>& params, OptimizerState& st, double lr) {
  for (const Parameter* p : params) {
    if (p->grad.shape() != p->value.shape()) throw numerics::ShapeError("adam_step: gradient shape mismatch for " + p->name);
    for (double g : p->grad.values())
      if (!std::isfinite(g)) throw std::runtime_error("adam_step: non-finite gradient in parameter '" + p->name + "'");
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (Parameter* p : params) {
    auto [mi, new_m] = st.m.try_emplace(p->name, Array::zeros_like(p->value));
    auto [vi, new_v] = st.v.try_emplace(p->name, Array::zeros_like(p->value));
    Array& m = mi->second;
    Array& v = vi->second;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double g = p->grad[i];
      m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * g;
      v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * g * g;
      p->value[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + st.eps);
    }
  }
}

// ---------------------------------------------------------------- selectors

enum class Selector { Backbone, Stage1, Stage2 };

inline bool starts_with(const std::string& s, std::string_view p) { return s.rfind(p, 0) == 0; }

inline bool selected(Selector sel, const std::string& name) {
  switch (sel) {
    case Selector::Backbone: return starts_with(name, "bb.");
    case Selector::Stage1:
      return name == "layer_weights" || starts_with(name, "ad.") || starts_with(name, "fuse.") ||
             starts_with(name, "lora.");
    case Selector::Stage2: return selected(Selector::Stage1, name) || starts_with(name, "pa.");
  }
  return false;
}

inline Selector selector_for(const StageConfig& c) { return c.use_prompt_adapter ? Selector::Stage2 : Selector::Stage1; }

inline std::vector<Parameter*> trainables(WavLLM& model, Selector sel) {
  std::vector<Parameter*> out;
  for (Parameter* p : model.params())
    if (selected(sel, p->name)) out.push_back(p);
  return out;
}

// ---------------------------------------------------------------- data

inline constexpr double kChainShare = 0.15;

/// Random multi-task kind list: 2 or 3 distinct kinds, or the chained
/// transcribe/summarize/translate triple.
inline InstructionSample draw_multi(const taskforge::TaskSpace& ts, Rng& rng, std::uint64_t seed, Split split,
                                    double chain_share) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < chain_share)
    return taskforge::synth_multitask(ts, {TaskKind::Transcribe, TaskKind::Summarize, TaskKind::Translate}, seed, split, true);
  std::vector<TaskKind> pool(taskforge::kAllKinds.begin(), taskforge::kAllKinds.end());
  const std::size_t n = 2 + uniform_index(rng, 2);
  std::vector<TaskKind> kinds;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = uniform_index(rng, pool.size());
    kinds.push_back(pool[j]);
    pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(j));
  }
  return taskforge::synth_multitask(ts, kinds, seed, split);
}

/// Sample `index` of batch `step`; a pure function of its arguments.
inline InstructionSample draw_sample(const taskforge::TaskSpace& ts, const StageConfig& c, double chain_share,
                                     std::size_t step, std::size_t index) {
  Rng rng(mix_seed(mix_seed(c.seed, step), index));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::uint64_t seed = rng();
  if (u(rng) < c.multi_fraction) return draw_multi(ts, rng, seed, Split::Train, chain_share);
  const TaskKind k = taskforge::kAllKinds[uniform_index(rng, taskforge::kAllKinds.size())];
  return taskforge::synth_single(ts, k, seed, Split::Train);
}

inline std::vector<InstructionSample> draw_batch(const taskforge::TaskSpace& ts, const StageConfig& c, double chain_share,
                                                 std::size_t step) {
  std::vector<InstructionSample> out;
  for (std::size_t i = 0; i < c.batch; ++i) out.push_back(draw_sample(ts, c, chain_share, step, i));
  return out;
}

/// Multi-task targets for decoder pretraining: "echo answer ; echo answer".
inline InstructionSample plain_multi(InstructionSample s) {
  if (!s.multi()) return s;
  s.target.clear();
  for (std::size_t i = 0; i < s.tasks.size(); ++i) s.target += (i ? " ; " : "") + s.tasks[i].echo + " " + s.tasks[i].answer;
  return s;
}

/// Pretraining sample: either prompt bank, plain multi-task targets.
inline InstructionSample draw_pretrain_sample(const taskforge::TaskSpace& ts, const PretrainConfig& c, std::size_t step,
                                              std::size_t index) {
  Rng rng(mix_seed(mix_seed(c.seed, step), index));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::uint64_t seed = rng();
  const Split split = uniform_index(rng, 2) ? Split::HeldOut : Split::Train;
  if (u(rng) < c.multi_fraction) return plain_multi(draw_multi(ts, rng, seed, split, kChainShare));
  const TaskKind k = taskforge::kAllKinds[uniform_index(rng, taskforge::kAllKinds.size())];
  return taskforge::synth_single(ts, k, seed, split);
}

// ---------------------------------------------------------------- loops

struct StepRecord {
  std::size_t step;
  double lr;
  double loss;
};

/// Resumable training progress of one stage.
struct TrainState {
  int stage = 0;
  std::size_t step = 0;  ///< completed steps
  OptimizerState opt;
};

struct TrainOptions {
  std::size_t stop_after = SIZE_MAX;  ///< halt once this many steps are complete
  LabelHook label_hook;
  std::function<void(const StepRecord&)> on_step;
};

namespace detail {

template <class LossFn>
std::vector<StepRecord> run(WavLLM& model, Selector sel, const StageConfig& c, TrainState& st, const TrainOptions& opt,
                            LossFn&& loss_fn) {
  model.set_trainable([&](const std::string& n) { return selected(sel, n); });
  const auto params = trainables(model, sel);
  std::vector<StepRecord> out;
  while (st.step < c.steps && st.step < opt.stop_after) {
    for (Parameter* p : params) p->zero_grad();
    Tape t;
    Var loss = loss_fn(t, st.step);
    t.backward(loss);
    const double lr = lr_at(st.step, c);
    adam_step(params, st.opt, lr);
    StepRecord r{st.step, lr, loss.value()[0]};
    out.push_back(r);
    if (opt.on_step) opt.on_step(r);
    ++st.step;
  }
  for (Parameter* p : model.params()) p->trainable = false;
  return out;
}

}  // namespace detail

/// Text-only decoder pretraining (stage 0): trains the decoder weights and
/// leaves them frozen.
inline std::vector<StepRecord> pretrain_backbone(WavLLM& model, const PretrainConfig& c, TrainState& st,
                                                 const TrainOptions& opt = {}) {
  if (st.stage != 0) throw std::invalid_argument("pretrain_backbone: state belongs to stage " + std::to_string(st.stage));
  StageConfig sc;
  sc.stage = 0;
  sc.steps = c.steps;
  sc.lr = c.lr;
  sc.batch = c.batch;
  sc.seed = c.seed;
  auto recs = detail::run(model, Selector::Backbone, sc, st, opt, [&](Tape& t, std::size_t step) {
    std::vector<InstructionSample> batch;
    for (std::size_t i = 0; i < c.batch; ++i) batch.push_back(draw_pretrain_sample(model.tasks(), c, step, i));
    return model.text_loss(t, batch);
  });
  model.clear_prompt_cache();
  return recs;
}

/// One curriculum stage. `st` carries optimizer state when resuming and
/// must be fresh (step 0) otherwise.
inline std::vector<StepRecord> train_stage(WavLLM& model, const StageConfig& c, double chain_share, TrainState& st,
                                           const TrainOptions& opt = {}) {
  if (st.stage != c.stage)
    throw std::invalid_argument("train_stage: resume state is for stage " + std::to_string(st.stage) + ", config is stage " +
                                std::to_string(c.stage));
  if (c.stage == 1 && (c.multi_fraction != 0.0 || c.use_prompt_adapter))
    throw std::invalid_argument("train_stage: stage 1 takes single-task data without the prompt adapter");
  return detail::run(model, selector_for(c), c, st, opt, [&](Tape& t, std::size_t step) {
    return model.loss(t, draw_batch(model.tasks(), c, chain_share, step), c.use_prompt_adapter, opt.label_hook);
  });
}

/// Both trainable sets from a fresh start over the pooled data of both
/// stages: the step budgets add up and the multi-task share is diluted so
/// the total multi-task exposure equals the two-stage run's.
inline StageConfig one_stage_config(const RunConfig& rc) {
  StageConfig c = rc.stage2;
  c.steps = rc.stage1.steps + rc.stage2.steps;
  c.lr = rc.stage1.lr;
  c.multi_fraction = c.steps ? rc.stage2.multi_fraction * static_cast<double>(rc.stage2.steps) / static_cast<double>(c.steps) : 0.0;
  c.seed = mix_seed(rc.stage2.seed, 0x0e);
  return c;
}

}  // namespace wavllm::trainer
