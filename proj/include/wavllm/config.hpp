// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <json.hpp>

#include "wavllm/common.hpp"

namespace wavllm {

struct ModelDims {
  std::size_t feat_dim = 16;     ///< F, synthetic frame features
  std::size_t sem_dim = 32;      ///< E_sem
  std::size_t ac_dim = 32;       ///< E_ac
  std::size_t sem_layers = 2;
  std::size_t ac_layers = 4;     ///< L
  std::size_t adapter_bottleneck = 16;  ///< K_a
  std::size_t adapter_kernel = 3;
  std::size_t dim = 64;          ///< D
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t max_len = 160;
  std::size_t lora_rank = 4;     ///< R
  std::size_t pa_bottleneck = 16;  ///< K
  double lora_a_std = 0.125;
  double pa_up_std = 0.02;
  double encoder_bias_std = 0.1;
  double head_std = 0.03;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct DataConfig {
  std::uint64_t world_seed = 1234;
  double noise = 0.1;
  std::size_t translate_shift = 7;
  std::size_t min_symbols = 4;
  std::size_t max_symbols = 6;
  std::size_t summary_k = 2;
  double chain_fraction = 0.15;  ///< share of chained samples among multi-task ones
  /// forge-data record counts per task kind; missing kinds count as 0.
  std::map<std::string, std::size_t> train_counts = uniform_counts(64);
  std::map<std::string, std::size_t> heldout_counts = uniform_counts(32);
  std::size_t multi_records = 64;  ///< held-out multi-task records
  std::size_t cot_records = 32;    ///< held-out chained/direct pairs

  static std::map<std::string, std::size_t> uniform_counts(std::size_t n) {
    std::map<std::string, std::size_t> m;
    for (const char* k : {"TRANSCRIBE", "TRANSLATE", "CLASSIFY", "SQA", "TEXT_IT", "SUMMARIZE"}) m[k] = n;
    return m;
  }

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

/// Text-only pretraining of the base decoder before it is frozen.
struct PretrainConfig {
  std::size_t steps = 2000;
  double lr = 3e-3;
  std::size_t batch = 16;
  double multi_fraction = 0.5;
  std::uint64_t seed = 5;

  friend bool operator==(const PretrainConfig&, const PretrainConfig&) = default;
};

struct StageConfig {
  int stage = 1;
  std::size_t steps = 1000;
  double lr = 0.01;
  double warmup = 0.1;
  std::size_t batch = 16;
  std::uint64_t seed = 11;
  bool use_prompt_adapter = false;
  double multi_fraction = 0.0;

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

struct EvalConfig {
  std::size_t per_kind = 40;
  std::size_t multi = 40;
  std::size_t cot = 20;
  std::size_t max_new_tokens = 80;
  std::uint64_t seed = 1000000007;

  friend bool operator==(const EvalConfig&, const EvalConfig&) = default;
};

struct RunConfig {
  std::string profile = "desk";
  bool runnable = true;
  ModelDims model;
  DataConfig data;
  PretrainConfig pretrain;
  StageConfig stage1;
  StageConfig stage2{2, 1000, 0.01, 0.1, 16, 101, true, 0.5};
  EvalConfig eval;

  friend bool operator==(const RunConfig&, const RunConfig&) = default;

  void validate() const {
    auto pos = [](std::size_t v, const char* field) {
      if (v == 0) throw std::invalid_argument(std::string("config: ") + field + " must be positive");
    };
    pos(model.feat_dim, "model.feat_dim");
    pos(model.sem_dim, "model.sem_dim");
    pos(model.ac_dim, "model.ac_dim");
    pos(model.sem_layers, "model.sem_layers");
    pos(model.ac_layers, "model.ac_layers");
    pos(model.adapter_bottleneck, "model.adapter_bottleneck");
    pos(model.dim, "model.dim");
    pos(model.depth, "model.depth");
    pos(model.heads, "model.heads");
    pos(model.lora_rank, "model.lora_rank");
    pos(model.pa_bottleneck, "model.pa_bottleneck");
    pos(stage1.batch, "stage1.batch");
    pos(stage2.batch, "stage2.batch");
    if (model.dim % model.heads) throw std::invalid_argument("config: model.dim must be divisible by model.heads");
    if (model.adapter_kernel % 2 == 0) throw std::invalid_argument("config: model.adapter_kernel must be odd");
    if (stage1.stage != 1 || stage2.stage != 2) throw std::invalid_argument("config: stage1/stage2 ids must be 1 and 2");
    if (stage1.use_prompt_adapter) throw std::invalid_argument("config: stage1.use_prompt_adapter must be false");
    if (stage1.multi_fraction != 0.0) throw std::invalid_argument("config: stage1.multi_fraction must be 0");
    if (data.min_symbols < 1 || data.min_symbols > data.max_symbols)
      throw std::invalid_argument("config: data.min_symbols/max_symbols out of order");
    static const std::map<std::string, std::size_t> kinds = DataConfig::uniform_counts(0);
    for (const auto* m : {&data.train_counts, &data.heldout_counts})
      for (const auto& [k, n] : *m)
        if (!kinds.count(k)) throw std::invalid_argument("config: data counts name unknown task kind '" + k + "'");
  }
};

#define WAVLLM_JSON(T, ...) NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(T, __VA_ARGS__)
WAVLLM_JSON(ModelDims, feat_dim, sem_dim, ac_dim, sem_layers, ac_layers, adapter_bottleneck, adapter_kernel, dim, depth,
            heads, max_len, lora_rank, pa_bottleneck, lora_a_std, pa_up_std, encoder_bias_std, head_std)
WAVLLM_JSON(DataConfig, world_seed, noise, translate_shift, min_symbols, max_symbols, summary_k, chain_fraction,
            train_counts, heldout_counts, multi_records, cot_records)
WAVLLM_JSON(PretrainConfig, steps, lr, batch, multi_fraction, seed)
WAVLLM_JSON(StageConfig, stage, steps, lr, warmup, batch, seed, use_prompt_adapter, multi_fraction)
WAVLLM_JSON(EvalConfig, per_kind, multi, cot, max_new_tokens, seed)
WAVLLM_JSON(RunConfig, profile, runnable, model, data, pretrain, stage1, stage2, eval)
#undef WAVLLM_JSON

inline std::string serialize(const RunConfig& c) { return nlohmann::json(c).dump(2) + "\n"; }

inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  try {
    nlohmann::json::parse(text).get_to(c);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Hash of the settings that fix parameter shapes, the frozen weights and
/// the task rules. Stage budgets, seeds and evaluation sizes are excluded so
/// checkpoints from different runs of one world stay comparable.
inline std::string fingerprint(const RunConfig& c) {
  const nlohmann::json j{{"model", c.model}, {"data", c.data}, {"pretrain", c.pretrain}};
  return fnv1a_hex(j.dump());
}

/// Small runnable profile used by the tests and the acceptance run.
inline RunConfig desk_profile() { return RunConfig{}; }

/// Published-scale hyperparameters, recorded for reference only.
inline RunConfig published_profile() {
  RunConfig c;
  c.profile = "published-scale";
  c.runnable = false;
  c.model.dim = 4096;
  c.model.depth = 32;
  c.model.heads = 32;
  c.model.lora_rank = 32;
  c.model.pa_bottleneck = 1024;
  c.model.sem_dim = 1280;
  c.model.ac_dim = 768;
  c.model.ac_layers = 12;
  c.model.sem_layers = 32;
  c.model.max_len = 4096;
  c.stage1.steps = 400000;
  c.stage1.lr = 1e-4;
  c.stage2.steps = 150000;
  c.stage2.lr = 1e-4;
  return c;
}

}  // namespace wavllm
