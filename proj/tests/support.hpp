// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "wavllm/config.hpp"

namespace wavllm::fixtures {

/// Small enough for finite differences and sub-second CLI runs.
inline RunConfig tiny_config() {
  RunConfig c;
  c.profile = "tiny";
  auto& m = c.model;
  m.feat_dim = 4;
  m.sem_dim = 6;
  m.ac_dim = 5;
  m.sem_layers = 1;
  m.ac_layers = 3;
  m.adapter_bottleneck = 3;
  m.dim = 8;
  m.depth = 2;
  m.heads = 2;
  m.lora_rank = 2;
  m.pa_bottleneck = 3;
  c.data.train_counts = DataConfig::uniform_counts(3);
  c.data.heldout_counts = DataConfig::uniform_counts(2);
  c.data.multi_records = 3;
  c.data.cot_records = 2;
  c.pretrain.steps = 3;
  c.pretrain.batch = 2;
  c.stage1.steps = 4;
  c.stage1.batch = 2;
  c.stage2.steps = 4;
  c.stage2.batch = 2;
  c.eval.per_kind = 2;
  c.eval.multi = 2;
  c.eval.cot = 2;
  c.eval.max_new_tokens = 12;
  return c;
}

}  // namespace wavllm::fixtures
