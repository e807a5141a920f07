// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint directory: manifest.json (names, shapes, flags, fingerprint,
// optimizer state layout) and params.bin (little-endian float64 payload:
// every parameter in manifest order, then each Adam moment pair).

#pragma once

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wavllm/trainer.hpp"

namespace wavllm::checkpoint {

namespace fs = std::filesystem;

inline constexpr int kFormat = 1;

struct Meta {
  std::string fingerprint;
  int stage = 0;
  bool use_prompt_adapter = false;
  bool one_stage = false;
  std::size_t total_steps = 0;  ///< step budget of the stage that wrote it
};

namespace detail {

inline void put(std::string& out, const Array& a) {
  static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);
  const std::size_t n = a.size() * sizeof(double);
  const std::size_t at = out.size();
  out.resize(at + n);
  std::memcpy(out.data() + at, a.data(), n);
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = at; i < at + n; i += 8) std::reverse(out.begin() + i, out.begin() + i + 8);
}

inline void get(const std::string& in, std::size_t& at, Array& a) {
  const std::size_t n = a.size() * sizeof(double);
  if (at + n > in.size()) throw std::runtime_error("checkpoint: payload shorter than manifest");
  std::string bytes = in.substr(at, n);
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < n; i += 8) std::reverse(bytes.begin() + i, bytes.begin() + i + 8);
  std::memcpy(a.data(), bytes.data(), n);
  at += n;
}

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

inline void write_file(const fs::path& p, const std::string& bytes) {
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("checkpoint: cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("checkpoint: write failed for " + tmp.string());
  }
  fs::rename(tmp, p);
}

}  // namespace detail

inline void save(const fs::path& dir, WavLLM& model, const Meta& meta, const trainer::TrainState& st) {
  fs::create_directories(dir);
  const trainer::Selector sel = meta.stage == 0   ? trainer::Selector::Backbone
                                : meta.use_prompt_adapter ? trainer::Selector::Stage2
                                                          : trainer::Selector::Stage1;
  nlohmann::json params = nlohmann::json::array();
  std::string payload;
  for (Parameter* p : model.params()) {
    params.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"frozen", !trainer::selected(sel, p->name)}});
    detail::put(payload, p->value);
  }
  nlohmann::json moments = nlohmann::json::array();
  for (const auto& [name, m] : st.opt.m) {
    const Array& v = st.opt.v.at(name);
    moments.push_back({{"name", name}, {"shape", m.shape()}});
    detail::put(payload, m);
    detail::put(payload, v);
  }
  nlohmann::json man{{"format", kFormat},
                     {"fingerprint", meta.fingerprint},
                     {"stage", meta.stage},
                     {"use_prompt_adapter", meta.use_prompt_adapter},
                     {"one_stage", meta.one_stage},
                     {"total_steps", meta.total_steps},
                     {"step", st.step},
                     {"params", params},
                     {"optimizer",
                      {{"beta1", st.opt.beta1}, {"beta2", st.opt.beta2}, {"eps", st.opt.eps}, {"step", st.opt.step},
                       {"moments", moments}}},
                     {"payload_bytes", payload.size()}};
  detail::write_file(dir / "params.bin", payload);
  detail::write_file(dir / "manifest.json", man.dump(2) + "\n");
}

inline Meta read_meta(const fs::path& dir) {
  const auto man = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
  if (man.at("format").get<int>() != kFormat) throw std::runtime_error("checkpoint: unsupported format in " + dir.string());
  return {man.at("fingerprint"), man.at("stage"), man.at("use_prompt_adapter"), man.at("one_stage"), man.at("total_steps")};
}

/// Restores parameter values into `model` and, when `st` is given, the
/// optimizer state. The fingerprint must match `expected_fingerprint`.
inline Meta load(const fs::path& dir, WavLLM& model, const std::string& expected_fingerprint,
                 trainer::TrainState* st = nullptr) {
  nlohmann::json man;
  std::string payload;
  try {
    man = nlohmann::json::parse(detail::read_file(dir / "manifest.json"));
    payload = detail::read_file(dir / "params.bin");
    const Meta meta = read_meta(dir);
    if (meta.fingerprint != expected_fingerprint)
      throw std::runtime_error("checkpoint: fingerprint mismatch, checkpoint " + meta.fingerprint + " vs config " +
                               expected_fingerprint);
    if (man.at("payload_bytes").get<std::size_t>() != payload.size())
      throw std::runtime_error("checkpoint: payload size does not match manifest");
    const auto params = model.params();
    const auto& entries = man.at("params");
    if (entries.size() != params.size())
      throw std::runtime_error("checkpoint: " + std::to_string(entries.size()) + " parameters, model has " +
                               std::to_string(params.size()));
    std::size_t at = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& e = entries[i];
      if (e.at("name").get<std::string>() != params[i]->name || e.at("shape").get<Shape>() != params[i]->value.shape())
        throw std::runtime_error("checkpoint: parameter " + e.at("name").get<std::string>() + " does not match model");
      detail::get(payload, at, params[i]->value);
    }
    trainer::TrainState loaded;
    loaded.stage = meta.stage;
    loaded.step = man.at("step");
    const auto& o = man.at("optimizer");
    loaded.opt.beta1 = o.at("beta1");
    loaded.opt.beta2 = o.at("beta2");
    loaded.opt.eps = o.at("eps");
    loaded.opt.step = o.at("step");
    for (const auto& e : o.at("moments")) {
      Array m(e.at("shape").get<Shape>()), v(e.at("shape").get<Shape>());
      detail::get(payload, at, m);
      detail::get(payload, at, v);
      loaded.opt.m.emplace(e.at("name"), std::move(m));
      loaded.opt.v.emplace(e.at("name"), std::move(v));
    }
    if (at != payload.size()) throw std::runtime_error("checkpoint: trailing bytes in payload");
    model.clear_prompt_cache();
    if (st) *st = std::move(loaded);
    return meta;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint: malformed manifest in " + dir.string() + ": " + e.what());
  }
}

}  // namespace wavllm::checkpoint
