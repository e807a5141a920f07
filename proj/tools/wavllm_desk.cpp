// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0
//
// wavllm-desk: forge-data, train, eval, export-scalings.

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "wavllm/checkpoint.hpp"
#include "wavllm/evalsuite.hpp"

namespace fs = std::filesystem;
using namespace wavllm;

namespace {

constexpr const char* kWorkdirEnv = "WAVLLM_DESK_WORKDIR";
constexpr const char* kLockName = ".wavllm-desk.lock";

fs::path workdir() {
  const char* env = std::getenv(kWorkdirEnv);
  return env && *env ? fs::path(env) : fs::current_path();
}

fs::path resolve(const std::string& p) {
  const fs::path path(p);
  return path.is_absolute() ? path : workdir() / path;
}

/// Exclusive per-working-directory lock, released on scope exit.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / kLockName) {
    fs::create_directories(dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      if (errno == EEXIST)
        throw std::runtime_error("working directory is locked by another command (" + path_.string() + ")");
      throw std::runtime_error("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    }
    const std::string pid = std::to_string(::getpid()) + "\n";
    if (::write(fd_, pid.data(), pid.size()) < 0) {}
  }
  ~DirLock() {
    ::close(fd_);
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
  int fd_ = -1;
};

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << text;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed) {
  RunConfig c = path.empty() ? desk_profile() : load_config(resolve(path).string());
  if (!c.runnable) throw std::invalid_argument("config profile '" + c.profile + "' is documentation only and cannot run");
  if (seed) {
    c.stage1.seed = *seed;
    c.stage2.seed = mix_seed(*seed, 2);
  }
  return c;
}

std::string jsonl(const taskforge::TaskSpace& ts, const std::vector<evalsuite::EvalItem>& items, bool with_group) {
  std::string out;
  for (const auto& it : items) out += (with_group ? evalsuite::item_to_json(ts, it) : taskforge::to_record(ts, it.sample)).dump() + "\n";
  return out;
}

std::vector<evalsuite::EvalItem> singles(const taskforge::TaskSpace& ts, const std::map<std::string, std::size_t>& counts,
                                         std::uint64_t seed, taskforge::Split split) {
  std::vector<evalsuite::EvalItem> out;
  for (auto k : taskforge::kAllKinds) {
    auto it = counts.find(std::string(taskforge::kind_name(k)));
    const std::size_t n = it == counts.end() ? 0 : it->second;
    for (std::size_t i = 0; i < n; ++i)
      out.push_back({evalsuite::single_group(k),
                     taskforge::synth_single(ts, k, mix_seed(seed, 1000003 * static_cast<std::uint64_t>(k) + i), split)});
  }
  return out;
}

int forge_data(const RunConfig& c, const fs::path& out) {
  const auto ts = make_task_space(c.data);
  const std::uint64_t s = c.data.world_seed;
  fs::create_directories(out);
  write_text(out / "train.jsonl", jsonl(ts, singles(ts, c.data.train_counts, mix_seed(s, 11), taskforge::Split::Train), false));
  EvalConfig ec = c.eval;
  ec.per_kind = 0;
  ec.multi = c.data.multi_records;
  ec.cot = c.data.cot_records;
  auto held = singles(ts, c.data.heldout_counts, c.eval.seed, taskforge::Split::Train);
  write_text(out / "heldout.jsonl", jsonl(ts, held, true));
  auto extra = evalsuite::make_eval_set(ts, ec, taskforge::Split::Train);
  std::vector<evalsuite::EvalItem> multi, cot;
  for (auto& it : extra) (it.group == evalsuite::Group::Multi ? multi : cot).push_back(std::move(it));
  write_text(out / "multi.jsonl", jsonl(ts, multi, true));
  write_text(out / "cot.jsonl", jsonl(ts, cot, true));
  write_text(out / "fingerprint.txt", fingerprint(c) + "\n");
  std::cout << "forge-data: wrote " << out.string() << " (fingerprint " << fingerprint(c) << ")\n";
  return 0;
}

std::vector<evalsuite::EvalItem> load_dataset(const taskforge::TaskSpace& ts, const fs::path& dir, const std::string& fp) {
  const std::string got = read_text(dir / "fingerprint.txt");
  if (got.substr(0, got.find('\n')) != fp)
    throw std::runtime_error("dataset fingerprint " + got.substr(0, got.find('\n')) + " does not match config " + fp);
  std::vector<evalsuite::EvalItem> items;
  for (const char* f : {"heldout.jsonl", "multi.jsonl", "cot.jsonl"}) {
    std::istringstream in(read_text(dir / f));
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.empty()) continue;
      try {
        items.push_back(evalsuite::item_from_json(ts, nlohmann::json::parse(line)));
      } catch (const std::exception& e) {
        throw std::runtime_error((dir / f).string() + ":" + std::to_string(n) + ": " + e.what());
      }
    }
  }
  return items;
}

struct TrainArgs {
  int stage = 1;
  std::string init;
  bool one_stage = false;
  std::size_t stop_after = SIZE_MAX;
};

int train(const RunConfig& c, const TrainArgs& a, const fs::path& out) {
  if (a.stage < 0 || a.stage > 2) throw std::invalid_argument("train: --stage must be 0, 1 or 2");
  if (a.one_stage && a.stage != 2) throw std::invalid_argument("train: --one-stage applies to --stage 2");
  const std::string fp = fingerprint(c);
  WavLLM model(c, c.stage1.seed);
  const StageConfig sc = a.stage == 0   ? StageConfig{0, c.pretrain.steps, c.pretrain.lr, 0.1, c.pretrain.batch, c.pretrain.seed, false, 0.0}
                         : a.stage == 1 ? c.stage1
                         : a.one_stage  ? trainer::one_stage_config(c)
                                        : c.stage2;

  // Which checkpoint may start this stage: a partial one of the same kind
  // resumes, a finished one of the previous stage starts fresh.
  trainer::TrainState st;
  std::string log_prefix;
  bool resume = false, need_pretrain = a.init.empty();
  if (!a.init.empty()) {
    const fs::path init = resolve(a.init);
    const auto meta = checkpoint::load(init, model, fp, &st);
    if (fs::exists(init / "log.jsonl")) log_prefix = read_text(init / "log.jsonl");
    const bool partial = st.step < meta.total_steps;
    resume = partial && meta.stage == a.stage && meta.one_stage == a.one_stage;
    const int wanted = a.stage == 0 ? -1 : a.one_stage ? 0 : a.stage - 1;
    if (!resume && (partial || meta.stage != wanted))
      throw std::invalid_argument("train: checkpoint " + init.string() + " (stage " + std::to_string(meta.stage) +
                                  (partial ? ", partial" : "") + ") cannot start " +
                                  (a.one_stage ? std::string("one-stage training") : "stage " + std::to_string(a.stage)));
    if (!resume && meta.stage == 0) {
      // only the decoder comes from pretraining; the rest follows this run's seed
      WavLLM fresh(c, c.stage1.seed);
      for (auto* p : fresh.params())
        if (!p->name.starts_with("bb.")) model.param(p->name).value = p->value;
    }
  } else if (a.stage == 2 && !a.one_stage) {
    throw std::invalid_argument("train: stage 2 needs --init with a stage-1 checkpoint (or --one-stage)");
  }
  if (!resume) {
    st = trainer::TrainState{};
    st.stage = sc.stage;
  }

  std::ostringstream log;
  log << (log_prefix.empty() ? nlohmann::json{{"fingerprint", fp}}.dump() + "\n" : log_prefix);
  auto logger = [&](int stage) {
    return [&log, stage](const trainer::StepRecord& r) {
      log << nlohmann::json{{"stage", stage}, {"step", r.step}, {"lr", r.lr}, {"loss", r.loss}}.dump() << "\n";
      if (r.step % 100 == 0) std::cerr << "stage " << stage << " step " << r.step << " loss " << r.loss << "\n";
    };
  };
  trainer::TrainOptions opt;
  opt.stop_after = a.stop_after;
  opt.on_step = logger(a.stage);

  if (a.stage == 0) {
    trainer::pretrain_backbone(model, c.pretrain, st, opt);
  } else {
    if (need_pretrain) {
      trainer::TrainState pre;
      trainer::TrainOptions po;
      po.on_step = logger(0);
      trainer::pretrain_backbone(model, c.pretrain, pre, po);
    }
    trainer::train_stage(model, sc, c.data.chain_fraction, st, opt);
  }
  checkpoint::save(out, model, {fp, sc.stage, sc.use_prompt_adapter, a.one_stage, sc.steps}, st);
  write_text(out / "log.jsonl", log.str());
  std::cout << "train: stage " << a.stage << " checkpoint " << out.string() << " at step " << st.step << "/" << sc.steps
            << "\n";
  return 0;
}

int eval(const RunConfig& c, const std::string& init, const std::string& data, bool oracle, const fs::path& out) {
  const std::string fp = fingerprint(c);
  WavLLM model(c, c.stage1.seed);
  checkpoint::Meta meta;
  if (!oracle || !init.empty()) meta = checkpoint::load(resolve(init), model, fp);
  auto items = load_dataset(model.tasks(), resolve(data), fp);
  auto rep = evalsuite::evaluate(items, oracle ? evalsuite::oracle_responder()
                                               : evalsuite::model_responder(model, meta.use_prompt_adapter));
  rep.fingerprint = fp;
  rep.checkpoint = oracle && init.empty() ? "oracle" : fs::path(init).filename().string();
  write_text(out, evalsuite::to_json(rep).dump(2) + "\n");
  for (const auto& [k, v] : rep.metrics) std::cout << k << " " << v << "\n";
  return 0;
}

int export_scalings(const RunConfig& c, const std::string& init, const std::string& split, const fs::path& out) {
  const std::string fp = fingerprint(c);
  WavLLM model(c, c.stage1.seed);
  const auto meta = checkpoint::load(resolve(init), model, fp);
  if (meta.stage != 2 || !meta.use_prompt_adapter)
    throw std::invalid_argument("export-scalings: needs a stage-2 checkpoint trained with the prompt adapter");
  const auto recs = evalsuite::export_scalings(
      model, evalsuite::bank_prompts(split == "heldout" ? taskforge::Split::HeldOut : taskforge::Split::Train));
  write_text(out, evalsuite::to_csv(recs));
  std::cout << "export-scalings: " << recs.size() << " prompts to " << out.string() << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desk-scale speech LLM with prompt-aware LoRA: data, training, evaluation"};
  app.require_subcommand(1);
  std::string config_path, out;
  std::optional<std::uint64_t> seed;
  app.add_option("--config", config_path, "run configuration (JSON); default is the desk profile");
  app.add_option("--seed", seed, "override stage seeds");

  auto* forge = app.add_subcommand("forge-data", "write deterministic dataset files");
  forge->add_option("--out", out, "output directory")->required();

  TrainArgs ta;
  auto* tr = app.add_subcommand("train", "run decoder pretraining (0), stage 1 or stage 2");
  tr->add_option("--stage", ta.stage, "0, 1 or 2")->required();
  tr->add_option("--init", ta.init, "checkpoint to start from or resume");
  tr->add_flag("--one-stage", ta.one_stage, "stage 2 on pooled data from a fresh start");
  tr->add_option("--stop-after", ta.stop_after, "stop once this many steps of the stage are done");
  tr->add_option("--out", out, "checkpoint directory")->required();

  std::string init, data, split = "train";
  bool oracle = false;
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a forged dataset");
  ev->add_option("--init", init, "checkpoint");
  ev->add_option("--data", data, "forge-data directory")->required();
  ev->add_flag("--oracle", oracle, "answer with the targets instead of the model");
  ev->add_option("--out", out, "report path")->required();

  auto* ex = app.add_subcommand("export-scalings", "write prompt scaling vectors with 2-D PCA coordinates");
  ex->add_option("--init", init, "stage-2 checkpoint")->required();
  ex->add_option("--split", split, "prompt bank: train or heldout")->check(CLI::IsMember({"train", "heldout"}));
  ex->add_option("--out", out, "CSV path")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    const RunConfig c = load_run_config(config_path, seed);
    DirLock lock(workdir());
    if (*forge) return forge_data(c, resolve(out));
    if (*tr) return train(c, ta, resolve(out));
    if (*ev) {
      if (init.empty() && !oracle) throw std::invalid_argument("eval: --init is required unless --oracle is given");
      return eval(c, init, data, oracle, resolve(out));
    }
    if (*ex) return export_scalings(c, init, split, resolve(out));
  } catch (const std::exception& e) {
    std::cerr << "wavllm-desk: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
