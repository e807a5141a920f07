// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "wavllm/model.hpp"

namespace wavllm::evalsuite {

using taskforge::Split;
using taskforge::TaskKind;
using Tokens = std::vector<std::string>;

inline Tokens tokens(std::string_view text) { return taskforge::split_text(text); }

// ---------------------------------------------------------------- metrics

inline std::size_t edit_distance(const Tokens& ref, const Tokens& hyp) {
  std::vector<std::size_t> d(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) d[j] = j;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    std::size_t diag = d[0];
    d[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t up = d[j];
      d[j] = std::min({d[j] + 1, d[j - 1] + 1, diag + (ref[i - 1] != hyp[j - 1])});
      diag = up;
    }
  }
  return d[hyp.size()];
}

inline double wer(const Tokens& ref, const Tokens& hyp) {
  if (ref.empty()) throw std::invalid_argument("wer: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

namespace detail {

inline std::map<Tokens, std::size_t> ngrams(const Tokens& t, std::size_t n) {
  std::map<Tokens, std::size_t> out;
  for (std::size_t i = 0; i + n <= t.size(); ++i) ++out[Tokens(t.begin() + i, t.begin() + i + n)];
  return out;
}

inline std::size_t clipped_overlap(const std::map<Tokens, std::size_t>& a, const std::map<Tokens, std::size_t>& b) {
  std::size_t n = 0;
  for (const auto& [g, c] : a)
    if (auto it = b.find(g); it != b.end()) n += std::min(c, it->second);
  return n;
}

inline double f1(double overlap, double ref_total, double hyp_total) {
  if (overlap == 0.0) return 0.0;
  const double p = overlap / hyp_total, r = overlap / ref_total;
  return 2 * p * r / (p + r);
}

inline std::size_t lcs(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> d(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = 0;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = d[j];
      d[j] = a[i - 1] == b[j - 1] ? diag + 1 : std::max(d[j], d[j - 1]);
      diag = up;
    }
  }
  return d[b.size()];
}

}  // namespace detail

/// Geometric mean of clipped n-gram precisions times the brevity penalty.
/// Orders longer than the hypothesis are skipped.
inline double bleu(const Tokens& ref, const Tokens& hyp, std::size_t max_n = 4) {
  if (ref.empty()) throw std::invalid_argument("bleu: empty reference");
  if (hyp.empty()) return 0.0;
  double log_sum = 0.0;
  std::size_t orders = 0;
  for (std::size_t n = 1; n <= max_n && n <= hyp.size(); ++n) {
    const auto h = detail::ngrams(hyp, n);
    const std::size_t match = detail::clipped_overlap(h, detail::ngrams(ref, n));
    if (match == 0) return 0.0;
    log_sum += std::log(static_cast<double>(match) / static_cast<double>(hyp.size() + 1 - n));
    ++orders;
  }
  const double bp = hyp.size() > ref.size() ? 1.0 : std::exp(1.0 - static_cast<double>(ref.size()) / hyp.size());
  return bp * std::exp(log_sum / static_cast<double>(orders));
}

struct Rouge {
  double r1 = 0, r2 = 0, rl = 0;
};

/// F1 variants of ROUGE-1, ROUGE-2 and ROUGE-L. When neither side has a
/// bigram, ROUGE-2 is 1 for equal texts and 0 otherwise.
inline Rouge rouge(const Tokens& ref, const Tokens& hyp) {
  if (ref.empty()) throw std::invalid_argument("rouge: empty reference");
  Rouge out;
  const double rs = static_cast<double>(ref.size()), hs = static_cast<double>(hyp.size());
  out.r1 = detail::f1(static_cast<double>(detail::clipped_overlap(detail::ngrams(ref, 1), detail::ngrams(hyp, 1))), rs, hs);
  if (ref.size() < 2 && hyp.size() < 2) out.r2 = ref == hyp ? 1.0 : 0.0;
  else
    out.r2 = detail::f1(static_cast<double>(detail::clipped_overlap(detail::ngrams(ref, 2), detail::ngrams(hyp, 2))),
                        rs - 1, hs - 1);
  out.rl = detail::f1(static_cast<double>(detail::lcs(ref, hyp)), rs, hs);
  return out;
}

struct IfrScore {
  std::size_t followed = 0;
  std::size_t correct = 0;
};

/// Reads "### task i: <echo> => <answer>" lines in order. A section counts
/// as followed when its number is the next expected one and its echo
/// names the matching sub-task; parsing stops at the first section that
/// is not. Answers are compared token by token.
inline IfrScore ifr(const InstructionSample& s, std::string_view output) {
  IfrScore sc;
  std::istringstream lines{std::string(output)};
  std::string line;
  for (std::size_t i = 0; i < s.tasks.size() && std::getline(lines, line); ++i) {
    const Tokens t = tokens(line);
    const Tokens head{"###", "task", std::to_string(i + 1), ":"};
    if (t.size() < head.size() || !std::equal(head.begin(), head.end(), t.begin())) break;
    const auto arrow = std::find(t.begin() + 4, t.end(), "=>");
    if (arrow == t.end()) break;
    if (Tokens(t.begin() + 4, arrow) != tokens(s.tasks[i].echo)) break;
    ++sc.followed;
    if (Tokens(arrow + 1, t.end()) == tokens(s.tasks[i].answer)) ++sc.correct;
  }
  return sc;
}

/// Answer of the last section, or the whole output if it has no arrow.
inline std::string final_answer(std::string_view output) {
  const std::string out(output);
  const auto nl = out.rfind('\n');
  const std::string last = nl == std::string::npos ? out : out.substr(nl + 1);
  const auto arrow = last.find("=>");
  if (arrow == std::string::npos) return last;
  return taskforge::join_tokens(tokens(last.substr(arrow + 2)));
}

// ---------------------------------------------------------------- records

enum class Group { Transcribe, Translate, Classify, Sqa, TextIt, Summarize, Multi, Cot, Direct };

inline std::string_view group_name(Group g) {
  static constexpr std::array<std::string_view, 9> n{"TRANSCRIBE", "TRANSLATE", "CLASSIFY", "SQA", "TEXT_IT",
                                                     "SUMMARIZE", "MULTI", "COT", "DIRECT"};
  return n[static_cast<std::size_t>(g)];
}

inline Group group_from_name(std::string_view s) {
  for (int g = 0; g <= static_cast<int>(Group::Direct); ++g)
    if (group_name(static_cast<Group>(g)) == s) return static_cast<Group>(g);
  throw std::invalid_argument("unknown evaluation group '" + std::string(s) + "'");
}

inline Group single_group(TaskKind k) { return static_cast<Group>(static_cast<int>(k)); }

struct EvalItem {
  Group group;
  InstructionSample sample;
};

/// One scored sample. `scores` holds the raw numbers every aggregate is
/// built from.
struct SampleRecord {
  Group group;
  std::string prompt, target, output;
  std::map<std::string, double> scores;
};

inline SampleRecord score(const EvalItem& item, const std::string& output) {
  SampleRecord r{item.group, item.sample.prompt, item.sample.target, output, {}};
  const Tokens ref = tokens(item.sample.target), hyp = tokens(output);
  auto& sc = r.scores;
  switch (item.group) {
    case Group::Transcribe:
      sc["edits"] = static_cast<double>(edit_distance(ref, hyp));
      sc["ref_tokens"] = static_cast<double>(ref.size());
      break;
    case Group::Translate:
      sc["bleu"] = bleu(ref, hyp);
      sc["exact"] = ref == hyp;
      break;
    case Group::Summarize: {
      const Rouge rg = rouge(ref, hyp);
      sc["rouge1"] = rg.r1;
      sc["rouge2"] = rg.r2;
      sc["rougeL"] = rg.rl;
      sc["exact"] = ref == hyp;
      break;
    }
    case Group::Classify:
    case Group::Sqa:
    case Group::TextIt:
    case Group::Direct: sc["exact"] = ref == hyp; break;
    case Group::Multi: {
      const IfrScore f = ifr(item.sample, output);
      sc["followed"] = static_cast<double>(f.followed);
      sc["correct"] = static_cast<double>(f.correct);
      sc["subtasks"] = static_cast<double>(item.sample.tasks.size());
      break;
    }
    case Group::Cot: sc["exact"] = tokens(final_answer(output)) == tokens(item.sample.tasks.back().answer); break;
  }
  return r;
}

/// Aggregate table recomputed from the records alone.
inline std::map<std::string, double> aggregate(const std::vector<SampleRecord>& records) {
  std::map<std::string, std::map<std::string, double>> sums;
  std::map<std::string, double> counts;
  for (const auto& r : records) {
    const std::string g(group_name(r.group));
    counts[g] += 1;
    for (const auto& [k, v] : r.scores) sums[g][k] += v;
  }
  std::map<std::string, double> out;
  for (const auto& [g, s] : sums) {
    const double n = counts[g];
    if (g == "TRANSCRIBE") out[g + ".token_acc"] = 1.0 - s.at("edits") / s.at("ref_tokens");
    else if (g == "MULTI") {
      out[g + ".ifr_followed"] = s.at("followed") / s.at("subtasks");
      out[g + ".ifr_correct"] = s.at("correct") / s.at("subtasks");
    } else
      for (const auto& [k, v] : s) out[g + "." + k] = v / n;
  }
  return out;
}

// ---------------------------------------------------------------- eval sets

/// Evaluation samples. Seeds start at `cfg.seed`, far from the training
/// seed streams.
inline std::vector<EvalItem> make_eval_set(const taskforge::TaskSpace& ts, const EvalConfig& cfg, Split split) {
  std::vector<EvalItem> out;
  for (TaskKind k : taskforge::kAllKinds)
    for (std::size_t i = 0; i < cfg.per_kind; ++i) {
      const std::uint64_t seed = cfg.seed + 100000 * static_cast<std::uint64_t>(k) + i;
      out.push_back({single_group(k), taskforge::synth_single(ts, k, seed, split)});
    }
  Rng rng(mix_seed(cfg.seed, 5));
  for (std::size_t i = 0; i < cfg.multi; ++i) {
    std::vector<TaskKind> pool(taskforge::kAllKinds.begin(), taskforge::kAllKinds.end());
    const std::size_t n = 2 + uniform_index(rng, 2);
    std::vector<TaskKind> kinds;
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t x = uniform_index(rng, pool.size());
      kinds.push_back(pool[x]);
      pool.erase(pool.begin() + static_cast<std::ptrdiff_t>(x));
    }
    out.push_back({Group::Multi, taskforge::synth_multitask(ts, kinds, cfg.seed + 700000 + i, split)});
  }
  for (std::size_t i = 0; i < cfg.cot; ++i) {
    auto [cot, direct] = taskforge::make_cot_pair(ts, cfg.seed + 800000 + i, split);
    out.push_back({Group::Cot, std::move(cot)});
    out.push_back({Group::Direct, std::move(direct)});
  }
  return out;
}

inline nlohmann::json item_to_json(const taskforge::TaskSpace& ts, const EvalItem& it) {
  auto j = taskforge::to_record(ts, it.sample);
  j["group"] = std::string(group_name(it.group));
  return j;
}

inline EvalItem item_from_json(const taskforge::TaskSpace& ts, const nlohmann::json& j) {
  EvalItem it{Group::Transcribe, taskforge::from_record(ts, j)};
  if (j.contains("group")) it.group = group_from_name(j.at("group").get<std::string>());
  else if (it.sample.multi()) it.group = Group::Multi;
  else it.group = single_group(it.sample.tasks.front().kind);
  return it;
}

// ---------------------------------------------------------------- harnesses

using Responder = std::function<std::string(const InstructionSample&)>;

inline Responder model_responder(WavLLM& m, bool use_pa) {
  return [&m, use_pa](const InstructionSample& s) { return m.generate(s, use_pa, m.config().eval.max_new_tokens); };
}

/// Emits each target unchanged; every metric should come out perfect.
inline Responder oracle_responder() {
  return [](const InstructionSample& s) { return s.target; };
}

struct EvalReport {
  std::string fingerprint;
  std::string checkpoint;
  std::map<std::string, double> metrics;
  std::vector<SampleRecord> records;
};

inline EvalReport evaluate(const std::vector<EvalItem>& items, const Responder& respond) {
  EvalReport rep;
  for (const auto& it : items) rep.records.push_back(score(it, respond(it.sample)));
  rep.metrics = aggregate(rep.records);
  return rep;
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json recs = nlohmann::json::array();
  for (const auto& s : r.records)
    recs.push_back({{"group", std::string(group_name(s.group))},
                    {"prompt", s.prompt},
                    {"target", s.target},
                    {"output", s.output},
                    {"scores", s.scores}});
  return {{"fingerprint", r.fingerprint}, {"checkpoint", r.checkpoint}, {"metrics", r.metrics}, {"records", recs}};
}

struct RobustnessResult {
  double seen = 0;
  double unseen = 0;
};

/// Same clips under training-bank and held-out-bank prompts; the metric is
/// token accuracy for TRANSCRIBE and exact match otherwise.
inline RobustnessResult robustness_eval(const taskforge::TaskSpace& ts, TaskKind kind, const Responder& respond,
                                        std::size_t n, std::uint64_t seed,
                                        const taskforge::PromptBank& bank) {
  std::set<std::string> seen(bank.train.begin(), bank.train.end());
  for (const auto& p : bank.held_out)
    if (seen.count(p)) throw std::invalid_argument("robustness_eval: prompt banks overlap at '" + p + "'");
  if (bank.train.empty() || bank.held_out.empty()) throw std::invalid_argument("robustness_eval: empty prompt bank");
  for (const auto* b : {&bank.train, &bank.held_out})
    for (const auto& p : *b)
      if (p.find('{') != std::string::npos)
        throw std::invalid_argument("robustness_eval: templated prompt '" + p + "' not supported");
  RobustnessResult res;
  for (int pass = 0; pass < 2; ++pass) {
    const auto& prompts = pass ? bank.held_out : bank.train;
    std::vector<SampleRecord> recs;
    for (std::size_t i = 0; i < n; ++i) {
      auto s = taskforge::synth_single(ts, kind, seed + i, pass ? Split::HeldOut : Split::Train);
      s.prompt = prompts[i % prompts.size()];
      s.tasks[0].prompt = s.prompt;
      s.variant = i % prompts.size();
      recs.push_back(score({single_group(kind), s}, respond(s)));
    }
    const auto agg = aggregate(recs);
    const double v = agg.at(std::string(kind_name(kind)) + (kind == TaskKind::Transcribe ? ".token_acc" : ".exact"));
    (pass ? res.unseen : res.seen) = v;
  }
  return res;
}

inline RobustnessResult robustness_eval(const taskforge::TaskSpace& ts, TaskKind kind, const Responder& respond,
                                        std::size_t n, std::uint64_t seed) {
  return robustness_eval(ts, kind, respond, n, seed, taskforge::prompt_banks().at(kind));
}

struct CotResult {
  double cot = 0;
  double direct = 0;
};

/// Final-answer exact match for chained prompts and for the one-shot
/// request of the same answer.
inline CotResult cot_eval(const taskforge::TaskSpace& ts, const Responder& respond, std::size_t n, std::uint64_t seed,
                          Split split = Split::Train) {
  if (n == 0) throw std::invalid_argument("cot_eval: no pairs");
  CotResult r;
  for (std::size_t i = 0; i < n; ++i) {
    auto [cot, direct] = taskforge::make_cot_pair(ts, seed + i, split);
    r.cot += score({Group::Cot, cot}, respond(cot)).scores.at("exact");
    r.direct += score({Group::Direct, direct}, respond(direct)).scores.at("exact");
  }
  r.cot /= static_cast<double>(n);
  r.direct /= static_cast<double>(n);
  return r;
}

// ---------------------------------------------------------------- scalings

struct Projection {
  Eigen::VectorXd mean;
  Eigen::MatrixXd components;  ///< D x 2, unit columns
  Eigen::Vector2d variances;
};

/// Top-2 principal axes of the rows of `x`; each axis is signed so that its
/// largest-magnitude loading is positive.
inline Projection pca2(const Eigen::MatrixXd& x) {
  if (x.rows() < 3) throw std::invalid_argument("pca2: need at least 3 points, got " + std::to_string(x.rows()));
  if (x.cols() < 2) throw std::invalid_argument("pca2: need at least 2 dimensions");
  Projection p;
  p.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd c = x.rowwise() - p.mean.transpose();
  const Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::Index d = cov.rows();
  p.components.resize(d, 2);
  for (int k = 0; k < 2; ++k) {
    Eigen::VectorXd v = es.eigenvectors().col(d - 1 - k);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    p.components.col(k) = v;
    p.variances(k) = es.eigenvalues()(d - 1 - k);
  }
  return p;
}

struct ScalingRecord {
  std::string prompt;
  std::string task;
  std::vector<double> r;
  double pc1 = 0, pc2 = 0;
};

inline std::vector<ScalingRecord> export_scalings(WavLLM& m, const std::vector<std::pair<std::string, std::string>>& prompts) {
  if (prompts.size() < 3) throw std::invalid_argument("export_scalings: need at least 3 prompts, got " + std::to_string(prompts.size()));
  const std::size_t d = m.config().model.dim;
  std::vector<ScalingRecord> out;
  Eigen::MatrixXd x(static_cast<Eigen::Index>(prompts.size()), static_cast<Eigen::Index>(d));
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    Tape t;
    t.set_grad_enabled(false);
    const Array r = m.scaling(t, prompts[i].first).value();
    out.push_back({prompts[i].first, prompts[i].second, r.storage(), 0, 0});
    for (std::size_t j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = r[j];
  }
  const Projection p = pca2(x);
  const Eigen::MatrixXd coords = (x.rowwise() - p.mean.transpose()) * p.components;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].pc1 = coords(static_cast<Eigen::Index>(i), 0);
    out[i].pc2 = coords(static_cast<Eigen::Index>(i), 1);
  }
  return out;
}

/// Every prompt of every bank, tagged with its task kind.
inline std::vector<std::pair<std::string, std::string>> bank_prompts(Split split) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& [k, bank] : taskforge::prompt_banks())
    for (const auto& p : bank.get(split)) {
      std::string text = taskforge::detail::fill(taskforge::detail::fill(p, "{k}", "2"), "{x}", "m");
      out.emplace_back(std::move(text), std::string(kind_name(k)));
    }
  return out;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

inline std::string to_csv(const std::vector<ScalingRecord>& recs) {
  std::ostringstream os;
  os.precision(17);
  os << "prompt,task,pc1,pc2";
  const std::size_t d = recs.empty() ? 0 : recs.front().r.size();
  for (std::size_t j = 0; j < d; ++j) os << ",r" << j;
  os << "\n";
  for (const auto& r : recs) {
    os << csv_field(r.prompt) << "," << r.task << "," << r.pc1 << "," << r.pc2;
    for (double v : r.r) os << "," << v;
    os << "\n";
  }
  return os.str();
}

}  // namespace wavllm::evalsuite
