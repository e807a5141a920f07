// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "support.hpp"
#include "wavllm/evalsuite.hpp"

using namespace wavllm;
using namespace wavllm::evalsuite;

namespace {

const taskforge::TaskSpace& space() {
  static const taskforge::TaskSpace ts = make_task_space(DataConfig{});
  return ts;
}

InstructionSample three_tasks() {
  return taskforge::synth_multitask(space(), {TaskKind::Transcribe, TaskKind::Classify, TaskKind::Sqa}, 21);
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::string join_lines(const std::vector<std::string>& ls) {
  std::string out;
  for (std::size_t i = 0; i < ls.size(); ++i) out += (i ? "\n" : "") + ls[i];
  return out;
}

}  // namespace

// ---------------------------------------------------------------- metrics

TEST(Wer, HandFixtures) {
  EXPECT_EQ(wer(tokens("a b c"), tokens("a b c")), 0.0);
  EXPECT_NEAR(wer(tokens("a b c"), tokens("a x c")), 1.0 / 3.0, 1e-9);
  EXPECT_NEAR(wer(tokens("a b"), tokens("")), 1.0, 1e-9);
  EXPECT_NEAR(wer(tokens("a"), tokens("b c d")), 3.0, 1e-9);
  EXPECT_THROW(wer(tokens(""), tokens("a")), std::invalid_argument);
}

TEST(Bleu, HandFixtures) {
  EXPECT_NEAR(bleu(tokens("a b c d"), tokens("a b c d")), 1.0, 1e-12);
  // (4/5 * 3/4 * 2/3 * 1/2)^(1/4), brevity penalty 1
  EXPECT_NEAR(bleu(tokens("a b c d"), tokens("a b c d e")), std::pow(0.2, 0.25), 1e-9);
  EXPECT_NEAR(bleu(tokens("a b c d"), tokens("a b c d e")), 0.669, 5e-4);
  EXPECT_EQ(bleu(tokens("a b"), tokens("c d")), 0.0);
  EXPECT_EQ(bleu(tokens("a b"), tokens("")), 0.0);
  // one-token hypothesis: only unigrams count, brevity penalty e^(1-3)
  EXPECT_NEAR(bleu(tokens("a b c"), tokens("a")), std::exp(-2.0), 1e-12);
  EXPECT_THROW(bleu(tokens(""), tokens("a")), std::invalid_argument);
}

TEST(Rouge, HandFixtures) {
  const auto same = rouge(tokens("a b c"), tokens("a b c"));
  EXPECT_EQ(same.r1, 1.0);
  EXPECT_EQ(same.r2, 1.0);
  EXPECT_EQ(same.rl, 1.0);
  const auto rev = rouge(tokens("a b c"), tokens("c b a"));
  EXPECT_NEAR(rev.r1, 1.0, 1e-9);
  EXPECT_NEAR(rev.r2, 0.0, 1e-9);
  EXPECT_NEAR(rev.rl, 1.0 / 3.0, 1e-9);
  const auto dis = rouge(tokens("a b"), tokens("c d"));
  EXPECT_EQ(dis.r1 + dis.r2 + dis.rl, 0.0);
  EXPECT_EQ(rouge(tokens("a"), tokens("a")).r2, 1.0);
  EXPECT_EQ(rouge(tokens("a"), tokens("b")).r2, 0.0);
  // ref bigrams {ab, bc}, hyp {ab, bd}: P = R = 1/2
  EXPECT_NEAR(rouge(tokens("a b c"), tokens("a b d")).r2, 0.5, 1e-12);
}

TEST(Metrics, IdentityOnRandomTexts) {
  std::mt19937_64 g(3);
  for (int i = 0; i < 50; ++i) {
    std::string s;
    const int n = 1 + static_cast<int>(g() % 9);
    for (int j = 0; j < n; ++j) s += std::string(j ? " " : "") + static_cast<char>('a' + g() % 5);
    EXPECT_EQ(wer(tokens(s), tokens(s)), 0.0);
    EXPECT_NEAR(bleu(tokens(s), tokens(s)), 1.0, 1e-12);
    const auto r = rouge(tokens(s), tokens(s));
    EXPECT_NEAR(r.r1 + r.r2 + r.rl, 3.0, 1e-12);
  }
}

// ---------------------------------------------------------------- ifr

TEST(Ifr, WellFormedTargetScoresAllSections) {
  const auto s = three_tasks();
  const auto sc = ifr(s, s.target);
  EXPECT_EQ(sc.followed, 3u);
  EXPECT_EQ(sc.correct, 3u);
}

TEST(Ifr, TwoSectionsOneWrong) {
  const auto s = three_tasks();
  auto ls = lines_of(s.target);
  ls.pop_back();
  ls[1] = "### task 2: " + s.tasks[1].echo + " => " + (s.tasks[1].answer == "happy" ? "sad" : "happy");
  const auto sc = ifr(s, join_lines(ls));
  EXPECT_EQ(sc.followed, 2u);
  EXPECT_EQ(sc.correct, 1u);
}

TEST(Ifr, OutOfOrderSectionsAreNotFollowed) {
  const auto s = three_tasks();
  auto ls = lines_of(s.target);
  std::swap(ls[1], ls[2]);
  EXPECT_EQ(ifr(s, join_lines(ls)).followed, 1u);
  std::swap(ls[0], ls[1]);
  EXPECT_EQ(ifr(s, join_lines(ls)).followed, 0u);
}

TEST(Ifr, WrongEchoOrGarbageIsNotFollowed) {
  const auto s = three_tasks();
  auto ls = lines_of(s.target);
  ls[0] = "### task 1: emotion => " + s.tasks[0].answer;
  EXPECT_EQ(ifr(s, join_lines(ls)).followed, 0u);
  EXPECT_EQ(ifr(s, "").followed, 0u);
  EXPECT_EQ(ifr(s, "a b c").followed, 0u);
  EXPECT_EQ(ifr(s, "### task 1 " + s.tasks[0].echo).followed, 0u);
}

TEST(Ifr, RoundTripAndBoundsOnGeneratedSamples) {
  std::mt19937_64 g(5);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::size_t k = 2 + seed % 2;
    std::vector<TaskKind> kinds(taskforge::kAllKinds.begin(), taskforge::kAllKinds.end());
    std::shuffle(kinds.begin(), kinds.end(), g);
    kinds.resize(k);
    const auto s = taskforge::synth_multitask(space(), kinds, seed, seed % 2 ? Split::HeldOut : Split::Train);
    const auto full = ifr(s, s.target);
    EXPECT_EQ(full.followed, k);
    EXPECT_EQ(full.correct, k);
    std::string broken = s.target;
    for (int e = 0; e < 4; ++e) broken[g() % broken.size()] = static_cast<char>('a' + g() % 26);
    const auto b = ifr(s, broken);
    EXPECT_LE(b.correct, b.followed);
    EXPECT_LE(b.followed, k);
  }
}

TEST(Ifr, FinalAnswerReadsTheLastSection) {
  EXPECT_EQ(final_answer("### task 1: x => a b\n### task 2: y =>  c  d"), "c d");
  EXPECT_EQ(final_answer("plain text"), "plain text");
}

// ---------------------------------------------------------------- harness

TEST(Harness, OracleScoresArePerfect) {
  const auto items = make_eval_set(space(), fixtures::tiny_config().eval, Split::HeldOut);
  const auto rep = evaluate(items, oracle_responder());
  ASSERT_FALSE(rep.metrics.empty());
  for (const auto& [k, v] : rep.metrics) EXPECT_EQ(v, 1.0) << k;
  EXPECT_TRUE(rep.metrics.count("TRANSCRIBE.token_acc"));
  EXPECT_TRUE(rep.metrics.count("MULTI.ifr_correct"));
  EXPECT_TRUE(rep.metrics.count("SUMMARIZE.rougeL"));
  EXPECT_TRUE(rep.metrics.count("TRANSLATE.bleu"));
  EXPECT_TRUE(rep.metrics.count("COT.exact"));
  EXPECT_TRUE(rep.metrics.count("DIRECT.exact"));
}

TEST(Harness, EvalSetIsDeterministic) {
  const auto cfg = fixtures::tiny_config().eval;
  const auto a = make_eval_set(space(), cfg, Split::HeldOut);
  const auto b = make_eval_set(space(), cfg, Split::HeldOut);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].sample, b[i].sample);
}

TEST(Harness, AggregatesAreRecomputableFromRecords) {
  const auto items = make_eval_set(space(), fixtures::tiny_config().eval, Split::HeldOut);
  std::size_t n = 0;
  const auto rep = evaluate(items, [&](const InstructionSample& s) { return ++n % 3 ? s.target : std::string("x"); });
  const auto j = to_json(rep);
  std::vector<SampleRecord> recs;
  for (const auto& r : j.at("records"))
    recs.push_back({group_from_name(r.at("group").get<std::string>()), r.at("prompt"), r.at("target"), r.at("output"),
                    r.at("scores").get<std::map<std::string, double>>()});
  const auto stored = j.at("metrics").get<std::map<std::string, double>>();
  EXPECT_EQ(aggregate(recs), stored);
  EXPECT_LT(rep.metrics.at("MULTI.ifr_followed"), 1.0 + 1e-12);
}

TEST(Harness, RecordOrderDoesNotMatter) {
  auto items = make_eval_set(space(), fixtures::tiny_config().eval, Split::HeldOut);
  auto respond = [](const InstructionSample& s) { return s.symbols.size() % 2 ? s.target : std::string("b"); };
  const auto a = evaluate(items, respond).metrics;
  std::mt19937_64 g(1);
  std::shuffle(items.begin(), items.end(), g);
  const auto b = evaluate(items, respond).metrics;
  ASSERT_EQ(a.size(), b.size());
  for (const auto& [k, v] : a) EXPECT_NEAR(b.at(k), v, 1e-12) << k;
}

TEST(Harness, EvalItemJsonRoundTrip) {
  for (const auto& it : make_eval_set(space(), fixtures::tiny_config().eval, Split::HeldOut)) {
    const auto back = item_from_json(space(), item_to_json(space(), it));
    EXPECT_EQ(back.group, it.group);
    EXPECT_EQ(back.sample.target, it.sample.target);
    EXPECT_EQ(back.sample.prompt, it.sample.prompt);
  }
  EXPECT_THROW(group_from_name("NOPE"), std::invalid_argument);
}

TEST(Robustness, OracleShowsNoGapAndBanksAreGuarded) {
  const auto r = robustness_eval(space(), TaskKind::Transcribe, oracle_responder(), 10, 5);
  EXPECT_EQ(r.seen, 1.0);
  EXPECT_EQ(r.unseen, 1.0);
  taskforge::PromptBank same{{"say it"}, {"say it"}};
  EXPECT_THROW(robustness_eval(space(), TaskKind::Transcribe, oracle_responder(), 4, 5, same), std::invalid_argument);
  taskforge::PromptBank empty{{"say it"}, {}};
  EXPECT_THROW(robustness_eval(space(), TaskKind::Transcribe, oracle_responder(), 4, 5, empty), std::invalid_argument);
}

TEST(Robustness, UnseenPromptsReachTheResponder) {
  std::set<std::string> prompts;
  robustness_eval(space(), TaskKind::Classify,
                  [&](const InstructionSample& s) {
                    prompts.insert(s.prompt);
                    return s.target;
                  },
                  30, 9);
  const auto& bank = taskforge::prompt_banks().at(TaskKind::Classify);
  for (const auto& p : bank.held_out) EXPECT_TRUE(prompts.count(p)) << p;
}

TEST(Cot, OracleAnswersBothForms) {
  const auto r = cot_eval(space(), oracle_responder(), 8, 3);
  EXPECT_EQ(r.cot, 1.0);
  EXPECT_EQ(r.direct, 1.0);
  const auto none = cot_eval(space(), [](const InstructionSample&) { return std::string("q"); }, 8, 3);
  EXPECT_EQ(none.cot, 0.0);
  EXPECT_THROW(cot_eval(space(), oracle_responder(), 0, 3), std::invalid_argument);
}

// ---------------------------------------------------------------- projection

TEST(Pca, PointsOnALineHaveNoSecondCoordinate) {
  Eigen::MatrixXd x(5, 3);
  for (int i = 0; i < 5; ++i) x.row(i) << 1 + 1.0 * i, -2 + 2.0 * i, 0.5 + 3.0 * i;
  const auto p = pca2(x);
  const Eigen::MatrixXd coords = (x.rowwise() - p.mean.transpose()) * p.components;
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(coords(i, 1), 0.0, 1e-9);
  const Eigen::Vector3d dir = Eigen::Vector3d(1, 2, 3).normalized();
  EXPECT_NEAR((p.components.col(0) - dir).norm(), 0.0, 1e-12);
}

TEST(Pca, MatchesClosedFormTwoByTwo) {
  Eigen::MatrixXd x(4, 2);
  x << 0, 0, 1, 2, 3, 1, 4, 5;
  // mean (2, 2); centered rows (-2,-2) (-1,0) (1,-1) (2,3)
  // covariance over n-1 = 3: [[10, 9], [9, 14]] / 3
  const double a = 10.0 / 3, b = 9.0 / 3, c = 14.0 / 3;
  const double mid = (a + c) / 2, rad = std::sqrt((a - c) * (a - c) / 4 + b * b);
  const auto p = pca2(x);
  EXPECT_NEAR(p.variances(0), mid + rad, 1e-12);
  EXPECT_NEAR(p.variances(1), mid - rad, 1e-12);
  for (int k = 0; k < 2; ++k) {
    const double lambda = k ? mid - rad : mid + rad;
    Eigen::Vector2d v(b, lambda - a);
    v.normalize();
    if (std::abs(v(1)) > std::abs(v(0)) ? v(1) < 0 : v(0) < 0) v = -v;
    EXPECT_NEAR((p.components.col(k) - v).norm(), 0.0, 1e-12) << k;
  }
}

TEST(Pca, NeedsThreePoints) {
  EXPECT_THROW(pca2(Eigen::MatrixXd::Zero(2, 4)), std::invalid_argument);
}

TEST(Export, DuplicatesShareCoordinatesAndCsvIsWellFormed) {
  WavLLM m(fixtures::tiny_config(), 2);
  std::mt19937_64 g(1);
  for (auto* p : m.params())
    if (p->name.starts_with("pa.")) {
      std::normal_distribution<double> d(0.0, 0.5);
      for (double& v : p->value.values()) v = d(g);
    }
  const auto bank = bank_prompts(Split::Train);
  const std::vector<std::pair<std::string, std::string>> prompts{bank[0], bank.back(), bank[0], bank[bank.size() / 2]};
  const auto recs = export_scalings(m, prompts);
  ASSERT_EQ(recs.size(), 4u);
  EXPECT_EQ(recs[0].r, recs[2].r);
  EXPECT_EQ(recs[0].pc1, recs[2].pc1);
  EXPECT_EQ(recs[0].pc2, recs[2].pc2);
  EXPECT_EQ(recs[0].r.size(), 8u);
  const auto csv = to_csv(recs);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "prompt,task,pc1,pc2,r0,r1,r2,r3,r4,r5,r6,r7");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
  EXPECT_THROW(export_scalings(m, {prompts[0], prompts[1]}), std::invalid_argument);
  EXPECT_EQ(csv_field("a, \"b\""), "\"a, \"\"b\"\"\"");
  EXPECT_EQ(csv_field("plain"), "plain");
}

TEST(Export, BankPromptsAreConcreteAndTagged) {
  const auto ps = bank_prompts(Split::Train);
  EXPECT_GE(ps.size(), 6u * 8u);
  const taskforge::Vocab v(space());
  for (const auto& [text, task] : ps) {
    EXPECT_EQ(text.find('{'), std::string::npos) << text;
    EXPECT_NO_THROW(v.encode(text)) << text;
    EXPECT_NO_THROW(group_from_name(task));
  }
}
