// Copyright (c) 2026, the wavllm-desk authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic instruction data. A clip is a latent symbol sequence plus a
// categorical "emotion"; every task answer is a pure function of that
// latent. Prompts come from fixed paraphrase banks, bank 0 for training and
// bank 1 held out.

#pragma once

#include <algorithm>
#include <array>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "wavllm/common.hpp"

namespace wavllm::taskforge {

enum class TaskKind { Transcribe, Translate, Classify, Sqa, TextIt, Summarize };

inline constexpr std::array<TaskKind, 6> kAllKinds{TaskKind::Transcribe, TaskKind::Translate, TaskKind::Classify,
                                                   TaskKind::Sqa,        TaskKind::TextIt,    TaskKind::Summarize};

inline std::string_view kind_name(TaskKind k) {
  switch (k) {
    case TaskKind::Transcribe: return "TRANSCRIBE";
    case TaskKind::Translate: return "TRANSLATE";
    case TaskKind::Classify: return "CLASSIFY";
    case TaskKind::Sqa: return "SQA";
    case TaskKind::TextIt: return "TEXT_IT";
    case TaskKind::Summarize: return "SUMMARIZE";
  }
  return "?";
}

inline TaskKind kind_from_name(std::string_view s) {
  for (TaskKind k : kAllKinds)
    if (kind_name(k) == s) return k;
  throw std::invalid_argument("unknown task kind '" + std::string(s) + "'");
}

enum class Split { Train = 0, HeldOut = 1 };

inline std::string_view split_name(Split s) { return s == Split::Train ? "train" : "heldout"; }

// ---------------------------------------------------------------- banks

struct PromptBank {
  std::vector<std::string> train;
  std::vector<std::string> held_out;

  const std::vector<std::string>& get(Split s) const { return s == Split::Train ? train : held_out; }
};

/// Paraphrase banks. `{k}` is a 1-based position, `{x}` a symbol.
inline const std::map<TaskKind, PromptBank>& prompt_banks() {
  static const std::map<TaskKind, PromptBank> banks{
      {TaskKind::Transcribe,
       {{"transcribe the audio", "write down the spoken symbols", "transcribe the speech into text",
         "give the transcription of the clip", "recognize the speech and write it", "write what is spoken in the audio",
         "convert the spoken audio into text", "provide a full transcription of the speech"},
        {"write the transcription of the audio", "recognize the spoken symbols in the clip",
         "convert the clip into a written transcription", "transcribe what the speech says"}}},
      {TaskKind::Translate,
       {{"translate the audio", "give the translation of the speech", "translate the spoken symbols",
         "provide a translation of the clip", "convert the speech into its translation", "translate what is spoken",
         "render the audio as a translation", "write the translation of the spoken audio"},
        {"translate the clip", "give a translation of the spoken audio", "render the speech as a translation",
         "translate what the audio says"}}},
      {TaskKind::Classify,
       {{"what emotion does the speaker show", "recognize the emotion of the speech", "classify the emotion in the audio",
         "which emotion is in the clip", "identify the speaker emotion", "give the emotion of the spoken audio",
         "detect the emotion in the speech", "tell the emotion of the speaker"},
        {"what is the emotion of the audio", "classify the speaker emotion", "identify the emotion in the clip",
         "recognize which emotion the speaker has"}}},
      {TaskKind::Sqa,
       {{"what is spoken symbol number {k}", "which symbol is at position {k}", "tell symbol number {k} in the audio",
         "give the spoken symbol at position {k}", "what symbol comes at position {k}",
         "identify symbol number {k} of the speech", "which spoken symbol is number {k}", "name symbol number {k} in the clip"},
        {"what is the symbol at position {k}", "give symbol number {k} of the audio",
         "which symbol is number {k} in the speech", "identify the symbol at position {k}"}}},
      {TaskKind::TextIt,
       {{"ignore the audio, what letter comes after {x}", "ignore the audio, name the letter after {x}",
         "setting aside the audio, which letter follows {x}", "ignore the audio, give the letter that follows {x}",
         "disregarding the sound, what letter follows {x}", "setting aside the audio, what letter comes after {x}",
         "disregarding the sound, name the letter after {x}", "ignore the audio, which letter follows {x}"},
        {"disregarding the sound, give the letter after {x}", "setting aside the audio, name the letter that follows {x}",
         "ignore the audio, tell the letter after {x}", "disregarding the sound, which letter comes after {x}"}}},
      {TaskKind::Summarize,
       {{"summarize the audio", "give a summary of the speech", "provide a short summary of the clip",
         "summarize what is spoken", "write a summary of the spoken audio", "give the summary of the audio",
         "condense the speech into a summary", "summarize the spoken symbols"},
        {"write a short summary of the audio", "condense the clip into a summary", "give a summary of the spoken symbols",
         "summarize the speech"}}},
  };
  return banks;
}

/// Translation of the previous step's summary inside a chained prompt.
inline const PromptBank& chain_translate_bank() {
  static const PromptBank bank{
      {"translate that summary", "give the translation of the summary", "translate the summary above",
       "provide a translation of that summary", "render the summary as a translation",
       "write the translation of the summary", "convert that summary into a translation", "translate this summary"},
      {"give a translation of the summary", "translate the summary", "render that summary as a translation",
       "write a translation of this summary"}};
  return bank;
}

/// One-shot request for the translated summary.
inline const PromptBank& direct_bank() {
  static const PromptBank bank{
      {"give the translated summary of the audio", "summarize the audio as a translation",
       "provide the summary of the speech in translation", "write a translated summary of the clip",
       "give the summary of the clip in translation", "translate the summary of the audio",
       "provide a translated summary of the speech", "write the summary of the audio as a translation"},
      {"give a translated summary of the speech", "summarize the clip as a translation",
       "provide the translated summary of the clip", "write the audio summary in translation"}};
  return bank;
}

struct Connectives {
  std::vector<std::string> first{"First", "Initially", "To begin"};
  std::vector<std::string> middle{"Then", "Next", "Additionally"};
  std::vector<std::string> last{"Lastly", "Finally", "Last step"};
};

inline std::string echo_phrase(TaskKind k, std::size_t pos, char sym) {
  switch (k) {
    case TaskKind::Transcribe: return "transcription";
    case TaskKind::Translate: return "translation";
    case TaskKind::Classify: return "emotion";
    case TaskKind::Sqa: return "symbol " + std::to_string(pos);
    case TaskKind::TextIt: return std::string("after ") + sym;
    case TaskKind::Summarize: return "summary";
  }
  return {};
}

// ---------------------------------------------------------------- task space

/// Ground-truth rules shared by data generation and evaluation.
struct TaskSpace {
  std::size_t num_symbols = 26;
  std::vector<std::string> categories{"calm", "happy", "angry", "sad"};
  std::vector<std::size_t> permutation;  ///< symbol index -> translated index
  std::size_t min_len = 4;
  std::size_t max_len = 6;
  std::size_t summary_k = 2;

  TaskSpace() : TaskSpace(7) {}
  explicit TaskSpace(std::size_t shift) {
    permutation.resize(num_symbols);
    for (std::size_t i = 0; i < num_symbols; ++i) permutation[i] = (i + shift) % num_symbols;
  }

  static std::string symbol(std::size_t i) { return std::string(1, static_cast<char>('a' + i)); }

  std::vector<std::size_t> translate(const std::vector<std::size_t>& s) const {
    std::vector<std::size_t> out;
    for (auto c : s) out.push_back(permutation.at(c));
    return out;
  }

  /// First `summary_k` distinct symbols in order of appearance.
  std::vector<std::size_t> summarize(const std::vector<std::size_t>& s) const {
    std::vector<std::size_t> out;
    for (auto c : s) {
      if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
      if (out.size() == summary_k) break;
    }
    return out;
  }

  std::size_t successor(std::size_t c) const { return (c + 1) % num_symbols; }

  std::string spell(const std::vector<std::size_t>& s) const {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? " " : "") + symbol(s[i]);
    return out;
  }
};

// ---------------------------------------------------------------- samples

struct SubTask {
  TaskKind kind = TaskKind::Transcribe;
  std::string prompt;
  std::string echo;
  std::string answer;
  bool of_summary = false;  ///< TRANSLATE applied to the summary rather than the clip

  friend bool operator==(const SubTask&, const SubTask&) = default;
};

struct InstructionSample {
  std::vector<std::size_t> symbols;
  std::size_t category = 0;
  std::uint64_t seed = 0;  ///< speech seed; features are a function of (symbols, category, seed)
  std::string prompt;
  std::string target;
  std::vector<SubTask> tasks;
  Split split = Split::Train;
  std::size_t variant = 0;  ///< bank index of the first sub-prompt

  bool multi() const { return tasks.size() > 1; }
  friend bool operator==(const InstructionSample&, const InstructionSample&) = default;
};

namespace detail {

inline std::string fill(std::string tmpl, std::string_view key, const std::string& value) {
  for (auto p = tmpl.find(key); p != std::string::npos; p = tmpl.find(key)) tmpl.replace(p, key.size(), value);
  return tmpl;
}

struct Latent {
  std::vector<std::size_t> symbols;
  std::size_t category;
};

inline Latent draw_latent(const TaskSpace& ts, Rng& rng) {
  Latent l;
  const std::size_t n = ts.min_len + uniform_index(rng, ts.max_len - ts.min_len + 1);
  for (std::size_t i = 0; i < n; ++i) l.symbols.push_back(uniform_index(rng, ts.num_symbols));
  l.category = uniform_index(rng, ts.categories.size());
  return l;
}

inline SubTask make_subtask(const TaskSpace& ts, TaskKind kind, const Latent& l, Rng& rng, Split split,
                            std::size_t* variant, bool of_summary = false) {
  const std::size_t k = 1 + uniform_index(rng, ts.min_len < 4 ? ts.min_len : 4);
  const std::size_t x = uniform_index(rng, ts.num_symbols);
  const auto& bank = of_summary ? chain_translate_bank().get(split) : prompt_banks().at(kind).get(split);
  const std::size_t v = uniform_index(rng, bank.size());
  if (variant) *variant = v;
  SubTask st;
  st.kind = kind;
  st.of_summary = of_summary;
  st.prompt = fill(fill(bank[v], "{k}", std::to_string(k)), "{x}", TaskSpace::symbol(x));
  st.echo = echo_phrase(kind, k, static_cast<char>('a' + x));
  switch (kind) {
    case TaskKind::Transcribe: st.answer = ts.spell(l.symbols); break;
    case TaskKind::Translate:
      st.answer = ts.spell(ts.translate(of_summary ? ts.summarize(l.symbols) : l.symbols));
      break;
    case TaskKind::Classify: st.answer = ts.categories.at(l.category); break;
    case TaskKind::Sqa: st.answer = TaskSpace::symbol(l.symbols.at(k - 1)); break;
    case TaskKind::TextIt: st.answer = TaskSpace::symbol(ts.successor(x)); break;
    case TaskKind::Summarize: st.answer = ts.spell(ts.summarize(l.symbols)); break;
  }
  return st;
}

inline InstructionSample from_single(const Latent& l, std::uint64_t seed, SubTask st, Split split, std::size_t variant) {
  InstructionSample s;
  s.symbols = l.symbols;
  s.category = l.category;
  s.seed = seed;
  s.prompt = st.prompt;
  s.target = st.answer;
  s.tasks = {std::move(st)};
  s.split = split;
  s.variant = variant;
  return s;
}

}  // namespace detail

/// One single-task sample, a pure function of (kind, seed, split).
inline InstructionSample synth_single(const TaskSpace& ts, TaskKind kind, std::uint64_t seed, Split split = Split::Train) {
  Rng rng(seed);
  const auto latent = detail::draw_latent(ts, rng);
  std::size_t variant = 0;
  auto st = detail::make_subtask(ts, kind, latent, rng, split, &variant);
  return detail::from_single(latent, seed, std::move(st), split, variant);
}

inline std::string section_line(std::size_t i, const SubTask& st) {
  return "### task " + std::to_string(i) + ": " + st.echo + " => " + st.answer;
}

/// Joins sub-task samples into one instruction. Audio sub-tasks must share
/// the clip; TEXT_IT samples ignore it.
inline InstructionSample compose_multitask(const std::vector<InstructionSample>& parts, Rng& rng,
                                           const Connectives& conn = {}) {
  if (parts.empty() || parts.size() > 4)
    throw std::invalid_argument("compose_multitask: expected 1-4 sub-tasks, got " + std::to_string(parts.size()));
  if (parts.size() == 1) return parts.front();
  const InstructionSample* clip = nullptr;
  for (const auto& p : parts) {
    if (p.tasks.size() != 1) throw std::invalid_argument("compose_multitask: parts must be single-task samples");
    if (p.tasks[0].kind == TaskKind::TextIt) continue;
    if (!clip) clip = &p;
    else if (p.symbols != clip->symbols || p.category != clip->category || p.seed != clip->seed)
      throw std::invalid_argument("compose_multitask: audio sub-tasks refer to different speech clips");
  }
  if (!clip) clip = &parts.front();
  InstructionSample out;
  out.symbols = clip->symbols;
  out.category = clip->category;
  out.seed = clip->seed;
  out.split = parts.front().split;
  out.variant = parts.front().variant;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& bank = i == 0 ? conn.first : i + 1 == parts.size() ? conn.last : conn.middle;
    const std::string& c = bank[uniform_index(rng, bank.size())];
    out.prompt += (i ? "; " : "") + c + ", " + parts[i].tasks[0].prompt;
    out.target += (i ? "\n" : "") + section_line(i + 1, parts[i].tasks[0]);
    out.tasks.push_back(parts[i].tasks[0]);
  }
  return out;
}

/// Multi-task sample over one clip. With `chain`, a TRANSLATE that follows a
/// SUMMARIZE translates the summary.
inline InstructionSample synth_multitask(const TaskSpace& ts, const std::vector<TaskKind>& kinds, std::uint64_t seed,
                                         Split split = Split::Train, bool chain = false) {
  Rng rng(seed);
  const auto latent = detail::draw_latent(ts, rng);
  std::vector<InstructionSample> parts;
  bool after_summary = false;
  for (TaskKind k : kinds) {
    std::size_t variant = 0;
    const bool of_summary = chain && k == TaskKind::Translate && after_summary;
    auto st = detail::make_subtask(ts, k, latent, rng, split, &variant, of_summary);
    parts.push_back(detail::from_single(latent, seed, std::move(st), split, variant));
    after_summary = after_summary || k == TaskKind::Summarize;
  }
  return compose_multitask(parts, rng);
}

/// Chained (transcribe, summarize, translate) sample and the one-shot
/// request for the same final answer.
inline std::pair<InstructionSample, InstructionSample> make_cot_pair(const TaskSpace& ts, std::uint64_t seed,
                                                                     Split split = Split::Train) {
  auto cot = synth_multitask(ts, {TaskKind::Transcribe, TaskKind::Summarize, TaskKind::Translate}, seed, split, true);
  Rng rng(mix_seed(seed, 77));
  const auto& bank = direct_bank().get(split);
  const std::size_t v = uniform_index(rng, bank.size());
  SubTask st;
  st.kind = TaskKind::Translate;
  st.of_summary = true;
  st.prompt = bank[v];
  st.echo = "translation";
  st.answer = cot.tasks.back().answer;
  detail::Latent l{cot.symbols, cot.category};
  auto direct = detail::from_single(l, cot.seed, std::move(st), split, v);
  return {std::move(cot), std::move(direct)};
}

// ---------------------------------------------------------------- vocabulary

inline const std::vector<std::string>& special_tokens() {
  static const std::vector<std::string> s{"<pad>", "<bos>", "<eos>", "[INST]", "[/INST]", "<<SYS>>", "<</SYS>>",
                                          "<SPEECH>", "</SPEECH>", "<sp>", "<nl>", "###", "task", ":", "=>", ",", ";",
                                          "1", "2", "3", "4", "speech", "assistant"};
  return s;
}

/// Splits text on whitespace, detaching ',', ';' and ':' into their own
/// tokens and mapping newlines to "<nl>".
inline std::vector<std::string> split_text(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (char c : text) {
    if (c == ' ' || c == '\t') flush();
    else if (c == '\n') {
      flush();
      out.emplace_back("<nl>");
    } else if (c == ',' || c == ';' || c == ':') {
      flush();
      out.emplace_back(1, c);
    } else cur += c;
  }
  flush();
  return out;
}

/// Inverse of split_text for canonical text.
inline std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  bool line_start = true;
  for (const auto& t : toks) {
    if (t == "<nl>") {
      out += '\n';
      line_start = true;
      continue;
    }
    const bool punct = t == "," || t == ";" || t == ":";
    if (!line_start && !punct) out += ' ';
    out += t;
    line_start = false;
  }
  return out;
}

class Vocab {
 public:
  explicit Vocab(const TaskSpace& ts) {
    for (const auto& s : special_tokens()) add(s);
    for (std::size_t i = 0; i < ts.num_symbols; ++i) add(TaskSpace::symbol(i));
    for (const auto& c : ts.categories) add(c);
    std::set<std::string> words;
    auto take = [&](const std::string& text) {
      for (auto& w : split_text(detail::fill(detail::fill(text, "{k}", "1"), "{x}", "a"))) words.insert(w);
    };
    for (const auto& [k, bank] : prompt_banks()) {
      for (const auto& p : bank.train) take(p);
      for (const auto& p : bank.held_out) take(p);
      take(echo_phrase(k, 1, 'a'));
    }
    for (const PromptBank* b : {&chain_translate_bank(), &direct_bank()}) {
      for (const auto& p : b->train) take(p);
      for (const auto& p : b->held_out) take(p);
    }
    Connectives conn;
    for (const auto* v : {&conn.first, &conn.middle, &conn.last})
      for (const auto& c : *v) take(c);
    for (const auto& w : words) add(w);
  }

  std::size_t size() const { return words_.size(); }
  const std::string& word(std::size_t id) const { return words_.at(id); }

  std::size_t id(std::string_view w) const {
    auto it = ids_.find(std::string(w));
    if (it == ids_.end()) throw std::invalid_argument("vocab: unknown token '" + std::string(w) + "'");
    return it->second;
  }
  bool contains(std::string_view w) const { return ids_.count(std::string(w)) > 0; }

  std::vector<std::size_t> encode(std::string_view text) const {
    std::vector<std::size_t> out;
    for (const auto& t : split_text(text)) out.push_back(id(t));
    return out;
  }

  std::string decode(const std::vector<std::size_t>& ids) const {
    std::vector<std::string> toks;
    for (auto i : ids) toks.push_back(word(i));
    return join_tokens(toks);
  }

 private:
  void add(const std::string& w) {
    if (ids_.count(w)) return;
    ids_.emplace(w, words_.size());
    words_.push_back(w);
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> ids_;
};

// ---------------------------------------------------------------- template

inline constexpr std::size_t kFramesPerSymbol = 4;

struct RenderedSample {
  std::vector<std::size_t> ids;
  std::vector<double> mask;  ///< 1 on target tokens and the closing <eos>
  std::size_t speech_start = 0;
  std::size_t speech_len = 0;
  std::size_t target_start = 0;  ///< index of the first target token
};

/// <bos> [INST] <<SYS>> speech assistant <</SYS>> <SPEECH> <sp>*N </SPEECH>
/// prompt [/INST] target <eos>, one <sp> slot per post-downsampling frame.
/// With `with_target == false` the sequence stops after [/INST].
inline RenderedSample render_template(const InstructionSample& s, const Vocab& v, std::size_t max_len,
                                      bool with_target = true) {
  RenderedSample r;
  for (const char* t : {"<bos>", "[INST]", "<<SYS>>", "speech", "assistant", "<</SYS>>", "<SPEECH>"}) r.ids.push_back(v.id(t));
  r.speech_start = r.ids.size();
  r.speech_len = s.symbols.size();
  r.ids.insert(r.ids.end(), r.speech_len, v.id("<sp>"));
  r.ids.push_back(v.id("</SPEECH>"));
  for (auto id : v.encode(s.prompt)) r.ids.push_back(id);
  r.ids.push_back(v.id("[/INST]"));
  r.target_start = r.ids.size();
  r.mask.assign(r.ids.size(), 0.0);
  if (with_target) {
    for (auto id : v.encode(s.target)) r.ids.push_back(id);
    r.ids.push_back(v.id("<eos>"));
    r.mask.resize(r.ids.size(), 1.0);
  }
  if (r.ids.size() > max_len)
    throw std::length_error("render_template: " + std::to_string(r.ids.size()) + " tokens exceed max length " +
                            std::to_string(max_len));
  return r;
}

// ---------------------------------------------------------------- features

/// Frozen tables turning a latent clip into frame features.
struct FeatureSynth {
  Array symbol_table;    ///< num_symbols x F
  Array category_table;  ///< categories x F
  double noise = 0.1;

  FeatureSynth() = default;
  FeatureSynth(const TaskSpace& ts, std::size_t dim, double noise_amp, std::uint64_t seed) : noise(noise_amp) {
    Rng rng(mix_seed(seed, 101));
    symbol_table = randn({ts.num_symbols, dim}, rng, 1.0);
    category_table = randn({ts.categories.size(), dim}, rng, 0.7);
  }

  FeatureSequence synthesize(const std::vector<std::size_t>& symbols, std::size_t category, std::uint64_t seed) const {
    if (symbols.empty()) throw std::invalid_argument("synthesize: empty symbol sequence");
    const std::size_t f = symbol_table.cols();
    Rng rng(mix_seed(seed, 7));
    std::normal_distribution<double> d(0.0, 1.0);
    FeatureSequence fs{Array({symbols.size() * kFramesPerSymbol, f}), 1.0};
    for (std::size_t i = 0; i < symbols.size(); ++i)
      for (std::size_t j = 0; j < kFramesPerSymbol; ++j)
        for (std::size_t c = 0; c < f; ++c)
          fs.frames.at(i * kFramesPerSymbol + j, c) =
              symbol_table.at(symbols[i], c) + category_table.at(category, c) + noise * d(rng);
    return fs;
  }

  FeatureSequence synthesize(const InstructionSample& s) const { return synthesize(s.symbols, s.category, s.seed); }
};

// ---------------------------------------------------------------- records

inline nlohmann::json to_record(const TaskSpace& ts, const InstructionSample& s) {
  nlohmann::json tasks = nlohmann::json::array();
  for (const auto& t : s.tasks) tasks.push_back(std::string(kind_name(t.kind)));
  return {{"symbols", ts.spell(s.symbols)},
          {"category", ts.categories.at(s.category)},
          {"tasks", tasks},
          {"prompt", s.prompt},
          {"target", s.target},
          {"split", std::string(split_name(s.split))},
          {"seed", s.seed}};
}

/// Inverse of to_record. Multi-task sub-task echoes and answers are recovered
/// from the target sections; sub-task prompts are left empty.
inline InstructionSample from_record(const TaskSpace& ts, const nlohmann::json& j) {
  InstructionSample s;
  try {
    for (const auto& w : split_text(j.at("symbols").get<std::string>())) {
      if (w.size() != 1 || w[0] < 'a' || w[0] >= static_cast<char>('a' + ts.num_symbols))
        throw std::invalid_argument("record: bad symbol '" + w + "'");
      s.symbols.push_back(static_cast<std::size_t>(w[0] - 'a'));
    }
    const auto cat = j.at("category").get<std::string>();
    const auto it = std::find(ts.categories.begin(), ts.categories.end(), cat);
    if (it == ts.categories.end()) throw std::invalid_argument("record: unknown category '" + cat + "'");
    s.category = static_cast<std::size_t>(it - ts.categories.begin());
    s.prompt = j.at("prompt").get<std::string>();
    s.target = j.at("target").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    const auto split = j.at("split").get<std::string>();
    if (split != "train" && split != "heldout") throw std::invalid_argument("record: unknown split '" + split + "'");
    s.split = split == "train" ? Split::Train : Split::HeldOut;
    std::vector<TaskKind> kinds;
    for (const auto& k : j.at("tasks")) kinds.push_back(kind_from_name(k.get<std::string>()));
    if (kinds.empty()) throw std::invalid_argument("record: no tasks");
    if (kinds.size() == 1) {
      s.tasks.push_back({kinds[0], s.prompt, "", s.target, false});
      return s;
    }
    std::istringstream lines(s.target);
    std::string line;
    for (std::size_t i = 0; i < kinds.size(); ++i) {
      if (!std::getline(lines, line)) throw std::invalid_argument("record: target has fewer sections than tasks");
      const std::string head = "### task " + std::to_string(i + 1) + ": ";
      const auto arrow = line.find(" => ");
      if (line.rfind(head, 0) != 0 || arrow == std::string::npos)
        throw std::invalid_argument("record: malformed section '" + line + "'");
      s.tasks.push_back({kinds[i], "", line.substr(head.size(), arrow - head.size()), line.substr(arrow + 4), false});
    }
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("record: ") + e.what());
  }
  return s;
}

}  // namespace wavllm::taskforge
