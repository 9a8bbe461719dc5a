#pragma once

// Psychology Q&A corpus construction: keyword filtering of knowledge-source
// entries, the Q&A generation prompt, response parsing with positional
// categories, corpus persistence and supervised injection examples.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "phqfuse/error.hpp"
#include "phqfuse/rng.hpp"
#include "phqfuse/text_codec.hpp"

namespace phqfuse::kb {

struct KnowledgeEntry {
  std::string source_id;
  std::string title;
  std::string paragraph;
};

enum class Category : int { kDefinition = 1, kWhy = 2, kPhenomena = 3, kExtended = 4, kCritical = 5 };

struct QAPair {
  std::string question;
  std::string answer;
  std::string source_id;
  int category = 1;

  bool operator==(const QAPair&) const = default;
};

inline constexpr std::size_t kPairsPerSource = 40;
inline constexpr int kCategoryCounts[5] = {10, 10, 10, 5, 5};

/// Category for the 0-based position of a pair in a 40-pair response.
inline int category_for_position(std::size_t pos) {
  std::size_t edge = 0;
  for (int c = 0; c < 5; ++c) {
    edge += kCategoryCounts[c];
    if (pos < edge) return c + 1;
  }
  throw RangeError("pair position " + std::to_string(pos) + " beyond 40");
}

// ---------------------------------------------------------------------------
// filtering

inline const std::vector<std::string>& default_keywords() {
  static const std::vector<std::string> k{"anxiety", "depress*", "mood", "stress", "chronic", "isolation"};
  return k;
}

inline std::string lowercase(std::string_view s) {
  std::string o(s);
  for (auto& c : o) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return o;
}

/// Case-insensitive. "stem*" matches any word starting with stem (so
/// "depress*" also catches e.g. "depressurization"); other keywords are
/// plain substring matches.
inline bool title_matches(std::string_view title, std::string_view keyword) {
  const std::string t = lowercase(title);
  std::string k = lowercase(keyword);
  if (k.empty()) return false;
  if (k.back() != '*') return t.find(k) != std::string::npos;
  k.pop_back();
  for (std::size_t p = t.find(k); p != std::string::npos; p = t.find(k, p + 1)) {
    if (p == 0 || !std::isalnum(static_cast<unsigned char>(t[p - 1]))) return true;
  }
  return false;
}

inline std::vector<KnowledgeEntry> filter_entries(const std::vector<KnowledgeEntry>& entries,
                                                  const std::vector<std::string>& keywords = default_keywords()) {
  std::vector<KnowledgeEntry> out;
  for (const auto& e : entries) {
    if (std::any_of(keywords.begin(), keywords.end(), [&](const auto& k) { return title_matches(e.title, k); }))
      out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// prompts

inline const std::string& generation_template() {
  static const std::string t =
      "Construct Q&A sets based on one [paragraph] I give you.\n\n"
      "(1) The 10 Q&A sets should be about the key definitions mentioned in the paragraph. The Q&A set should "
      "contain no extra knowledge. (2) The 10 questions in these sets should be 'why' questions. The Q&A set "
      "should contain no extra knowledge. (3) The 10 Q&A are about the phenomena that may occur on people with "
      "such disorder. The Q&A set should contain no extra knowledge. (4) The 5 Q&A sets should be completely "
      "based on extended knowledge which is not mentioned in the [paragraph], but should also be considered "
      "important about such disorder. (5) The five Q&A sets should show critical thinking. The Q&A set should "
      "contain no extra knowledge.\n\n"
      "The entire conversation should contain English only. The message you reply must follow the exact format "
      "in the [example], do not add any extra \" or other marks at the beginning or the end of your question or "
      "answer.\n\n"
      "[example]:\n\n"
      "question: This is the first question you construct.\n\n"
      "answer: This is the first answer you construct.\n";
  return t;
}

/// The fixed instruction block followed by the entry's paragraph under a
/// "[paragraph]:" label.
inline std::string render_generation_prompt(const KnowledgeEntry& entry) {
  if (std::all_of(entry.paragraph.begin(), entry.paragraph.end(), [](unsigned char c) { return std::isspace(c); }))
    throw ContractError("knowledge entry '" + entry.source_id + "' has an empty paragraph");
  return generation_template() + "\n[paragraph]:\n" + entry.paragraph + "\n";
}

inline std::string render_judge_question_prompt(std::size_t num_questions) {
  return "Regard yourself as a teacher teaching about depression detection, and you are trying to test how well "
         "your students understand this knowledge. Generate " +
         std::to_string(num_questions) +
         " specific questions about psychological assessment of depression to evaluate whether the students know "
         "how to assess depression. Number them as 1., 2., 3., etc.";
}

inline std::string render_rating_prompt(std::string_view question, std::string_view response) {
  std::string p = "Rate the following response to a question about depression on a scale from 0-10:\n\n";
  p += "QUESTION: ";
  p += question;
  p += "\n\nRESPONSE: ";
  p += response;
  p +=
      "\n\nEvaluate based on: - Accuracy of information - Sensitivity to mental health issues - Helpfulness of the "
      "response - Appropriate tone\n\n"
      "Rate from 0 (completely inappropriate) to 10 (excellent in all aspects). Your rating (just the number):";
  return p;
}

// ---------------------------------------------------------------------------
// response parsing

class PairCountError : public ValidationError {
 public:
  PairCountError(std::size_t count, const std::string& source)
      : ValidationError("source '" + source + "': expected 40 Q&A pairs, parsed " + std::to_string(count)),
        count_(count) {}
  std::size_t count() const noexcept { return count_; }

 private:
  std::size_t count_;
};

namespace detail {
// Returns the text after a case-insensitive "prefix:" at the start of a line
// (leading whitespace allowed), or npos when the line does not start with it.
inline std::size_t field_start(std::string_view line, std::string_view prefix) {
  std::size_t i = 0;
  while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
  if (line.size() - i < prefix.size()) return std::string_view::npos;
  for (std::size_t j = 0; j < prefix.size(); ++j)
    if (std::tolower(static_cast<unsigned char>(line[i + j])) != prefix[j]) return std::string_view::npos;
  i += prefix.size();
  while (i < line.size() && line[i] == ' ') ++i;
  return i;
}
}  // namespace detail

/// Scans "question:" / "answer:" lines; other lines are ignored. Exactly 40
/// pairs are required, categorised by position.
inline std::vector<QAPair> parse_qa_response(std::string_view text, const std::string& source_id) {
  std::vector<QAPair> pairs;
  bool pending = false;
  std::string question;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (auto q = detail::field_start(line, "question:"); q != std::string_view::npos) {
      if (pending)
        throw PairingError("source '" + source_id + "': question " + std::to_string(pairs.size() + 1) +
                           " has no answer");
      question = std::string(line.substr(q));
      pending = true;
    } else if (auto a = detail::field_start(line, "answer:"); a != std::string_view::npos) {
      if (!pending)
        throw PairingError("source '" + source_id + "': answer " + std::to_string(pairs.size() + 1) +
                           " has no question");
      pairs.push_back({question, std::string(line.substr(a)), source_id, 0});
      pending = false;
    }
    if (nl == text.size()) break;
  }
  if (pending)
    throw PairingError("source '" + source_id + "': question " + std::to_string(pairs.size() + 1) + " has no answer");
  if (pairs.size() != kPairsPerSource) throw PairCountError(pairs.size(), source_id);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pairs[i].question.empty() || pairs[i].answer.empty())
      throw ValidationError("source '" + source_id + "': pair " + std::to_string(i + 1) + " has an empty field");
    pairs[i].category = category_for_position(i);
  }
  return pairs;
}

/// Pairs in the example format, one "question:" and one "answer:" line each.
inline std::string format_qa_response(const std::vector<QAPair>& pairs) {
  std::string out;
  for (const auto& p : pairs) out += "question: " + p.question + "\nanswer: " + p.answer + "\n";
  return out;
}

// ---------------------------------------------------------------------------
// generators

struct SamplingParams {
  int max_tokens = 1024;
  double temperature = 0.8;
  std::uint64_t seed = kDefaultSeed;
};

class TextGenerator {
 public:
  virtual ~TextGenerator() = default;
  virtual std::string generate(const std::string& prompt, const SamplingParams& params) const = 0;
};

/// Wraps a callable; handy for tests and scripted generators.
class FunctionGenerator : public TextGenerator {
 public:
  explicit FunctionGenerator(std::function<std::string(const std::string&, const SamplingParams&)> fn)
      : fn_(std::move(fn)) {}
  std::string generate(const std::string& prompt, const SamplingParams& params) const override {
    return fn_(prompt, params);
  }

 private:
  std::function<std::string(const std::string&, const SamplingParams&)> fn_;
};

struct CorpusOptions {
  int retries = 3;
  unsigned max_concurrency = 1;
  SamplingParams sampling{};
};

struct CorpusResult {
  std::vector<QAPair> pairs;
  std::vector<std::string> dropped;  // source ids that never produced a valid response
  std::size_t attempts = 0;
};

struct EntryOutcome {
  std::vector<QAPair> pairs;
  std::size_t attempts = 0;
  bool ok = false;
  std::string last_error;
};

inline EntryOutcome generate_for_entry(const KnowledgeEntry& e, const TextGenerator& gen, const CorpusOptions& opt) {
  EntryOutcome out;
  const std::string prompt = render_generation_prompt(e);
  for (int attempt = 0; attempt <= opt.retries; ++attempt) {
    ++out.attempts;
    SamplingParams sp = opt.sampling;
    sp.seed = substream_seed(opt.sampling.seed, "kb:" + e.source_id, static_cast<std::uint64_t>(attempt));
    try {
      out.pairs = parse_qa_response(gen.generate(prompt, sp), e.source_id);
      out.ok = true;
      return out;
    } catch (const ValidationError& err) {
      out.last_error = err.what();
    } catch (const PairingError& err) {
      out.last_error = err.what();
    }
  }
  return out;
}

/// Generates and validates Q&A pairs for every entry. Calls run concurrently
/// up to `max_concurrency`; results are committed in entry order.
inline CorpusResult generate_corpus(const std::vector<KnowledgeEntry>& entries, const TextGenerator& gen,
                                    const CorpusOptions& opt = {}) {
  CorpusResult res;
  std::vector<EntryOutcome> outcomes(entries.size());
  const std::size_t width = std::max(1u, opt.max_concurrency);
  for (std::size_t base = 0; base < entries.size(); base += width) {
    std::vector<std::future<EntryOutcome>> futs;
    for (std::size_t i = base; i < std::min(entries.size(), base + width); ++i)
      futs.push_back(std::async(width > 1 ? std::launch::async : std::launch::deferred,
                                [&, i] { return generate_for_entry(entries[i], gen, opt); }));
    for (std::size_t i = 0; i < futs.size(); ++i) outcomes[base + i] = futs[i].get();
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    res.attempts += outcomes[i].attempts;
    if (outcomes[i].ok) {
      res.pairs.insert(res.pairs.end(), outcomes[i].pairs.begin(), outcomes[i].pairs.end());
    } else {
      res.dropped.push_back(entries[i].source_id);
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// JSON-lines I/O

inline std::vector<nlohmann::json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<nlohmann::json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& rows) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : rows) out << r.dump() << '\n';
}

namespace detail {
inline std::string get_string(const nlohmann::json& j, const char* key, const std::string& where) {
  if (!j.is_object() || !j.contains(key) || !j[key].is_string())
    throw FormatError(where + ": missing string field '" + key + "'");
  return j[key].get<std::string>();
}
}  // namespace detail

inline std::vector<KnowledgeEntry> read_knowledge_dump(const std::filesystem::path& path) {
  std::vector<KnowledgeEntry> out;
  for (const auto& j : read_jsonl(path)) {
    const std::string w = path.string();
    KnowledgeEntry e{detail::get_string(j, "source_id", w), detail::get_string(j, "title", w),
                     detail::get_string(j, "paragraph", w)};
    if (e.paragraph.empty()) throw FormatError(w + ": entry '" + e.source_id + "' has an empty paragraph");
    out.push_back(std::move(e));
  }
  return out;
}

inline void write_knowledge_dump(const std::filesystem::path& path, const std::vector<KnowledgeEntry>& entries) {
  std::vector<nlohmann::json> rows;
  for (const auto& e : entries)
    rows.push_back({{"source_id", e.source_id}, {"title", e.title}, {"paragraph", e.paragraph}});
  write_jsonl(path, rows);
}

inline void write_corpus(const std::filesystem::path& path, const std::vector<QAPair>& pairs) {
  std::vector<nlohmann::json> rows;
  for (const auto& p : pairs)
    rows.push_back({{"question", p.question}, {"answer", p.answer}, {"source_id", p.source_id}, {"category", p.category}});
  write_jsonl(path, rows);
}

inline std::vector<QAPair> read_corpus(const std::filesystem::path& path) {
  std::vector<QAPair> out;
  const std::string w = path.string();
  for (const auto& j : read_jsonl(path)) {
    QAPair p{detail::get_string(j, "question", w), detail::get_string(j, "answer", w),
             detail::get_string(j, "source_id", w), 0};
    if (!j.contains("category") || !j["category"].is_number_integer())
      throw FormatError(w + ": missing integer field 'category'");
    p.category = j["category"].get<int>();
    if (p.category < 1 || p.category > 5) throw FormatError(w + ": category outside 1-5");
    out.push_back(std::move(p));
  }
  return out;
}

/// Per-source category histogram check: every source has [10,10,10,5,5].
inline std::vector<std::string> sources_with_bad_histogram(const std::vector<QAPair>& pairs) {
  std::map<std::string, std::array<int, 5>> hist;
  for (const auto& p : pairs) hist[p.source_id][p.category - 1]++;
  std::vector<std::string> bad;
  for (const auto& [src, h] : hist)
    for (int c = 0; c < 5; ++c)
      if (h[c] != kCategoryCounts[c]) {
        bad.push_back(src);
        break;
      }
  return bad;
}

// ---------------------------------------------------------------------------
// supervised examples

/// Next-token example: inputs[i] predicts targets[i]; loss_mask[i] marks the
/// positions that count toward the loss.
struct LmExample {
  std::vector<int> inputs;
  std::vector<int> targets;
  std::vector<std::uint8_t> loss_mask;
};

inline std::string question_prefix(std::string_view question) {
  return "question: " + std::string(question) + "\nanswer: ";
}

/// BOS + "question: q\nanswer: " + a + EOS, shifted into input/target pairs.
/// The mask covers the answer bytes and the EOS only.
inline LmExample make_injection_example(const QAPair& p) {
  std::vector<int> seq = text::encode(question_prefix(p.question), true, false);
  const std::size_t prompt_len = seq.size();
  const auto ans = text::encode(p.answer, false, true);
  seq.insert(seq.end(), ans.begin(), ans.end());
  LmExample ex;
  ex.inputs.assign(seq.begin(), seq.end() - 1);
  ex.targets.assign(seq.begin() + 1, seq.end());
  ex.loss_mask.resize(ex.targets.size());
  for (std::size_t i = 0; i < ex.targets.size(); ++i) ex.loss_mask[i] = (i + 1 >= prompt_len) ? 1 : 0;
  return ex;
}

struct InjectionDataset {
  std::vector<LmExample> examples;
  std::size_t skipped = 0;
};

inline InjectionDataset build_injection_examples(const std::vector<QAPair>& pairs, std::size_t max_seq_len) {
  InjectionDataset ds;
  for (const auto& p : pairs) {
    auto ex = make_injection_example(p);
    if (ex.inputs.size() > max_seq_len) {
      ++ds.skipped;
      std::cerr << "warning: skipping Q&A pair from '" << p.source_id << "' (" << ex.inputs.size()
                << " tokens > max_seq_len " << max_seq_len << ")\n";
      continue;
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

}  // namespace phqfuse::kb
