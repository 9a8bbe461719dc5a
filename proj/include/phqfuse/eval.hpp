#pragma once

// Regression metrics over per-participant means, and the LLM-judge protocol
// (numbered question generation, 0-10 ratings, best-of-k per question).

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "phqfuse/csv.hpp"
#include "phqfuse/data.hpp"
#include "phqfuse/error.hpp"
#include "phqfuse/fusion.hpp"
#include "phqfuse/knowledge.hpp"
#include "phqfuse/rng.hpp"

namespace phqfuse::eval {

namespace detail {
inline void check_pair(std::span<const double> p, std::span<const double> t) {
  if (p.empty()) throw ContractError("metric on empty input");
  if (p.size() != t.size())
    throw ContractError("prediction/truth length mismatch: " + std::to_string(p.size()) + " vs " +
                        std::to_string(t.size()));
}
}  // namespace detail

inline double mae(std::span<const double> pred, std::span<const double> truth) {
  detail::check_pair(pred, truth);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += std::abs(pred[i] - truth[i]);
  return s / static_cast<double>(pred.size());
}

inline double rmse(std::span<const double> pred, std::span<const double> truth) {
  detail::check_pair(pred, truth);
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - truth[i]) * (pred[i] - truth[i]);
  return std::sqrt(s / static_cast<double>(pred.size()));
}

struct ParticipantRow {
  std::string participant_id;
  double truth = 0.0;
  double predicted = 0.0;  // clamped mean of segment scores
  std::size_t segments = 0;
};

struct EvalReport {
  double mae = 0.0;
  double rmse = 0.0;
  std::vector<ParticipantRow> participants;
};

/// Averages segment scores per participant, clamps the mean to the PHQ-8
/// range, and scores the means against the truth table.
inline EvalReport evaluate(std::span<const data::ScoreRecord> predictions, const std::map<std::string, double>& truth) {
  const auto agg = data::aggregate_scores(predictions);
  if (agg.empty()) throw ContractError("no predictions to evaluate");
  std::vector<std::string> missing;
  for (const auto& [pid, s] : agg)
    if (!truth.count(pid)) missing.push_back(pid);
  if (!missing.empty()) {
    std::string ids;
    for (const auto& m : missing) ids += (ids.empty() ? "" : ",") + m;
    throw ValidationError("no ground truth for participants: " + ids);
  }
  std::vector<std::string> pids;
  for (const auto& [pid, s] : agg) pids.push_back(pid);
  std::sort(pids.begin(), pids.end(), data::pid_less);
  EvalReport r;
  std::vector<double> p, t;
  for (const auto& pid : pids) {
    const auto& s = agg.at(pid);
    ParticipantRow row{pid, truth.at(pid), clamp_phq(s.mean), s.segments};
    p.push_back(row.predicted);
    t.push_back(row.truth);
    r.participants.push_back(std::move(row));
  }
  r.mae = mae(p, t);
  r.rmse = rmse(p, t);
  return r;
}

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline void write_report_csv(const EvalReport& r, const std::filesystem::path& path) {
  std::vector<csv::Row> rows{{"participant_id", "true_score", "predicted_mean", "segments"}};
  for (const auto& p : r.participants)
    rows.push_back({p.participant_id, fmt(p.truth), fmt(p.predicted), std::to_string(p.segments)});
  csv::write_file(path, rows);
}

inline std::string summary(const EvalReport& r) {
  std::ostringstream os;
  os << "participants: " << r.participants.size() << "\n"
     << "MAE:  " << fmt(r.mae) << "\n"
     << "RMSE: " << fmt(r.rmse) << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// prediction / truth files

/// participant_id,segment_index,score
inline void write_predictions(const std::filesystem::path& path, std::span<const data::ScoreRecord> recs,
                              std::span<const std::size_t> segment_index) {
  std::vector<csv::Row> rows{{"participant_id", "segment_index", "score"}};
  for (std::size_t i = 0; i < recs.size(); ++i) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", recs[i].score);
    rows.push_back({recs[i].participant_id, std::to_string(segment_index[i]), buf});
  }
  csv::write_file(path, rows);
}

inline std::vector<data::ScoreRecord> read_predictions(const std::filesystem::path& path) {
  const auto rows = csv::read_file(path);
  const std::string f = path.string();
  if (rows.empty()) throw FormatError(f + ": empty predictions file");
  const auto c_pid = csv::column(rows[0], "participant_id", f), c_score = csv::column(rows[0], "score", f);
  std::vector<data::ScoreRecord> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() == 1 && r[0].empty()) continue;
    if (r.size() < rows[0].size()) throw FormatError(f + ": row " + std::to_string(i + 1) + " is short");
    data::ScoreRecord rec{r[c_pid], 0.0};
    if (!data::parse_double(r[c_score], rec.score) || !std::isfinite(rec.score))
      throw FormatError(f + ": row " + std::to_string(i + 1) + " has a bad score '" + r[c_score] + "'");
    out.push_back(std::move(rec));
  }
  return out;
}

/// Truth from a split manifest, or from any CSV with participant_id and
/// phq8_score columns.
inline std::map<std::string, double> read_truth(const std::filesystem::path& path) {
  const auto rows = csv::read_file(path);
  const std::string f = path.string();
  if (rows.empty()) throw FormatError(f + ": empty truth file");
  const auto c_pid = csv::column(rows[0], "participant_id", f), c_score = csv::column(rows[0], "phq8_score", f);
  std::map<std::string, double> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() == 1 && r[0].empty()) continue;
    if (r.size() < rows[0].size()) throw FormatError(f + ": row " + std::to_string(i + 1) + " is short");
    double v = 0.0;
    if (!data::parse_double(r[c_score], v)) throw FormatError(f + ": row " + std::to_string(i + 1) + " bad score");
    out[std::string(data::trim(r[c_pid]))] = v;
  }
  return out;
}

// ---------------------------------------------------------------------------
// judge

/// Lines of the form "N. text" (leading whitespace allowed), in order.
inline std::vector<std::string> parse_numbered_questions(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    line = data::trim(line);
    std::size_t d = 0;
    while (d < line.size() && std::isdigit(static_cast<unsigned char>(line[d]))) ++d;
    if (d == 0 || d >= line.size() || line[d] != '.') continue;
    const auto body = data::trim(line.substr(d + 1));
    if (body.empty()) continue;
    out.emplace_back(body);
  }
  return out;
}

inline std::vector<std::string> generate_judge_questions(const kb::TextGenerator& gen, std::size_t n = 50,
                                                         std::uint64_t seed = kDefaultSeed) {
  kb::SamplingParams sp;
  sp.seed = substream_seed(seed, "judge_questions");
  auto qs = parse_numbered_questions(gen.generate(kb::render_judge_question_prompt(n), sp));
  if (qs.size() < n)
    throw ValidationError("question generator produced " + std::to_string(qs.size()) + " numbered questions, " +
                          std::to_string(n) + " required");
  qs.resize(n);
  return qs;
}

/// First integer in the reply, if it lies in 0-10.
inline std::optional<int> parse_rating(std::string_view reply) {
  for (std::size_t i = 0; i < reply.size(); ++i) {
    if (!std::isdigit(static_cast<unsigned char>(reply[i]))) continue;
    if (i > 0 && reply[i - 1] == '-') return std::nullopt;
    std::size_t j = i;
    while (j < reply.size() && std::isdigit(static_cast<unsigned char>(reply[j]))) ++j;
    if (j - i > 3) return std::nullopt;
    int v = 0;
    std::from_chars(reply.data() + i, reply.data() + j, v);
    if (v < 0 || v > 10) return std::nullopt;
    return v;
  }
  return std::nullopt;
}

struct NamedGenerator {
  std::string name;
  const kb::TextGenerator* generator = nullptr;
};

struct JudgeOptions {
  std::size_t samples_per_question = 2;
  int rating_retries = 3;
  double response_temperature = 0.8;
  double scorer_temperature = 0.0;
  int max_tokens = 256;
  unsigned max_concurrency = 1;
  std::uint64_t seed = kDefaultSeed;
};

struct SystemAnswer {
  std::vector<std::string> responses;
  std::vector<int> scores;
  int best = 0;
};

struct QuestionResult {
  std::string question;
  bool valid = true;
  std::vector<SystemAnswer> systems;  // aligned with JudgeReport::system_names
};

struct JudgeReport {
  std::vector<std::string> system_names;
  std::vector<QuestionResult> questions;
  std::vector<double> overall;  // mean of best scores over valid questions
  std::size_t invalid = 0;
};

inline QuestionResult judge_question(std::size_t qi, const std::string& question,
                                     const std::vector<NamedGenerator>& systems, const kb::TextGenerator& scorer,
                                     const JudgeOptions& opt) {
  QuestionResult qr;
  qr.question = question;
  for (std::size_t si = 0; si < systems.size(); ++si) {
    SystemAnswer a;
    for (std::size_t k = 0; k < opt.samples_per_question; ++k) {
      kb::SamplingParams rp{opt.max_tokens, opt.response_temperature,
                            substream_seed(opt.seed, "judge:" + systems[si].name, qi * 64 + k)};
      a.responses.push_back(systems[si].generator->generate(question, rp));
      const std::string prompt = kb::render_rating_prompt(question, a.responses.back());
      std::optional<int> score;
      for (int attempt = 0; attempt <= opt.rating_retries && !score; ++attempt) {
        kb::SamplingParams sp{16, opt.scorer_temperature,
                              substream_seed(opt.seed, "judge_score", (qi * 64 + k) * 8 + attempt)};
        score = parse_rating(scorer.generate(prompt, sp));
      }
      if (!score) {
        qr.valid = false;
        a.scores.push_back(-1);
      } else {
        a.scores.push_back(*score);
      }
    }
    a.best = a.scores.empty() ? 0 : *std::max_element(a.scores.begin(), a.scores.end());
    qr.systems.push_back(std::move(a));
  }
  return qr;
}

/// For each question and system: sample `samples_per_question` responses,
/// rate each, keep the best. A question with any rating that stays
/// unparseable after the retries is excluded for every system.
inline JudgeReport judge(const std::vector<NamedGenerator>& systems, const kb::TextGenerator& scorer,
                         const std::vector<std::string>& questions, const JudgeOptions& opt = {}) {
  if (systems.empty()) throw ContractError("judge needs at least one system");
  if (opt.samples_per_question == 0) throw ConfigError("judge.samples_per_question must be positive");
  JudgeReport rep;
  for (const auto& s : systems) rep.system_names.push_back(s.name);
  rep.questions.resize(questions.size());
  const std::size_t width = std::max(1u, opt.max_concurrency);
  for (std::size_t base = 0; base < questions.size(); base += width) {
    std::vector<std::future<QuestionResult>> futs;
    for (std::size_t i = base; i < std::min(questions.size(), base + width); ++i)
      futs.push_back(std::async(width > 1 ? std::launch::async : std::launch::deferred,
                                [&, i] { return judge_question(i, questions[i], systems, scorer, opt); }));
    for (std::size_t i = 0; i < futs.size(); ++i) rep.questions[base + i] = futs[i].get();
  }
  rep.overall.assign(systems.size(), 0.0);
  std::size_t valid = 0;
  for (const auto& q : rep.questions) {
    if (!q.valid) {
      ++rep.invalid;
      continue;
    }
    ++valid;
    for (std::size_t s = 0; s < systems.size(); ++s) rep.overall[s] += q.systems[s].best;
  }
  if (valid == 0) throw ValidationError("every judge question had an unparseable rating");
  for (auto& v : rep.overall) v /= static_cast<double>(valid);
  return rep;
}

inline void write_judge_csv(const JudgeReport& r, const std::filesystem::path& path) {
  csv::Row header{"question_index", "question", "valid", "system", "scores", "best"};
  std::vector<csv::Row> rows{header};
  for (std::size_t q = 0; q < r.questions.size(); ++q) {
    const auto& qr = r.questions[q];
    for (std::size_t s = 0; s < r.system_names.size(); ++s) {
      std::string scores;
      for (int v : qr.systems[s].scores) scores += (scores.empty() ? "" : ";") + std::to_string(v);
      rows.push_back({std::to_string(q + 1), qr.question, qr.valid ? "1" : "0", r.system_names[s], scores,
                      std::to_string(qr.systems[s].best)});
    }
  }
  csv::write_file(path, rows);
}

inline std::string judge_summary(const JudgeReport& r) {
  std::ostringstream os;
  os << "questions: " << r.questions.size() << " (invalid: " << r.invalid << ")\n";
  for (std::size_t s = 0; s < r.system_names.size(); ++s) os << r.system_names[s] << ": " << fmt(r.overall[s]) << "\n";
  return os.str();
}

}  // namespace phqfuse::eval
