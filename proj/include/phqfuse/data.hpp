#pragma once

// Interview-corpus preprocessing: transcript parsing, participant filtering,
// five-utterance segmentation, timestamped audio slicing, segment CSV output
// and per-participant score aggregation.
//
// Corpus layout read by run_prep():
//   <data>/split_manifest.csv              participant_id,split,phq8_binary,phq8_score
//   <data>/<pid>_P/<pid>_TRANSCRIPT.csv    tab separated: start_time stop_time speaker value
//   <data>/<pid>_P/<pid>_AUDIO.wav         PCM16 mono 16 kHz
// Output:
//   <out>/<split>/segments.csv             participant_id,segment_index,text,phq8
//   <out>/<split>/wav/<pid>_<index>.wav

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <future>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "phqfuse/audio.hpp"
#include "phqfuse/csv.hpp"
#include "phqfuse/error.hpp"
#include "phqfuse/fusion.hpp"

namespace phqfuse::data {

inline constexpr std::size_t kUtterancesPerSegment = 5;

enum class Speaker { kInterviewer, kParticipant };

struct Utterance {
  double start_time = 0.0;
  double stop_time = 0.0;
  Speaker speaker = Speaker::kParticipant;
  std::string text;
};

struct Segment {
  std::string participant_id;
  std::size_t segment_index = 0;
  std::vector<Utterance> utterances;
  std::string text;
  audio::Waveform waveform;
  int phq8 = 0;
};

struct SegmentRow {
  std::string participant_id;
  std::size_t segment_index = 0;
  std::string text;
  int phq8 = 0;

  bool operator==(const SegmentRow&) const = default;
};

struct ManifestEntry {
  std::string participant_id;
  std::string split;
  int phq8_binary = 0;
  int phq8_score = 0;
};

struct SplitManifest {
  std::vector<ManifestEntry> entries;

  std::vector<std::string> participants(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (e.split == split) out.push_back(e.participant_id);
    return out;
  }
  const ManifestEntry* find(const std::string& pid) const {
    for (const auto& e : entries)
      if (e.participant_id == pid) return &e;
    return nullptr;
  }
};

// ---------------------------------------------------------------------------
// helpers

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::string lower(std::string_view s) {
  std::string o(s);
  for (auto& c : o) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return o;
}

inline bool parse_double(std::string_view s, double& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(out);
}

inline bool parse_int(std::string_view s, int& out) {
  s = trim(s);
  if (s.empty()) return false;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

/// Participant ids in natural order (shorter numeric strings first).
inline bool pid_less(const std::string& a, const std::string& b) {
  return a.size() != b.size() ? a.size() < b.size() : a < b;
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto p = line.find('\t', start);
    out.push_back(line.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

// ---------------------------------------------------------------------------
// transcript

inline Speaker parse_speaker(std::string_view raw, std::size_t line, const std::string& file) {
  const std::string s = lower(trim(raw));
  if (s == "participant") return Speaker::kParticipant;
  if (s == "ellie" || s == "interviewer") return Speaker::kInterviewer;
  throw ParseError(file + ":" + std::to_string(line) + ": unknown speaker '" + std::string(raw) + "'");
}

/// Tab-separated transcript with header start_time, stop_time, speaker, value.
inline std::vector<Utterance> parse_transcript(std::string_view content, const std::string& file = "transcript") {
  std::vector<Utterance> out;
  std::size_t line_no = 0, pos = 0;
  std::size_t c_start = 0, c_stop = 0, c_speaker = 0, c_value = 0, ncols = 0;
  bool have_header = false;
  while (pos <= content.size()) {
    auto nl = content.find('\n', pos);
    if (nl == std::string_view::npos) nl = content.size();
    std::string_view line = content.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) {
      if (nl == content.size()) break;
      continue;
    }
    auto cols = split_tabs(line);
    if (!have_header) {
      auto find = [&](std::string_view name) {
        for (std::size_t i = 0; i < cols.size(); ++i)
          if (lower(trim(cols[i])) == name) return i;
        throw ParseError(file + ":" + std::to_string(line_no) + ": missing column '" + std::string(name) + "'");
      };
      c_start = find("start_time");
      c_stop = find("stop_time");
      c_speaker = find("speaker");
      c_value = find("value");
      ncols = cols.size();
      have_header = true;
      continue;
    }
    const std::string where = file + ":" + std::to_string(line_no);
    if (cols.size() < ncols)
      throw ParseError(where + ": expected " + std::to_string(ncols) + " columns, got " + std::to_string(cols.size()));
    Utterance u;
    if (!parse_double(cols[c_start], u.start_time)) throw ParseError(where + ": non-numeric start_time");
    if (!parse_double(cols[c_stop], u.stop_time)) throw ParseError(where + ": non-numeric stop_time");
    if (!(u.stop_time > u.start_time)) throw ParseError(where + ": stop_time must be greater than start_time");
    u.speaker = parse_speaker(cols[c_speaker], line_no, file);
    u.text = std::string(trim(cols[c_value]));
    if (u.text.empty()) throw ParseError(where + ": empty utterance text");
    out.push_back(std::move(u));
  }
  if (!have_header) throw ParseError(file + ": missing header row");
  return out;
}

inline std::vector<Utterance> read_transcript(const std::filesystem::path& path) {
  return parse_transcript(csv::read_text(path), path.string());
}

inline std::string format_transcript(std::span<const Utterance> utts) {
  std::string out = "start_time\tstop_time\tspeaker\tvalue\n";
  char buf[64];
  for (const auto& u : utts) {
    std::snprintf(buf, sizeof buf, "%.3f\t%.3f\t", u.start_time, u.stop_time);
    out += buf;
    out += u.speaker == Speaker::kParticipant ? "Participant" : "Ellie";
    out += '\t';
    out += u.text;
    out += '\n';
  }
  return out;
}

inline std::vector<Utterance> filter_participant(std::span<const Utterance> utts) {
  std::vector<Utterance> out;
  std::copy_if(utts.begin(), utts.end(), std::back_inserter(out),
               [](const Utterance& u) { return u.speaker == Speaker::kParticipant; });
  return out;
}

/// Consecutive groups of five; a trailing remainder of 1-4 becomes a shorter group.
inline std::vector<std::vector<Utterance>> chunk_five(std::span<const Utterance> utts) {
  std::vector<std::vector<Utterance>> groups;
  for (std::size_t i = 0; i < utts.size(); i += kUtterancesPerSegment) {
    const std::size_t n = std::min(kUtterancesPerSegment, utts.size() - i);
    groups.emplace_back(utts.begin() + i, utts.begin() + i + n);
  }
  return groups;
}

inline std::string merge_text(std::span<const Utterance> utts) {
  std::string s;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    if (i) s += ' ';
    s += utts[i].text;
  }
  return s;
}

/// Seconds to sample index, rounding half up.
inline std::size_t to_sample(double seconds) {
  return static_cast<std::size_t>(std::floor(seconds * audio::kSampleRate + 0.5));
}

inline audio::Waveform slice_audio(const audio::Waveform& session, std::span<const Utterance> utts) {
  audio::Waveform out;
  out.sample_rate = session.sample_rate;
  out.participant_id = session.participant_id;
  for (std::size_t i = 0; i < utts.size(); ++i) {
    const std::size_t a = to_sample(utts[i].start_time), b = to_sample(utts[i].stop_time);
    if (b > session.samples.size()) {
      char msg[160];
      std::snprintf(msg, sizeof msg, "utterance %zu [%.3f, %.3f)s ends past session end (%zu samples)", i,
                    utts[i].start_time, utts[i].stop_time, session.samples.size());
      throw BoundsError(msg);
    }
    out.samples.insert(out.samples.end(), session.samples.begin() + a, session.samples.begin() + b);
  }
  return out;
}

/// Segments for one participant session. The waveform is sliced only when
/// `session` is given.
inline std::vector<Segment> make_segments(const std::string& pid, int phq8, std::span<const Utterance> transcript,
                                          const audio::Waveform* session) {
  const auto part = filter_participant(transcript);
  std::vector<Segment> out;
  std::size_t idx = 0;
  for (auto& group : chunk_five(part)) {
    Segment s;
    s.participant_id = pid;
    s.segment_index = idx++;
    s.text = merge_text(group);
    s.phq8 = phq8;
    if (session) s.waveform = slice_audio(*session, group);
    s.utterances = std::move(group);
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// segment CSV

inline const csv::Row& segments_header() {
  static const csv::Row h{"participant_id", "segment_index", "text", "phq8"};
  return h;
}

inline std::size_t emit_segments_csv(std::span<const Segment> segments, const std::filesystem::path& path) {
  std::vector<csv::Row> rows{segments_header()};
  for (const auto& s : segments)
    rows.push_back({s.participant_id, std::to_string(s.segment_index), s.text, std::to_string(s.phq8)});
  csv::write_file(path, rows);
  return segments.size();
}

inline std::vector<SegmentRow> parse_segments_csv(std::string_view text, const std::string& file = "segments.csv") {
  auto rows = csv::parse(text);
  if (rows.empty() || rows[0] != segments_header()) throw FormatError(file + ": unexpected header");
  std::vector<SegmentRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() != 4) throw FormatError(file + ": row " + std::to_string(i + 1) + " has " + std::to_string(r.size()) + " fields");
    SegmentRow s;
    s.participant_id = r[0];
    int idx = 0;
    if (!parse_int(r[1], idx) || idx < 0 || !parse_int(r[3], s.phq8))
      throw FormatError(file + ": row " + std::to_string(i + 1) + " has a non-integer field");
    s.segment_index = static_cast<std::size_t>(idx);
    s.text = r[2];
    out.push_back(std::move(s));
  }
  return out;
}

inline std::vector<SegmentRow> read_segments_csv(const std::filesystem::path& path) {
  return parse_segments_csv(csv::read_text(path), path.string());
}

// ---------------------------------------------------------------------------
// aggregation

struct ScoreRecord {
  std::string participant_id;
  double score = 0.0;
};

struct ParticipantScore {
  double mean = 0.0;
  std::size_t segments = 0;
};

/// Arithmetic mean of segment scores per participant (unclamped; clamp with
/// clamp_phq() when reporting).
inline std::map<std::string, ParticipantScore> aggregate_scores(std::span<const ScoreRecord> records) {
  std::map<std::string, std::pair<double, std::size_t>> acc;
  for (const auto& r : records) {
    auto& [s, n] = acc[r.participant_id];
    s += r.score;
    ++n;
  }
  std::map<std::string, ParticipantScore> out;
  for (const auto& [pid, sn] : acc) out[pid] = {sn.first / static_cast<double>(sn.second), sn.second};
  return out;
}

// ---------------------------------------------------------------------------
// manifest

inline SplitManifest read_manifest(const std::filesystem::path& path) {
  auto rows = csv::read_file(path);
  if (rows.empty()) throw FormatError(path.string() + ": empty manifest");
  const auto& h = rows[0];
  const std::string f = path.string();
  const auto c_pid = csv::column(h, "participant_id", f), c_split = csv::column(h, "split", f),
             c_bin = csv::column(h, "phq8_binary", f), c_score = csv::column(h, "phq8_score", f);
  SplitManifest m;
  std::set<std::string> seen;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (r.size() == 1 && r[0].empty()) continue;
    if (r.size() < h.size()) throw FormatError(f + ": row " + std::to_string(i + 1) + " is short");
    ManifestEntry e;
    e.participant_id = std::string(trim(r[c_pid]));
    e.split = lower(trim(r[c_split]));
    if (!parse_int(r[c_bin], e.phq8_binary) || !parse_int(r[c_score], e.phq8_score))
      throw FormatError(f + ": row " + std::to_string(i + 1) + " has a non-integer score");
    if (e.phq8_score < 0 || e.phq8_score > 24)
      throw FormatError(f + ": row " + std::to_string(i + 1) + " phq8_score outside 0-24");
    if (e.split != "train" && e.split != "dev" && e.split != "test")
      throw FormatError(f + ": row " + std::to_string(i + 1) + " unknown split '" + e.split + "'");
    if (!seen.insert(e.participant_id).second)
      throw FormatError(f + ": participant " + e.participant_id + " listed more than once");
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline void write_manifest(const SplitManifest& m, const std::filesystem::path& path) {
  std::vector<csv::Row> rows{{"participant_id", "split", "phq8_binary", "phq8_score"}};
  for (const auto& e : m.entries)
    rows.push_back({e.participant_id, e.split, std::to_string(e.phq8_binary), std::to_string(e.phq8_score)});
  csv::write_file(path, rows);
}

// ---------------------------------------------------------------------------
// end-to-end preprocessing

inline std::filesystem::path session_dir(const std::filesystem::path& data, const std::string& pid) {
  return data / (pid + "_P");
}

struct PrepReport {
  std::map<std::string, std::size_t> segments_per_split;
  std::map<std::string, std::size_t> participants_per_split;
  std::size_t total_segments = 0;
};

struct PrepOptions {
  unsigned threads = 1;
  bool write_wavs = true;
};

/// Runs preprocessing for every participant in the manifest. Sessions are
/// processed on up to `threads` workers and merged in participant-id order.
inline PrepReport run_prep(const std::filesystem::path& data_dir, const std::filesystem::path& out_dir,
                           const PrepOptions& opt = {}) {
  const auto manifest = read_manifest(data_dir / "split_manifest.csv");
  PrepReport report;
  for (const std::string split : {"train", "dev", "test"}) {
    auto pids = manifest.participants(split);
    std::sort(pids.begin(), pids.end(), pid_less);
    report.participants_per_split[split] = pids.size();

    auto process = [&](const std::string& pid) {
      const auto* e = manifest.find(pid);
      const auto dir = session_dir(data_dir, pid);
      auto transcript = read_transcript(dir / (pid + "_TRANSCRIPT.csv"));
      audio::Waveform wav = audio::read_wav(dir / (pid + "_AUDIO.wav"));
      wav.participant_id = pid;
      return make_segments(pid, e->phq8_score, transcript, &wav);
    };

    std::vector<std::vector<Segment>> per(pids.size());
    const std::size_t workers = std::max(1u, opt.threads);
    for (std::size_t base = 0; base < pids.size(); base += workers) {
      std::vector<std::future<std::vector<Segment>>> futs;
      for (std::size_t i = base; i < std::min(pids.size(), base + workers); ++i)
        futs.push_back(std::async(workers > 1 ? std::launch::async : std::launch::deferred, process, pids[i]));
      for (std::size_t i = 0; i < futs.size(); ++i) per[base + i] = futs[i].get();
    }

    std::vector<Segment> all;
    for (auto& v : per)
      for (auto& s : v) all.push_back(std::move(s));
    const auto split_dir = out_dir / split;
    emit_segments_csv(all, split_dir / "segments.csv");
    if (opt.write_wavs) {
      for (const auto& s : all) {
        audio::write_wav(s.waveform,
                         split_dir / "wav" / (s.participant_id + "_" + std::to_string(s.segment_index) + ".wav"));
      }
    }
    report.segments_per_split[split] = all.size();
    report.total_segments += all.size();
  }
  return report;
}

inline std::filesystem::path segment_wav_path(const std::filesystem::path& prep_dir, const std::string& split,
                                              const SegmentRow& row) {
  return prep_dir / split / "wav" / (row.participant_id + "_" + std::to_string(row.segment_index) + ".wav");
}

}  // namespace phqfuse::data
