#pragma once

// Seeded synthetic interview corpus laid out like the real one:
//   <out>/split_manifest.csv
//   <out>/<pid>_P/<pid>_TRANSCRIPT.csv, <pid>_AUDIO.wav
//   <out>/kb.jsonl
// Participant speech is a short tone whose pitch rises with the PHQ-8 score,
// so audio carries a learnable signal.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "phqfuse/audio.hpp"
#include "phqfuse/data.hpp"
#include "phqfuse/knowledge.hpp"
#include "phqfuse/rng.hpp"

namespace phqfuse::fixtures {

struct FixtureOptions {
  std::size_t participants = 10;
  std::uint64_t seed = kDefaultSeed;
  std::size_t utterances = 0;  // participant utterances per session; 0 draws 8-20
  std::size_t kb_entries = 8;
};

struct Session {
  std::string participant_id;
  int phq8 = 0;
  std::vector<data::Utterance> transcript;
  audio::Waveform audio;
};

struct Corpus {
  data::SplitManifest manifest;
  std::vector<Session> sessions;
  std::vector<kb::KnowledgeEntry> knowledge;
};

/// Split sizes in proportion 107:35:47, each split non-empty when n >= 3.
inline std::array<std::size_t, 3> split_sizes(std::size_t n) {
  const double w[3] = {107.0, 35.0, 47.0};
  std::array<std::size_t, 3> out{};
  std::size_t used = 0;
  for (int i = 0; i < 3; ++i) {
    out[i] = static_cast<std::size_t>(std::floor(static_cast<double>(n) * w[i] / 189.0));
    if (n >= 3 && out[i] == 0) out[i] = 1;
    used += out[i];
  }
  while (used > n) {
    --out[0];
    --used;
  }
  for (int i = 0; used < n; i = (i + 1) % 3) {
    ++out[i];
    ++used;
  }
  return out;
}

inline float tone_hz(int phq8) { return 180.0f + 25.0f * static_cast<float>(phq8); }

inline Session make_session(const std::string& pid, int phq8, std::size_t n_part, Rng& rng) {
  static const char* kEllie[] = {"how are you doing today", "tell me more", "how have you been sleeping",
                                 "what do you do to relax", "i see"};
  static const char* kLow[] = {"fine", "good", "busy week", "went hiking", "slept well", "work is ok"};
  static const char* kHigh[] = {"tired", "not great", "cannot sleep", "feel down", "no energy", "alone a lot"};
  Session s;
  s.participant_id = pid;
  s.phq8 = phq8;
  std::uniform_int_distribution<int> dur_ms(20, 50), gap_ms(5, 15), pick(0, 5), ellie(0, 4);
  std::bernoulli_distribution high(static_cast<double>(phq8) / 24.0);
  long t_ms = 10;
  std::vector<std::pair<long, long>> speech;
  for (std::size_t i = 0; i < n_part; ++i) {
    data::Utterance q;
    q.speaker = data::Speaker::kInterviewer;
    q.start_time = t_ms / 1000.0;
    t_ms += dur_ms(rng);
    q.stop_time = t_ms / 1000.0;
    q.text = kEllie[ellie(rng)];
    s.transcript.push_back(q);
    t_ms += gap_ms(rng);

    data::Utterance a;
    a.speaker = data::Speaker::kParticipant;
    a.start_time = t_ms / 1000.0;
    const long start = t_ms;
    t_ms += dur_ms(rng);
    a.stop_time = t_ms / 1000.0;
    a.text = high(rng) ? kHigh[pick(rng)] : kLow[pick(rng)];
    speech.emplace_back(start, t_ms);
    s.transcript.push_back(a);
    t_ms += gap_ms(rng);
  }
  t_ms += 10;

  s.audio.participant_id = pid;
  s.audio.samples.assign(static_cast<std::size_t>(t_ms) * audio::kSampleRate / 1000, 0.0f);
  std::normal_distribution<float> noise(0.0f, 0.01f);
  for (auto& v : s.audio.samples) v = noise(rng);
  const float f = tone_hz(phq8);
  for (auto [a, b] : speech) {
    const std::size_t i0 = data::to_sample(a / 1000.0), i1 = data::to_sample(b / 1000.0);
    for (std::size_t i = i0; i < i1; ++i)
      s.audio.samples[i] += 0.4f * std::sin(2.0f * std::numbers::pi_v<float> * f * static_cast<float>(i - i0) /
                                            static_cast<float>(audio::kSampleRate));
  }
  return s;
}

inline std::vector<kb::KnowledgeEntry> make_knowledge(std::size_t n, Rng& rng) {
  static const char* kTitles[] = {"Major depressive disorder", "Generalized anxiety disorder", "Mood disorder",
                                  "Chronic stress",            "Social isolation",             "Photosynthesis",
                                  "Depression (economics)",    "Sleep hygiene"};
  static const char* kSentences[] = {
      "It is characterised by persistent low mood and loss of interest.",
      "Symptoms often include changes in sleep, appetite and energy.",
      "Clinicians use structured questionnaires to assess severity.",
      "Prolonged exposure can affect both physical and mental health.",
      "Support from family and friends is a known protective factor."};
  std::uniform_int_distribution<int> s(0, 4);
  std::vector<kb::KnowledgeEntry> out;
  for (std::size_t i = 0; i < n; ++i) {
    kb::KnowledgeEntry e;
    e.source_id = "src" + std::to_string(i);
    e.title = kTitles[i % 8];
    e.paragraph = e.title + ". " + kSentences[s(rng)] + " " + kSentences[s(rng)];
    out.push_back(std::move(e));
  }
  return out;
}

inline Corpus make_corpus(const FixtureOptions& opt) {
  Corpus c;
  Rng rng = make_rng(opt.seed, "fixtures");
  const auto sizes = split_sizes(opt.participants);
  std::uniform_int_distribution<int> score(0, 24), count(8, 20);
  for (std::size_t i = 0; i < opt.participants; ++i) {
    const std::string pid = std::to_string(300 + i);
    const char* split = i < sizes[0] ? "train" : i < sizes[0] + sizes[1] ? "dev" : "test";
    const int phq = score(rng);
    c.manifest.entries.push_back({pid, split, phq >= 10 ? 1 : 0, phq});
    const std::size_t n = opt.utterances ? opt.utterances : static_cast<std::size_t>(count(rng));
    c.sessions.push_back(make_session(pid, phq, n, rng));
  }
  c.knowledge = make_knowledge(opt.kb_entries, rng);
  return c;
}

inline void write_corpus(const Corpus& c, const std::filesystem::path& out) {
  std::filesystem::create_directories(out);
  data::write_manifest(c.manifest, out / "split_manifest.csv");
  for (const auto& s : c.sessions) {
    const auto dir = data::session_dir(out, s.participant_id);
    std::filesystem::create_directories(dir);
    std::ofstream t(dir / (s.participant_id + "_TRANSCRIPT.csv"), std::ios::binary | std::ios::trunc);
    if (!t) throw IoError("cannot write transcript for " + s.participant_id);
    t << data::format_transcript(s.transcript);
    audio::write_wav(s.audio, dir / (s.participant_id + "_AUDIO.wav"));
  }
  kb::write_knowledge_dump(out / "kb.jsonl", c.knowledge);
}

}  // namespace phqfuse::fixtures
