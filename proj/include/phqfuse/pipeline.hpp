#pragma once

// Glue between preprocessed splits on disk and the trainer, plus a complete
// seeded run over a synthetic corpus.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "phqfuse/audio.hpp"
#include "phqfuse/data.hpp"
#include "phqfuse/eval.hpp"
#include "phqfuse/fixtures.hpp"
#include "phqfuse/generators.hpp"
#include "phqfuse/knowledge.hpp"
#include "phqfuse/trainer.hpp"

namespace phqfuse {

/// Labelled segments of one split. Audio features come from the frozen
/// encoder of `state` and are only computed when `with_audio` is set.
inline std::vector<PhqExample> load_split(const PipelineState& state, const std::filesystem::path& prep_dir,
                                          const std::string& split, bool with_audio) {
  const auto rows = data::read_segments_csv(prep_dir / split / "segments.csv");
  std::vector<PhqExample> out;
  out.reserve(rows.size());
  for (const auto& r : rows) {
    std::optional<audio::AudioFeatures> feats;
    if (with_audio) {
      audio::Waveform w = audio::read_wav(data::segment_wav_path(prep_dir, split, r));
      w.participant_id = r.participant_id;
      feats = state.encoder.extract(w);
    }
    out.push_back(make_phq_example(r.participant_id, r.segment_index, r.text, std::move(feats),
                                   static_cast<float>(r.phq8)));
  }
  return out;
}

inline std::vector<data::ScoreRecord> to_records(const std::vector<SegmentPrediction>& preds) {
  std::vector<data::ScoreRecord> out;
  for (const auto& p : preds) out.push_back({p.participant_id, p.score});
  return out;
}

inline void write_segment_predictions(const std::filesystem::path& path, const std::vector<SegmentPrediction>& preds) {
  std::vector<std::size_t> idx;
  for (const auto& p : preds) idx.push_back(p.segment_index);
  eval::write_predictions(path, to_records(preds), idx);
}

struct PipelineRunOptions {
  std::size_t participants = 10;
  std::size_t utterances = 10;
  std::uint64_t seed = kDefaultSeed;
  ModelConfig model = [] {
    ModelConfig m;
    m.d_model = 32;
    m.n_layers = 2;
    m.n_heads = 2;
    m.d_ff = 88;
    return m;
  }();
  std::size_t inject_steps = 4;
  std::size_t phase_steps = 4;
  std::size_t batch_size = 2;
};

/// fixtures -> prep -> Q&A corpus -> inject -> text -> audio -> predict ->
/// eval, all under `work`. Returns the evaluation on the test split.
inline eval::EvalReport run_pipeline(const std::filesystem::path& work, const PipelineRunOptions& opt) {
  namespace fs = std::filesystem;
  fixtures::FixtureOptions fo;
  fo.participants = opt.participants;
  fo.utterances = opt.utterances;
  fo.seed = opt.seed;
  fo.kb_entries = 2;
  const auto corpus = fixtures::make_corpus(fo);
  fixtures::write_corpus(corpus, work / "data");
  data::run_prep(work / "data", work / "prep");

  kb::FixtureGenerator gen;
  kb::CorpusOptions co;
  co.sampling.seed = opt.seed;
  const auto entries = kb::filter_entries(kb::read_knowledge_dump(work / "data" / "kb.jsonl"), kb::default_keywords());
  const auto qa = kb::generate_corpus(entries, gen, co);
  kb::write_corpus(work / "qa.jsonl", qa.pairs);

  PipelineState state = PipelineState::init(opt.model, LoraConfig{}, opt.seed);
  std::vector<LossEntry> log;
  auto run = [&](Phase phase, const TrainData& data, std::size_t steps) {
    TrainConfig tc;
    tc.phase = phase;
    tc.max_steps = steps;
    tc.batch_size = opt.batch_size;
    tc.seed = opt.seed;
    auto res = train_phase(tc, data, state);
    log.insert(log.end(), res.log.begin(), res.log.end());
  };
  TrainData lm;
  lm.lm = kb::build_injection_examples(kb::read_corpus(work / "qa.jsonl"), opt.model.max_seq_len).examples;
  run(Phase::kInject, lm, opt.inject_steps);
  save_checkpoint(state, work / "inject.phqf");

  TrainData text;
  text.phq = load_split(state, work / "prep", "train", true);
  run(Phase::kText, text, opt.phase_steps);
  save_checkpoint(state, work / "text.phqf");
  run(Phase::kAudio, text, opt.phase_steps);
  save_checkpoint(state, work / "audio.phqf");
  write_loss_log(work / "loss.csv", log);

  const auto test = load_split(state, work / "prep", "test", true);
  const auto preds = predict_segments(state, test, FusionMode::kAudioOnly);
  write_segment_predictions(work / "predictions.csv", preds);
  std::map<std::string, double> truth;
  for (const auto& e : corpus.manifest.entries) truth[e.participant_id] = e.phq8_score;
  const auto recs = to_records(preds);
  auto report = eval::evaluate(recs, truth);
  eval::write_report_csv(report, work / "eval.csv");
  return report;
}

}  // namespace phqfuse
