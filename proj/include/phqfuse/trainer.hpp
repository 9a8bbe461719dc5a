#pragma once

// Training orchestration for the supervised phases and the checkpoint format.
//
// Phases run in the order inject -> text -> audio, each resuming from the
// previous checkpoint. "pretrain" is full-parameter language-model training of
// the micro decoder itself, standing in for a pretrained base model; every
// other phase keeps the base weights frozen.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "phqfuse/audio.hpp"
#include "phqfuse/error.hpp"
#include "phqfuse/fusion.hpp"
#include "phqfuse/knowledge.hpp"
#include "phqfuse/lora.hpp"
#include "phqfuse/model.hpp"
#include "phqfuse/optim.hpp"
#include "phqfuse/rng.hpp"
#include "phqfuse/tensor_io.hpp"
#include "phqfuse/text_codec.hpp"

namespace phqfuse {

enum class Phase { kPretrain, kInject, kText, kAudio, kTextAndAudio };

inline Phase parse_phase(const std::string& s) {
  if (s == "pretrain") return Phase::kPretrain;
  if (s == "inject") return Phase::kInject;
  if (s == "text") return Phase::kText;
  if (s == "audio") return Phase::kAudio;
  if (s == "text_and_audio") return Phase::kTextAndAudio;
  throw ConfigError("unknown phase '" + s + "' (expected pretrain, inject, text, audio or text_and_audio)");
}

inline std::string to_string(Phase p) {
  switch (p) {
    case Phase::kPretrain: return "pretrain";
    case Phase::kInject: return "inject";
    case Phase::kText: return "text";
    case Phase::kAudio: return "audio";
    case Phase::kTextAndAudio: return "text_and_audio";
  }
  return "?";
}

inline bool is_lm_phase(Phase p) { return p == Phase::kPretrain || p == Phase::kInject; }

inline FusionMode fusion_mode_for(Phase p) {
  switch (p) {
    case Phase::kText: return FusionMode::kTextOnly;
    case Phase::kAudio: return FusionMode::kAudioOnly;
    case Phase::kTextAndAudio: return FusionMode::kTextAndAudio;
    default: throw ContractError("phase " + to_string(p) + " does not predict PHQ scores");
  }
}

inline std::string render_text_prompt(std::string_view transcript) {
  return "Transcripts:" + std::string(transcript) + ", PHQ Score:";
}

struct TrainConfig {
  Phase phase = Phase::kInject;
  float learning_rate = 1e-3f;
  std::size_t batch_size = 8;
  std::size_t max_steps = 200;
  std::uint64_t seed = kDefaultSeed;
  std::filesystem::path abort_checkpoint;  // written when a step hits NaN/Inf
  float stop_below = 0.0f;  // end early once a step's loss drops below this; 0 disables
};

/// Everything a checkpoint holds.
struct PipelineState {
  ModelConfig model_config;
  LoraConfig lora_config;
  std::uint64_t seed = kDefaultSeed;
  std::vector<std::string> phases_done;

  Transformer model;
  audio::AudioEncoder encoder;
  AdapterSet adapters;
  Projector projector;
  RegressionHead head;

  static PipelineState init(const ModelConfig& mc, const LoraConfig& lc, std::uint64_t seed) {
    mc.validate();
    lc.validate();
    PipelineState s;
    s.model_config = mc;
    s.lora_config = lc;
    s.seed = seed;
    s.model = Transformer::init(mc, seed);
    s.encoder = audio::AudioEncoder::init(audio::EncoderConfig{}, seed);
    s.adapters = AdapterSet::create(mc.n_layers, mc.d_model, lc, seed);
    s.projector = Projector::init(s.encoder.config().feature_dim(), mc.d_model, seed);
    s.head = RegressionHead::init(mc.d_model, seed);
    return s;
  }

  /// All tensors sorted by name.
  std::vector<NamedTensor> all_tensors() const {
    std::vector<NamedTensor> all = model.named_parameters();
    for (auto&& v : {encoder.named_parameters(), adapters.named_parameters(), projector.named_parameters(),
                     head.named_parameters()})
      all.insert(all.end(), v.begin(), v.end());
    std::sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.name < b.name; });
    return all;
  }

  Tensor* tensor(const std::string& name) {
    if (Tensor* t = model.parameter(name)) return t;
    if (Tensor* t = encoder.parameter(name)) return t;
    if (Tensor* t = projector.parameter(name)) return t;
    if (Tensor* t = head.parameter(name)) return t;
    for (auto& [key, ad] : adapters.adapters()) {
      if (name == key + ".lora_A") return &ad.A;
      if (name == key + ".lora_B") return &ad.B;
    }
    return nullptr;
  }
};

/// Tensors the optimiser updates in a phase: adapter A/B for every LoRA
/// phase, plus the regression head (text) or projector and head (audio).
/// Pretraining updates the base decoder only.
inline std::vector<NamedTensor> trainable_parameters(const PipelineState& s, Phase phase) {
  std::vector<NamedTensor> out;
  if (phase == Phase::kPretrain) return s.model.named_parameters();
  out = s.adapters.named_parameters();
  if (phase == Phase::kAudio || phase == Phase::kTextAndAudio) {
    auto p = s.projector.named_parameters();
    out.insert(out.end(), p.begin(), p.end());
  }
  if (!is_lm_phase(phase)) {
    auto h = s.head.named_parameters();
    out.insert(out.end(), h.begin(), h.end());
  }
  return out;
}

inline std::size_t parameter_count(const std::vector<NamedTensor>& ts) {
  std::size_t n = 0;
  for (const auto& t : ts) n += t.tensor.numel();
  return n;
}

// ---------------------------------------------------------------------------
// checkpoints

inline nlohmann::json config_json(const PipelineState& s) {
  const auto& m = s.model_config;
  const auto& l = s.lora_config;
  return {{"format", "phqfuse-checkpoint"},
          {"seed", s.seed},
          {"phases", s.phases_done},
          {"model",
           {{"d_model", m.d_model},
            {"n_layers", m.n_layers},
            {"n_heads", m.n_heads},
            {"d_ff", m.d_ff},
            {"vocab_size", m.vocab_size},
            {"max_seq_len", m.max_seq_len},
            {"rope_theta", m.rope_theta},
            {"rms_eps", m.rms_eps}}},
          {"lora", {{"r", l.r}, {"alpha", l.alpha}, {"dropout", l.dropout}, {"targets", l.targets}}}};
}

inline std::vector<std::uint8_t> serialize_checkpoint(const PipelineState& s) {
  io::TensorFile f;
  f.config_json = config_json(s).dump();
  for (const auto& t : s.all_tensors()) f.tensors.push_back({t.name, t.tensor.detach()});
  return io::serialize(f);
}

inline void save_checkpoint(const PipelineState& s, const std::filesystem::path& path) {
  io::write_bytes(path, serialize_checkpoint(s));
}

inline PipelineState checkpoint_from_file(const io::TensorFile& f) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f.config_json);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config is not JSON: ") + e.what());
  }
  ModelConfig mc;
  LoraConfig lc;
  std::uint64_t seed = kDefaultSeed;
  std::vector<std::string> phases;
  try {
    const auto& m = j.at("model");
    mc.d_model = m.at("d_model");
    mc.n_layers = m.at("n_layers");
    mc.n_heads = m.at("n_heads");
    mc.d_ff = m.at("d_ff");
    mc.vocab_size = m.at("vocab_size");
    mc.max_seq_len = m.at("max_seq_len");
    mc.rope_theta = m.at("rope_theta");
    mc.rms_eps = m.at("rms_eps");
    const auto& l = j.at("lora");
    lc.r = l.at("r");
    lc.alpha = l.at("alpha");
    lc.dropout = l.at("dropout");
    lc.targets = l.at("targets").get<std::vector<std::string>>();
    seed = j.at("seed");
    phases = j.at("phases").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config incomplete: ") + e.what());
  }
  PipelineState s = PipelineState::init(mc, lc, seed);
  s.phases_done = std::move(phases);
  std::size_t expected = s.all_tensors().size();
  if (f.tensors.size() != expected)
    throw FormatError("checkpoint holds " + std::to_string(f.tensors.size()) + " tensors, expected " +
                      std::to_string(expected));
  for (const auto& [name, t] : f.tensors) {
    Tensor* dst = s.tensor(name);
    if (!dst) throw FormatError("checkpoint has unexpected tensor '" + name + "'");
    if (dst->shape() != t.shape())
      throw FormatError("tensor '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                        shape_str(dst->shape()));
    auto out = dst->mutable_data();
    std::copy(t.data().begin(), t.data().end(), out.begin());
  }
  return s;
}

inline PipelineState load_checkpoint(const std::filesystem::path& path) {
  return checkpoint_from_file(io::load(path));
}

// ---------------------------------------------------------------------------
// datasets

struct PhqExample {
  std::string participant_id;
  std::size_t segment_index = 0;
  std::vector<int> text_ids;  // encoded prompt, without BOS
  std::optional<audio::AudioFeatures> features;
  float label = 0.0f;
};

inline PhqExample make_phq_example(const std::string& pid, std::size_t index, std::string_view transcript,
                                   std::optional<audio::AudioFeatures> features, float label) {
  PhqExample ex;
  ex.participant_id = pid;
  ex.segment_index = index;
  ex.text_ids = text::encode(render_text_prompt(transcript));
  if (features) ex.features = audio::AudioFeatures{features->values.detach()};
  ex.label = label;
  return ex;
}

struct TrainData {
  std::vector<kb::LmExample> lm;
  std::vector<PhqExample> phq;
};

struct LossEntry {
  std::size_t step = 0;
  Phase phase = Phase::kInject;
  float loss = 0.0f;
};

struct TrainResult {
  std::vector<LossEntry> log;
  std::size_t skipped = 0;
  double first_grad_norm = 0.0;
};

/// Mean over rows of the masked token cross-entropy, with rows padded to a
/// common length with PAD (never attended to, never counted).
inline Tensor lm_batch_loss(const Transformer& model, const AdapterSet* adapters,
                            const std::vector<const kb::LmExample*>& batch, const ForwardOptions& base) {
  std::size_t len = 0;
  for (const auto* ex : batch) len = std::max(len, ex->inputs.size());
  std::vector<Tensor> losses;
  for (const auto* ex : batch) {
    std::vector<int> in(len, text::kPad), tg(len, text::kPad);
    std::vector<std::uint8_t> mask(len, 0), valid(len, 0);
    std::copy(ex->inputs.begin(), ex->inputs.end(), in.begin());
    std::copy(ex->targets.begin(), ex->targets.end(), tg.begin());
    std::copy(ex->loss_mask.begin(), ex->loss_mask.end(), mask.begin());
    std::fill(valid.begin(), valid.begin() + static_cast<std::ptrdiff_t>(ex->inputs.size()), 1);
    ForwardOptions opt = base;
    opt.key_valid = valid;
    auto res = model.forward(in, adapters, opt);
    losses.push_back(lm_loss(res.logits, tg, mask));
  }
  Tensor total = losses.size() == 1 ? losses[0] : sum(concat_rows([&] {
    std::vector<Tensor> rows;
    for (auto& l : losses) rows.push_back(reshape(l, {1, 1}));
    return rows;
  }()));
  return scale(reshape(total, {1}), 1.0f / static_cast<float>(batch.size()));
}

inline FusionInput fusion_input(const PipelineState& s, const PhqExample& ex, FusionMode mode) {
  FusionInput in;
  in.mode = mode;
  if (mode != FusionMode::kAudioOnly) in.text_ids = ex.text_ids;
  if (mode != FusionMode::kTextOnly) {
    if (!ex.features) throw ContractError("segment " + ex.participant_id + "_" + std::to_string(ex.segment_index) +
                                          " has no audio features for mode " + to_string(mode));
    in.audio = s.projector.project(*ex.features);
  }
  return in;
}

inline std::size_t fusion_length(const PhqExample& ex, FusionMode mode) {
  return assembled_length(ex.text_ids.size(), ex.features ? ex.features->frames() : 0, mode);
}

/// Raw score for one example (attached to the graph when parameters train).
inline Tensor phq_score(const PipelineState& s, const PhqExample& ex, FusionMode mode, const ForwardOptions& opt) {
  return predict_phq(s.model, &s.adapters, s.head, fusion_input(s, ex, mode), opt);
}

inline Tensor phq_batch_loss(const PipelineState& s, const std::vector<const PhqExample*>& batch, FusionMode mode,
                             const ForwardOptions& opt) {
  std::vector<Tensor> sq;
  for (const auto* ex : batch) {
    Tensor d = sub(phq_score(s, *ex, mode, opt), Tensor::scalar(ex->label));
    sq.push_back(reshape(mul(d, d), {1, 1}));
  }
  Tensor total = sq.size() == 1 ? sq[0] : concat_rows(sq);
  return scale(sum(total), 1.0f / static_cast<float>(batch.size()));
}

namespace detail {
struct TrainableGuard {
  Transformer& model;
  bool active;
  TrainableGuard(Transformer& m, bool on) : model(m), active(on) {
    if (active) model.set_trainable(true);
  }
  ~TrainableGuard() {
    if (active) {
      model.set_trainable(false);
      for (auto& [n, t] : model.named_parameters()) {
        Tensor h = t;
        h.clear_grad();
      }
    }
  }
};
}  // namespace detail

/// Runs max_steps Adam updates of the phase's trainable set. The batch order
/// comes from a seeded shuffle, dropout from its own seeded stream.
inline TrainResult train_phase(const TrainConfig& cfg, const TrainData& data, PipelineState& state) {
  if (cfg.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  const bool lm = is_lm_phase(cfg.phase);
  TrainResult result;

  std::vector<const kb::LmExample*> lm_items;
  std::vector<const PhqExample*> phq_items;
  const std::size_t max_len = state.model_config.max_seq_len;
  if (lm) {
    if (data.lm.empty()) throw ContractError("phase " + to_string(cfg.phase) + " needs Q&A examples");
    for (const auto& ex : data.lm) {
      if (ex.inputs.size() > max_len) ++result.skipped;
      else lm_items.push_back(&ex);
    }
  } else {
    if (data.phq.empty()) throw ContractError("phase " + to_string(cfg.phase) + " needs labelled segments");
    const FusionMode mode = fusion_mode_for(cfg.phase);
    for (const auto& ex : data.phq) {
      if (mode != FusionMode::kTextOnly && !ex.features)
        throw ContractError("phase " + to_string(cfg.phase) + " needs audio features for every segment");
      if (fusion_length(ex, mode) > max_len) ++result.skipped;
      else phq_items.push_back(&ex);
    }
  }
  if (result.skipped)
    std::cerr << "warning: skipped " << result.skipped << " over-length examples (max_seq_len " << max_len << ")\n";
  const std::size_t n = lm ? lm_items.size() : phq_items.size();
  if (n == 0) throw ContractError("no usable training examples for phase " + to_string(cfg.phase));

  detail::TrainableGuard guard(state.model, cfg.phase == Phase::kPretrain);
  Adam opt(trainable_parameters(state, cfg.phase), AdamConfig{cfg.learning_rate});
  Rng shuffle_rng = make_rng(cfg.seed, "shuffle");
  Rng dropout_rng = make_rng(cfg.seed, "dropout");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = n;
  const std::size_t bs = std::min(cfg.batch_size, n);

  for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
    std::vector<std::size_t> idx;
    while (idx.size() < bs) {
      if (cursor == n) {
        std::shuffle(order.begin(), order.end(), shuffle_rng);
        cursor = 0;
      }
      idx.push_back(order[cursor++]);
    }
    ForwardOptions fo;
    fo.training = true;
    fo.dropout_rng = &dropout_rng;
    try {
      Tensor loss;
      if (lm) {
        std::vector<const kb::LmExample*> batch;
        for (auto i : idx) batch.push_back(lm_items[i]);
        const AdapterSet* ad = cfg.phase == Phase::kPretrain ? nullptr : &state.adapters;
        loss = lm_batch_loss(state.model, ad, batch, fo);
      } else {
        std::vector<const PhqExample*> batch;
        for (auto i : idx) batch.push_back(phq_items[i]);
        loss = phq_batch_loss(state, batch, fusion_mode_for(cfg.phase), fo);
      }
      opt.zero_grad();
      backward(loss);
      if (step == 1) result.first_grad_norm = std::sqrt(opt.grad_norm_sq());
      opt.step();
      result.log.push_back({step, cfg.phase, loss.item()});
      if (loss.item() < cfg.stop_below) break;
    } catch (const NumericError& e) {
      std::string where;
      if (!cfg.abort_checkpoint.empty()) {
        save_checkpoint(state, cfg.abort_checkpoint);
        where = "; last good checkpoint written to " + cfg.abort_checkpoint.string();
      }
      throw NumericError("training aborted at step " + std::to_string(step) + ": " + e.what() + where);
    }
  }
  for (auto& p : opt.params()) {
    Tensor h = p.tensor;
    h.clear_grad();
  }
  state.phases_done.push_back(to_string(cfg.phase));
  return result;
}

inline void write_loss_log(const std::filesystem::path& path, const std::vector<LossEntry>& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,phase,loss\n";
  char buf[64];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(e.loss));
    out << e.step << ',' << to_string(e.phase) << ',' << buf << '\n';
  }
}

struct SegmentPrediction {
  std::string participant_id;
  std::size_t segment_index = 0;
  double score = 0.0;
};

/// Eval-mode raw scores for every example.
inline std::vector<SegmentPrediction> predict_segments(const PipelineState& s, const std::vector<PhqExample>& data,
                                                       FusionMode mode) {
  std::vector<SegmentPrediction> out;
  for (const auto& ex : data) {
    if (fusion_length(ex, mode) > s.model_config.max_seq_len)
      throw ContractError("segment " + ex.participant_id + "_" + std::to_string(ex.segment_index) +
                          " exceeds max_seq_len in mode " + to_string(mode));
    out.push_back({ex.participant_id, ex.segment_index, phq_score(s, ex, mode, {}).item()});
  }
  return out;
}

}  // namespace phqfuse
