#pragma once

// Audio-to-LM projection, mixed-modality sequence assembly and the linear
// PHQ-8 regression head read off the last position's hidden state.

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "phqfuse/audio.hpp"
#include "phqfuse/error.hpp"
#include "phqfuse/model.hpp"
#include "phqfuse/rng.hpp"
#include "phqfuse/tensor.hpp"
#include "phqfuse/text_codec.hpp"

namespace phqfuse {

inline constexpr double kPhqMin = 0.0;
inline constexpr double kPhqMax = 24.0;

inline double clamp_phq(double score) { return std::clamp(score, kPhqMin, kPhqMax); }

enum class FusionMode { kTextOnly, kAudioOnly, kTextAndAudio };

inline FusionMode parse_fusion_mode(const std::string& s) {
  if (s == "text_only" || s == "text") return FusionMode::kTextOnly;
  if (s == "audio_only" || s == "audio") return FusionMode::kAudioOnly;
  if (s == "text_and_audio") return FusionMode::kTextAndAudio;
  throw ConfigError("unknown mode '" + s + "' (expected text_only, audio_only or text_and_audio)");
}

inline std::string to_string(FusionMode m) {
  switch (m) {
    case FusionMode::kTextOnly: return "text_only";
    case FusionMode::kAudioOnly: return "audio_only";
    case FusionMode::kTextAndAudio: return "text_and_audio";
  }
  return "?";
}

/// Two-layer feedforward d_a -> d_t -> d_t with SiLU in between, per frame.
class Projector {
 public:
  Projector() = default;

  static Projector init(std::size_t d_audio, std::size_t d_model, std::uint64_t seed) {
    Projector p;
    Rng rng = make_rng(seed, "projector_init");
    p.w1_ = Tensor::randn({d_model, d_audio}, 0.02f, rng, true);
    p.b1_ = Tensor::zeros({d_model}, true);
    p.w2_ = Tensor::randn({d_model, d_model}, 0.02f, rng, true);
    p.b2_ = Tensor::zeros({d_model}, true);
    return p;
  }

  std::size_t input_dim() const { return w1_.cols(); }
  std::size_t output_dim() const { return w2_.rows(); }

  Tensor project(const audio::AudioFeatures& r) const {
    if (r.values.rank() != 2 || r.dim() != input_dim())
      throw ConfigError("audio feature dimension " + std::to_string(r.values.cols()) +
                        " does not match projector input " + std::to_string(input_dim()));
    return add_bias(matmul_nt(silu(add_bias(matmul_nt(r.values, w1_), b1_)), w2_), b2_);
  }

  std::vector<NamedTensor> named_parameters() const {
    return {{"projector.w1", w1_}, {"projector.b1", b1_}, {"projector.w2", w2_}, {"projector.b2", b2_}};
  }

  Tensor* parameter(const std::string& name) {
    if (name == "projector.w1") return &w1_;
    if (name == "projector.b1") return &b1_;
    if (name == "projector.w2") return &w2_;
    if (name == "projector.b2") return &b2_;
    return nullptr;
  }

  Projector clone() const {
    Projector c;
    c.w1_ = w1_.clone();
    c.b1_ = b1_.clone();
    c.w2_ = w2_.clone();
    c.b2_ = b2_.clone();
    return c;
  }

 private:
  Tensor w1_, b1_, w2_, b2_;
};

/// Linear d_t -> 1.
class RegressionHead {
 public:
  RegressionHead() = default;

  static RegressionHead init(std::size_t d_model, std::uint64_t seed) {
    RegressionHead h;
    Rng rng = make_rng(seed, "head_init");
    h.w_ = Tensor::randn({1, d_model}, 0.02f, rng, true);
    h.b_ = Tensor::zeros({1}, true);
    return h;
  }

  /// hidden_row is 1 x d_t; returns a {1} scalar tensor.
  Tensor apply(const Tensor& hidden_row) const {
    return reshape(add_bias(matmul_nt(hidden_row, w_), b_), {1});
  }

  std::vector<NamedTensor> named_parameters() const { return {{"head.w", w_}, {"head.b", b_}}; }

  Tensor* parameter(const std::string& name) {
    if (name == "head.w") return &w_;
    if (name == "head.b") return &b_;
    return nullptr;
  }

  RegressionHead clone() const {
    RegressionHead c;
    c.w_ = w_.clone();
    c.b_ = b_.clone();
    return c;
  }

 private:
  Tensor w_, b_;
};

struct FusionInput {
  std::vector<int> text_ids;  // without BOS
  std::optional<Tensor> audio;  // projected embedding, s x d_t
  FusionMode mode = FusionMode::kAudioOnly;
};

/// Sequence length that assemble() will produce.
inline std::size_t assembled_length(std::size_t text_tokens, std::size_t audio_frames, FusionMode mode) {
  switch (mode) {
    case FusionMode::kTextOnly: return 1 + text_tokens;
    case FusionMode::kAudioOnly: return 1 + audio_frames;
    case FusionMode::kTextAndAudio: return 1 + text_tokens + 1 + audio_frames;
  }
  return 0;
}

/// text_and_audio: [BOS, text, AUDIO marker, audio frames]
/// audio_only:     [BOS, audio frames]
/// text_only:      [BOS, text] through the token table
inline Tensor assemble(const Transformer& model, const FusionInput& in) {
  const std::size_t d = model.config().d_model;
  const bool need_audio = in.mode != FusionMode::kTextOnly;
  if (need_audio) {
    if (!in.audio || !in.audio->defined()) throw ContractError(to_string(in.mode) + " input has no audio part");
    if (in.audio->rank() != 2 || in.audio->cols() != d)
      throw DimensionError("projected audio must be s x " + std::to_string(d) + ", got " + shape_str(in.audio->shape()));
  }
  if (in.mode == FusionMode::kTextOnly && in.text_ids.empty())
    throw ContractError("text_only input has no text tokens");
  const std::size_t total =
      assembled_length(in.text_ids.size(), need_audio ? in.audio->rows() : 0, in.mode);
  if (total > model.config().max_seq_len)
    throw ContractError("assembled sequence of " + std::to_string(total) + " exceeds max_seq_len " +
                        std::to_string(model.config().max_seq_len));

  std::vector<int> prefix{text::kBos};
  if (in.mode != FusionMode::kAudioOnly) prefix.insert(prefix.end(), in.text_ids.begin(), in.text_ids.end());
  if (in.mode == FusionMode::kTextAndAudio) prefix.push_back(text::kAudio);
  Tensor head = model.embed(prefix);
  if (!need_audio) return head;
  return concat_rows({head, *in.audio});
}

/// Raw (unclamped) score as a {1} tensor that stays attached to the graph.
inline Tensor predict_phq(const Transformer& model, const AdapterSet* adapters, const RegressionHead& head,
                          const Tensor& assembled, const ForwardOptions& base_opt = {}) {
  if (!assembled.defined() || assembled.rows() == 0) throw ContractError("predict_phq on empty input");
  ForwardOptions opt = base_opt;
  opt.compute_logits = false;
  auto res = model.forward_embeddings(assembled, adapters, opt);
  return head.apply(slice_rows(res.hidden, res.hidden.rows() - 1, 1));
}

inline Tensor predict_phq(const Transformer& model, const AdapterSet* adapters, const RegressionHead& head,
                          const FusionInput& in, const ForwardOptions& opt = {}) {
  return predict_phq(model, adapters, head, assemble(model, in), opt);
}

}  // namespace phqfuse
