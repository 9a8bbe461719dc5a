#pragma once

// Strided 1-D convolutional feature encoder over 16 kHz waveforms, plus
// PCM16 WAV I/O and the precomputed-feature file path.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "phqfuse/error.hpp"
#include "phqfuse/lora.hpp"
#include "phqfuse/rng.hpp"
#include "phqfuse/tensor.hpp"
#include "phqfuse/tensor_io.hpp"

namespace phqfuse::audio {

inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<float> samples;
  int sample_rate = kSampleRate;
  std::string participant_id;

  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }

  void validate() const {
    if (sample_rate != kSampleRate)
      throw FormatError("sample rate " + std::to_string(sample_rate) + " Hz, expected 16000 Hz");
    if (samples.empty()) throw InputError("empty waveform");
  }
};

/// Matrix r of shape s x d_a.
struct AudioFeatures {
  Tensor values;

  std::size_t frames() const { return values.rows(); }
  std::size_t dim() const { return values.cols(); }
};

struct ConvSpec {
  std::size_t kernel;
  std::size_t stride;
  std::size_t out_channels;
};

struct EncoderConfig {
  std::array<ConvSpec, 3> layers{{{8, 4, 32}, {4, 2, 32}, {4, 2, 32}}};
  float norm_eps = 1e-5f;

  std::size_t feature_dim() const { return layers.back().out_channels; }
  std::size_t total_stride() const {
    std::size_t s = 1;
    for (const auto& l : layers) s *= l.stride;
    return s;
  }
};

/// Frames produced for an input of `samples` samples; 0 when too short.
inline std::size_t output_length(const EncoderConfig& cfg, std::size_t samples) {
  std::size_t len = samples;
  for (const auto& l : cfg.layers) {
    if (len < l.kernel) return 0;
    len = (len - l.kernel) / l.stride + 1;
  }
  return len;
}

/// Smallest waveform length that yields at least one frame.
inline std::size_t min_input_length(const EncoderConfig& cfg) {
  std::size_t need = 1;
  for (auto it = cfg.layers.rbegin(); it != cfg.layers.rend(); ++it) need = (need - 1) * it->stride + it->kernel;
  return need;
}

class AudioEncoder {
 public:
  AudioEncoder() = default;

  static AudioEncoder init(const EncoderConfig& cfg, std::uint64_t seed) {
    AudioEncoder enc;
    enc.cfg_ = cfg;
    Rng rng = make_rng(seed, "audio_init");
    std::size_t in_ch = 1;
    for (const auto& l : cfg.layers) {
      const std::size_t fan_in = l.kernel * in_ch;
      enc.weights_.push_back(Tensor::randn({l.out_channels, fan_in}, 1.0f / std::sqrt(static_cast<float>(fan_in)), rng));
      enc.biases_.push_back(Tensor::zeros({l.out_channels}));
      in_ch = l.out_channels;
    }
    enc.norm_gain_ = Tensor::full({cfg.feature_dim()}, 1.0f);
    enc.norm_bias_ = Tensor::zeros({cfg.feature_dim()});
    return enc;
  }

  const EncoderConfig& config() const { return cfg_; }

  /// Pre-activation output of every conv layer (before SiLU / final norm).
  std::vector<Tensor> conv_outputs(const Waveform& w) const {
    w.validate();
    const std::size_t need = min_input_length(cfg_);
    if (w.samples.size() < need)
      throw InputError("waveform has " + std::to_string(w.samples.size()) + " samples, at least " +
                       std::to_string(need) + " required");
    std::vector<Tensor> outs;
    Tensor x = Tensor::from({w.samples.size(), 1}, w.samples);
    for (std::size_t i = 0; i < cfg_.layers.size(); ++i) {
      if (i > 0) x = silu(x);
      const auto& l = cfg_.layers[i];
      x = add_bias(matmul_nt(frames(x, l.kernel, l.stride), weights_[i]), biases_[i]);
      outs.push_back(x);
    }
    return outs;
  }

  AudioFeatures extract(const Waveform& w) const {
    auto outs = conv_outputs(w);
    return {layernorm(outs.back(), norm_gain_, norm_bias_, cfg_.norm_eps)};
  }

  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      out.push_back({"audio.conv" + std::to_string(i) + ".weight", weights_[i]});
      out.push_back({"audio.conv" + std::to_string(i) + ".bias", biases_[i]});
    }
    out.push_back({"audio.norm.gain", norm_gain_});
    out.push_back({"audio.norm.bias", norm_bias_});
    return out;
  }

  Tensor* parameter(const std::string& name) {
    for (std::size_t i = 0; i < weights_.size(); ++i) {
      if (name == "audio.conv" + std::to_string(i) + ".weight") return &weights_[i];
      if (name == "audio.conv" + std::to_string(i) + ".bias") return &biases_[i];
    }
    if (name == "audio.norm.gain") return &norm_gain_;
    if (name == "audio.norm.bias") return &norm_bias_;
    return nullptr;
  }

  void set_trainable(bool on) {
    for (auto& [n, t] : named_parameters()) {
      Tensor h = t;
      h.set_requires_grad(on);
    }
  }

 private:
  EncoderConfig cfg_;
  std::vector<Tensor> weights_;  // out_channels x (kernel * in_channels)
  std::vector<Tensor> biases_;
  Tensor norm_gain_, norm_bias_;
};

inline AudioFeatures extract_features(const AudioEncoder& enc, const Waveform& w) { return enc.extract(w); }

// ---------------------------------------------------------------------------
// Precomputed features ("features" tensor, s x d_a)

inline void save_features(const AudioFeatures& f, const std::filesystem::path& path) {
  io::TensorFile file;
  file.config_json = "{\"d_a\":" + std::to_string(f.dim()) + ",\"frames\":" + std::to_string(f.frames()) + "}";
  file.tensors.push_back({"features", f.values.detach()});
  io::save(file, path);
}

inline AudioFeatures load_features(const std::filesystem::path& path) {
  auto file = io::load(path);
  const Tensor* t = file.find("features");
  if (!t) throw FormatError(path.string() + ": no 'features' tensor");
  if (t->rank() != 2) throw FormatError(path.string() + ": features must be a matrix, got " + shape_str(t->shape()));
  return {*t};
}

// ---------------------------------------------------------------------------
// WAV: PCM 16-bit signed little-endian, mono, 16 kHz

namespace detail {
inline std::uint32_t le32(const std::vector<std::uint8_t>& b, std::size_t o) {
  return b[o] | (b[o + 1] << 8) | (b[o + 2] << 16) | (static_cast<std::uint32_t>(b[o + 3]) << 24);
}
inline std::uint16_t le16(const std::vector<std::uint8_t>& b, std::size_t o) {
  return static_cast<std::uint16_t>(b[o] | (b[o + 1] << 8));
}
inline void put16(std::vector<std::uint8_t>& b, std::uint16_t v) {
  b.push_back(v & 0xff);
  b.push_back(v >> 8);
}
inline void put32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back((v >> (8 * i)) & 0xff);
}
}  // namespace detail

inline Waveform decode_wav(const std::vector<std::uint8_t>& b, const std::string& name = "wav") {
  using detail::le16;
  using detail::le32;
  if (b.size() < 12 || std::string(b.begin(), b.begin() + 4) != "RIFF" ||
      std::string(b.begin() + 8, b.begin() + 12) != "WAVE")
    throw FormatError(name + ": not a RIFF/WAVE file");
  std::size_t pos = 12;
  bool have_fmt = false;
  Waveform w;
  while (pos + 8 <= b.size()) {
    const std::string id(b.begin() + pos, b.begin() + pos + 4);
    const std::uint32_t size = le32(b, pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > b.size()) throw FormatError(name + ": chunk '" + id + "' runs past end of file");
    if (id == "fmt ") {
      if (size < 16) throw FormatError(name + ": fmt chunk too small");
      const auto format = le16(b, body), channels = le16(b, body + 2), bits = le16(b, body + 14);
      w.sample_rate = static_cast<int>(le32(b, body + 4));
      if (format != 1 || bits != 16) throw FormatError(name + ": only 16-bit PCM is supported");
      if (channels != 1) throw FormatError(name + ": only mono audio is supported");
      if (w.sample_rate != kSampleRate)
        throw FormatError(name + ": sample rate " + std::to_string(w.sample_rate) + " Hz, expected 16000 Hz");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw FormatError(name + ": data chunk before fmt chunk");
      const std::size_t n = size / 2;
      w.samples.resize(n);
      for (std::size_t i = 0; i < n; ++i)
        w.samples[i] = static_cast<float>(static_cast<std::int16_t>(le16(b, body + 2 * i))) / 32768.0f;
      return w;
    }
    pos = body + size + (size & 1);
  }
  throw FormatError(name + ": no data chunk");
}

inline std::vector<std::uint8_t> encode_wav(const Waveform& w) {
  std::vector<std::uint8_t> b;
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  b.insert(b.end(), {'R', 'I', 'F', 'F'});
  detail::put32(b, 36 + data_bytes);
  b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  detail::put32(b, 16);
  detail::put16(b, 1);
  detail::put16(b, 1);
  detail::put32(b, static_cast<std::uint32_t>(w.sample_rate));
  detail::put32(b, static_cast<std::uint32_t>(w.sample_rate) * 2);
  detail::put16(b, 2);
  detail::put16(b, 16);
  b.insert(b.end(), {'d', 'a', 't', 'a'});
  detail::put32(b, data_bytes);
  for (float s : w.samples) {
    const float c = std::clamp(s, -1.0f, 1.0f);
    const long q = std::lround(c * 32768.0f);
    detail::put16(b, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L))));
  }
  return b;
}

inline Waveform read_wav(const std::filesystem::path& path) {
  return decode_wav(io::read_bytes(path), path.string());
}

inline void write_wav(const Waveform& w, const std::filesystem::path& path) { io::write_bytes(path, encode_wav(w)); }

}  // namespace phqfuse::audio
