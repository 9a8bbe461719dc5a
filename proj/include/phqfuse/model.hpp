#pragma once

// Micro-scale LLaMA-family decoder: RMSNorm pre-norm blocks, rotary
// embeddings, causal multi-head attention and a SwiGLU feedforward.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "phqfuse/error.hpp"
#include "phqfuse/lora.hpp"
#include "phqfuse/rng.hpp"
#include "phqfuse/tensor.hpp"
#include "phqfuse/text_codec.hpp"

namespace phqfuse {

struct ModelConfig {
  std::size_t d_model = 64;  // hidden dimension d_t
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_ff = 176;
  std::size_t vocab_size = text::kVocabSize;
  std::size_t max_seq_len = 512;
  float rope_theta = 10000.0f;
  float rms_eps = 1e-5f;

  std::size_t d_head() const { return d_model / n_heads; }

  void validate() const {
    if (d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_seq_len == 0)
      throw ConfigError("model dimensions must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("model.d_model (" + std::to_string(d_model) + ") not divisible by model.n_heads (" +
                        std::to_string(n_heads) + ")");
    if (d_head() % 2 != 0) throw ConfigError("head dimension must be even for rotary embeddings");
    if (vocab_size != static_cast<std::size_t>(text::kVocabSize))
      throw ConfigError("vocab_size must be " + std::to_string(text::kVocabSize));
  }
};

struct LayerWeights {
  Tensor attn_norm;  // d
  Tensor q_proj, k_proj, v_proj, o_proj;  // d x d
  Tensor ffn_norm;  // d
  Tensor gate_proj, up_proj;  // d_ff x d
  Tensor down_proj;  // d x d_ff
};

struct ForwardOptions {
  bool training = false;
  Rng* dropout_rng = nullptr;
  bool compute_logits = true;
  bool keep_attention = false;
  // Optional per-position key validity (0 for PAD); empty means all valid.
  std::span<const std::uint8_t> key_valid{};
};

struct ForwardResult {
  Tensor hidden;  // seq x d, after the final norm
  Tensor logits;  // seq x vocab, when requested
  std::vector<Tensor> attention;  // [layer * n_heads + head], seq x seq, when requested
};

class Transformer {
 public:
  Transformer() = default;
  Transformer(Transformer&&) = default;
  Transformer& operator=(Transformer&&) = default;
  Transformer(const Transformer&) = delete;
  Transformer& operator=(const Transformer&) = delete;

  /// Weights ~ N(0, 0.02), norm gains 1.
  static Transformer init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Transformer m;
    m.cfg_ = cfg;
    Rng rng = make_rng(seed, "init");
    const std::size_t d = cfg.d_model, f = cfg.d_ff;
    m.tok_embeddings_ = Tensor::randn({cfg.vocab_size, d}, 0.02f, rng);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
      LayerWeights w;
      w.attn_norm = Tensor::full({d}, 1.0f);
      w.q_proj = Tensor::randn({d, d}, 0.02f, rng);
      w.k_proj = Tensor::randn({d, d}, 0.02f, rng);
      w.v_proj = Tensor::randn({d, d}, 0.02f, rng);
      w.o_proj = Tensor::randn({d, d}, 0.02f, rng);
      w.ffn_norm = Tensor::full({d}, 1.0f);
      w.gate_proj = Tensor::randn({f, d}, 0.02f, rng);
      w.up_proj = Tensor::randn({f, d}, 0.02f, rng);
      w.down_proj = Tensor::randn({d, f}, 0.02f, rng);
      m.layers_.push_back(std::move(w));
    }
    m.final_norm_ = Tensor::full({d}, 1.0f);
    m.lm_head_ = Tensor::randn({cfg.vocab_size, d}, 0.02f, rng);
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const std::vector<LayerWeights>& layers() const { return layers_; }
  std::vector<LayerWeights>& layers() { return layers_; }
  const Tensor& tok_embeddings() const { return tok_embeddings_; }

  /// Rows of the token embedding table.
  Tensor embed(std::span<const int> ids) const { return embedding(tok_embeddings_, ids); }

  ForwardResult forward(std::span<const int> ids, const AdapterSet* adapters = nullptr,
                        const ForwardOptions& opt = {}) const {
    return forward_embeddings(embed(ids), adapters, opt);
  }

  /// Runs the decoder on an input embedding matrix (seq x d), bypassing the
  /// token table so projected audio frames can be fed directly.
  ForwardResult forward_embeddings(const Tensor& x0, const AdapterSet* adapters = nullptr,
                                   const ForwardOptions& opt = {}) const {
    const std::size_t seq = x0.rows(), d = cfg_.d_model;
    if (x0.rank() != 2 || x0.cols() != d)
      throw DimensionError("decoder input must be seq x " + std::to_string(d) + ", got " + shape_str(x0.shape()));
    if (seq > cfg_.max_seq_len)
      throw ContractError("sequence length " + std::to_string(seq) + " exceeds max_seq_len " +
                          std::to_string(cfg_.max_seq_len));
    if (!opt.key_valid.empty() && opt.key_valid.size() != seq)
      throw DimensionError("key_valid length must equal sequence length");

    std::vector<std::size_t> positions(seq);
    for (std::size_t i = 0; i < seq; ++i) positions[i] = i;
    std::vector<std::uint8_t> allow(seq * seq, 0);
    for (std::size_t i = 0; i < seq; ++i)
      for (std::size_t j = 0; j <= i; ++j) allow[i * seq + j] = opt.key_valid.empty() || opt.key_valid[j];

    const AdapterMode amode{opt.training, opt.dropout_rng};
    const std::size_t dh = cfg_.d_head();
    const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));

    ForwardResult res;
    Tensor x = x0;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const LayerWeights& w = layers_[l];
      auto proj = [&](const Tensor& in, const Tensor& W, const char* name) {
        const LoraAdapter* ad = adapters ? adapters->find(l, name) : nullptr;
        return adapted_forward(in, W, ad, amode);
      };
      Tensor h = rmsnorm(x, w.attn_norm, cfg_.rms_eps);
      Tensor q = proj(h, w.q_proj, "q_proj");
      Tensor k = proj(h, w.k_proj, "k_proj");
      Tensor v = proj(h, w.v_proj, "v_proj");
      std::vector<Tensor> heads;
      heads.reserve(cfg_.n_heads);
      for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
        Tensor qh = rope(slice_cols(q, hd * dh, dh), positions, cfg_.rope_theta);
        Tensor kh = rope(slice_cols(k, hd * dh, dh), positions, cfg_.rope_theta);
        Tensor vh = slice_cols(v, hd * dh, dh);
        Tensor p = masked_softmax_rows(scale(matmul_nt(qh, kh), att_scale), allow);
        if (opt.keep_attention) res.attention.push_back(p);
        heads.push_back(matmul(p, vh));
      }
      Tensor att = heads.size() == 1 ? heads[0] : concat_cols(heads);
      x = add(x, proj(att, w.o_proj, "o_proj"));
      Tensor h2 = rmsnorm(x, w.ffn_norm, cfg_.rms_eps);
      Tensor ff = mul(silu(matmul_nt(h2, w.gate_proj)), matmul_nt(h2, w.up_proj));
      x = add(x, matmul_nt(ff, w.down_proj));
    }
    res.hidden = rmsnorm(x, final_norm_, cfg_.rms_eps);
    if (opt.compute_logits) res.logits = matmul_nt(res.hidden, lm_head_);
    return res;
  }

  /// Base weights in a fixed order with stable names.
  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    out.push_back({"tok_embeddings", tok_embeddings_});
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& w = layers_[l];
      const std::string p = "layers." + std::to_string(l) + ".";
      out.push_back({p + "attn_norm", w.attn_norm});
      out.push_back({p + "q_proj", w.q_proj});
      out.push_back({p + "k_proj", w.k_proj});
      out.push_back({p + "v_proj", w.v_proj});
      out.push_back({p + "o_proj", w.o_proj});
      out.push_back({p + "ffn_norm", w.ffn_norm});
      out.push_back({p + "gate_proj", w.gate_proj});
      out.push_back({p + "up_proj", w.up_proj});
      out.push_back({p + "down_proj", w.down_proj});
    }
    out.push_back({"final_norm", final_norm_});
    out.push_back({"lm_head", lm_head_});
    return out;
  }

  /// Mutable access by checkpoint name, used when loading weights.
  Tensor* parameter(const std::string& name) {
    if (name == "tok_embeddings") return &tok_embeddings_;
    if (name == "final_norm") return &final_norm_;
    if (name == "lm_head") return &lm_head_;
    if (name.rfind("layers.", 0) != 0) return nullptr;
    const auto dot = name.find('.', 7);
    if (dot == std::string::npos) return nullptr;
    std::size_t l = 0;
    try {
      l = std::stoul(name.substr(7, dot - 7));
    } catch (...) {
      return nullptr;
    }
    if (l >= layers_.size()) return nullptr;
    auto& w = layers_[l];
    const std::string field = name.substr(dot + 1);
    if (field == "attn_norm") return &w.attn_norm;
    if (field == "q_proj") return &w.q_proj;
    if (field == "k_proj") return &w.k_proj;
    if (field == "v_proj") return &w.v_proj;
    if (field == "o_proj") return &w.o_proj;
    if (field == "ffn_norm") return &w.ffn_norm;
    if (field == "gate_proj") return &w.gate_proj;
    if (field == "up_proj") return &w.up_proj;
    if (field == "down_proj") return &w.down_proj;
    return nullptr;
  }

  void set_trainable(bool on) {
    for (auto& [name, t] : named_parameters()) {
      Tensor h = t;
      h.set_requires_grad(on);
    }
  }

  Transformer clone() const {
    Transformer c;
    c.cfg_ = cfg_;
    c.tok_embeddings_ = tok_embeddings_.clone();
    for (const auto& w : layers_) {
      c.layers_.push_back({w.attn_norm.clone(), w.q_proj.clone(), w.k_proj.clone(), w.v_proj.clone(),
                           w.o_proj.clone(), w.ffn_norm.clone(), w.gate_proj.clone(), w.up_proj.clone(),
                           w.down_proj.clone()});
    }
    c.final_norm_ = final_norm_.clone();
    c.lm_head_ = lm_head_.clone();
    return c;
  }

  /// Copy with every adapter of `adapters` folded into its base weight.
  Transformer merged(AdapterSet& adapters) const {
    Transformer c = clone();
    for (std::size_t l = 0; l < c.layers_.size(); ++l) {
      for (const auto& t : lora_allowed_targets()) {
        if (LoraAdapter* ad = adapters.find(l, t)) {
          Tensor* W = c.parameter(lora_key(l, t));
          *W = merge(*W, *ad);
        }
      }
    }
    return c;
  }

 private:
  ModelConfig cfg_;
  Tensor tok_embeddings_;
  std::vector<LayerWeights> layers_;
  Tensor final_norm_;
  Tensor lm_head_;
};

/// Masked mean token cross-entropy.
inline Tensor lm_loss(const Tensor& logits, std::span<const int> targets, std::span<const std::uint8_t> mask) {
  return cross_entropy(logits, targets, mask);
}

/// Sampled continuation; the whole prefix is re-run for every new token.
/// temperature <= 0 selects the argmax.
inline std::vector<int> generate_tokens(const Transformer& model, const AdapterSet* adapters,
                                        std::vector<int> prompt, std::size_t max_new_tokens,
                                        float temperature, Rng& rng) {
  std::vector<int> out;
  const std::size_t limit = model.config().max_seq_len;
  for (std::size_t step = 0; step < max_new_tokens && prompt.size() < limit; ++step) {
    auto res = model.forward(prompt, adapters);
    const std::size_t v = res.logits.cols();
    const float* last = res.logits.data().data() + (res.logits.rows() - 1) * v;
    int next = 0;
    if (temperature <= 0.0f) {
      next = static_cast<int>(std::max_element(last, last + v) - last);
    } else {
      std::vector<double> w(v);
      const float mx = *std::max_element(last, last + v);
      for (std::size_t j = 0; j < v; ++j) w[j] = std::exp((last[j] - mx) / temperature);
      std::discrete_distribution<int> dist(w.begin(), w.end());
      next = dist(rng);
    }
    if (next == text::kEos) break;
    out.push_back(next);
    prompt.push_back(next);
  }
  return out;
}

}  // namespace phqfuse
