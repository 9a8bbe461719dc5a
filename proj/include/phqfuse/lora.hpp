#pragma once

// Low-rank adaptation of frozen projection weights: y = x W^T + s * (drop(x) A^T) B^T
// with s = alpha / r, A ~ N(0, 0.02) and B = 0 at initialisation.

#include <algorithm>
#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "phqfuse/error.hpp"
#include "phqfuse/rng.hpp"
#include "phqfuse/tensor.hpp"

namespace phqfuse {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

inline const std::vector<std::string>& lora_allowed_targets() {
  static const std::vector<std::string> kTargets{"q_proj", "k_proj", "v_proj", "o_proj"};
  return kTargets;
}

struct LoraConfig {
  int r = 8;
  float alpha = 16.0f;
  float dropout = 0.1f;
  std::vector<std::string> targets{"q_proj", "v_proj"};

  float scaling() const { return alpha / static_cast<float>(r); }

  bool targets_module(const std::string& name) const {
    return std::find(targets.begin(), targets.end(), name) != targets.end();
  }

  void validate() const {
    if (r < 1) throw ConfigError("lora.r must be >= 1");
    if (dropout < 0.0f || dropout >= 1.0f) throw ConfigError("lora.dropout must be in [0,1)");
    if (targets.empty()) throw ConfigError("lora.targets must not be empty");
    for (const auto& t : targets) {
      const auto& ok = lora_allowed_targets();
      if (std::find(ok.begin(), ok.end(), t) == ok.end())
        throw ConfigError("lora target '" + t + "' is not one of q_proj,k_proj,v_proj,o_proj");
    }
  }
};

struct LoraAdapter {
  Tensor A;  // r x d_in
  Tensor B;  // d_out x r
  float scaling = 2.0f;
  float dropout = 0.0f;
  bool merged = false;

  static LoraAdapter init(std::size_t d_in, std::size_t d_out, const LoraConfig& cfg, Rng& rng) {
    LoraAdapter ad;
    const auto r = static_cast<std::size_t>(cfg.r);
    ad.A = Tensor::randn({r, d_in}, 0.02f, rng, true);
    ad.B = Tensor::zeros({d_out, r}, true);
    ad.scaling = cfg.scaling();
    ad.dropout = cfg.dropout;
    return ad;
  }

  /// Explicit weight delta s * B * A (d_out x d_in).
  Tensor delta() const { return scale(matmul(B.detach(), A.detach()), scaling); }
};

struct AdapterMode {
  bool training = false;
  Rng* dropout_rng = nullptr;  // required when training with dropout > 0
};

/// x[n, d_in] through the frozen weight W[d_out, d_in], plus the adapter's
/// low-rank path when one is given. Dropout touches only the adapter input.
inline Tensor adapted_forward(const Tensor& x, const Tensor& W, const LoraAdapter* adapter,
                              const AdapterMode& mode = {}) {
  Tensor y = matmul_nt(x, W);
  if (!adapter) return y;
  if (adapter->merged) throw ContractError("adapter was already merged into its base weight");
  if (adapter->A.cols() != W.cols() || adapter->B.rows() != W.rows() || adapter->A.rows() != adapter->B.cols())
    throw DimensionError("adapter " + shape_str(adapter->A.shape()) + "/" + shape_str(adapter->B.shape()) +
                         " does not fit weight " + shape_str(W.shape()));
  Tensor in = x;
  if (mode.training && adapter->dropout > 0.0f) {
    if (!mode.dropout_rng) throw ContractError("training-mode adapter forward needs a dropout rng");
    in = dropout(x, adapter->dropout, *mode.dropout_rng);
  }
  Tensor low = matmul_nt(matmul_nt(in, adapter->A), adapter->B);
  return add(y, scale(low, adapter->scaling));
}

/// W + s * B * A. Marks the adapter merged; a second merge is an error.
inline Tensor merge(const Tensor& W, LoraAdapter& adapter) {
  if (adapter.merged) throw ContractError("adapter merged twice");
  Tensor d = adapter.delta();
  if (d.shape() != W.shape())
    throw DimensionError("merge: delta " + shape_str(d.shape()) + " vs weight " + shape_str(W.shape()));
  std::vector<float> out(W.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = W.data()[i] + d.data()[i];
  adapter.merged = true;
  return Tensor::from(W.shape(), std::move(out), false);
}

inline std::string lora_key(std::size_t layer, const std::string& target) {
  return "layers." + std::to_string(layer) + "." + target;
}

/// All adapters of a model, keyed "layers.{i}.{target}".
class AdapterSet {
 public:
  AdapterSet() = default;

  static AdapterSet create(std::size_t n_layers, std::size_t d_model, const LoraConfig& cfg,
                           std::uint64_t seed) {
    cfg.validate();
    AdapterSet set;
    set.config_ = cfg;
    Rng rng = make_rng(seed, "lora_init");
    for (std::size_t l = 0; l < n_layers; ++l)
      for (const auto& t : lora_allowed_targets())
        if (cfg.targets_module(t)) set.adapters_.emplace(lora_key(l, t), LoraAdapter::init(d_model, d_model, cfg, rng));
    return set;
  }

  const LoraConfig& config() const { return config_; }
  std::size_t size() const { return adapters_.size(); }

  const LoraAdapter* find(std::size_t layer, const std::string& target) const {
    auto it = adapters_.find(lora_key(layer, target));
    return it == adapters_.end() ? nullptr : &it->second;
  }
  LoraAdapter* find(std::size_t layer, const std::string& target) {
    auto it = adapters_.find(lora_key(layer, target));
    return it == adapters_.end() ? nullptr : &it->second;
  }

  std::map<std::string, LoraAdapter>& adapters() { return adapters_; }
  const std::map<std::string, LoraAdapter>& adapters() const { return adapters_; }

  /// "layers.{i}.{target}.lora_A" / ".lora_B" in sorted order.
  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    for (const auto& [key, ad] : adapters_) {
      out.push_back({key + ".lora_A", ad.A});
      out.push_back({key + ".lora_B", ad.B});
    }
    return out;
  }

  AdapterSet clone() const {
    AdapterSet c;
    c.config_ = config_;
    for (const auto& [k, ad] : adapters_) {
      LoraAdapter a = ad;
      a.A = ad.A.clone();
      a.B = ad.B.clone();
      c.adapters_.emplace(k, std::move(a));
    }
    return c;
  }

 private:
  LoraConfig config_;
  std::map<std::string, LoraAdapter> adapters_;
};

}  // namespace phqfuse
