#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "phqfuse/error.hpp"
#include "phqfuse/lora.hpp"
#include "phqfuse/tensor.hpp"

namespace phqfuse {

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (auto& p : params_) {
      if (!p.tensor.is_leaf() || !p.tensor.requires_grad())
        throw ContractError("optimizer parameter '" + p.name + "' must be a trainable leaf");
      m_.emplace_back(p.tensor.numel(), 0.0f);
      v_.emplace_back(p.tensor.numel(), 0.0f);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Squared L2 norm of all gradients.
  double grad_norm_sq() const {
    double s = 0.0;
    for (const auto& p : params_)
      for (float g : p.tensor.grad()) s += static_cast<double>(g) * g;
    return s;
  }

  /// One update. Gradients and updated weights are checked for NaN/Inf
  /// before anything is written, so a failing step leaves the weights intact.
  void step() {
    const long t = t_ + 1;
    const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t));
    const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t));
    std::vector<std::vector<float>> nw(params_.size()), nm(params_.size()), nv(params_.size());
    for (std::size_t k = 0; k < params_.size(); ++k) {
      const auto& p = params_[k].tensor;
      if (!p.has_grad()) continue;
      auto w = p.data();
      auto g = p.grad();
      detail::check_finite(g, "gradient");
      nw[k].assign(w.begin(), w.end());
      nm[k] = m_[k];
      nv[k] = v_[k];
      for (std::size_t i = 0; i < w.size(); ++i) {
        nm[k][i] = cfg_.beta1 * nm[k][i] + (1.0f - cfg_.beta1) * g[i];
        nv[k][i] = cfg_.beta2 * nv[k][i] + (1.0f - cfg_.beta2) * g[i] * g[i];
        nw[k][i] -= cfg_.lr * (nm[k][i] / bc1) / (std::sqrt(nv[k][i] / bc2) + cfg_.eps);
      }
      detail::check_finite(nw[k], "adam update");
    }
    for (std::size_t k = 0; k < params_.size(); ++k) {
      if (nw[k].empty()) continue;
      auto w = params_[k].tensor.mutable_data();
      std::copy(nw[k].begin(), nw[k].end(), w.begin());
      m_[k] = std::move(nm[k]);
      v_[k] = std::move(nv[k]);
    }
    t_ = t;
  }

  const std::vector<NamedTensor>& params() const { return params_; }
  long steps() const { return t_; }

 private:
  std::vector<NamedTensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

}  // namespace phqfuse
