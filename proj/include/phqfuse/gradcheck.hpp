#pragma once

// Central finite-difference checks of the reverse-mode gradients, for every
// differentiable op and for the composed training paths.

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "phqfuse/audio.hpp"
#include "phqfuse/fusion.hpp"
#include "phqfuse/lora.hpp"
#include "phqfuse/model.hpp"
#include "phqfuse/rng.hpp"
#include "phqfuse/tensor.hpp"

namespace phqfuse::gradcheck {

struct Options {
  double eps = 1e-3;
  double tolerance = 1e-2;
  // Denominator floor of the relative error: derivatives below it are
  // judged on absolute error.
  double floor = 0.1;
  std::size_t max_coords = 8;  // single-coordinate probes per input tensor (largest |g|)
  std::size_t directions = 4;  // random +-eps probes per input tensor
  std::size_t direction_support = 16;  // coordinates moved by each of them
  std::size_t instances = 3;  // random instances per case
  std::uint64_t seed = kDefaultSeed;
};

struct Problem {
  std::vector<NamedTensor> inputs;  // trainable leaves
  std::function<Tensor()> loss;  // rebuilds the graph, returns a {1} tensor
};

struct Case {
  std::string name;
  std::function<Problem(Rng&)> build;
};

struct CaseResult {
  std::string name;
  std::size_t instance = 0;
  std::size_t coords = 0;
  double max_rel = 0.0;
  std::string worst;  // input with the largest error
  bool pass = true;
};

struct Report {
  std::vector<CaseResult> results;
  double seconds = 0.0;
  bool ok() const {
    return std::all_of(results.begin(), results.end(), [](const auto& r) { return r.pass; });
  }
};

/// ||a - n|| / max(||a||, ||n||, floor * sqrt(k)) over k probes; the floor
/// is per probe, so small derivatives are held to an absolute rms error of
/// tolerance * floor.
inline double relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double f = floor * std::sqrt(static_cast<double>(analytic.size()));
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), f});
}

/// Per input tensor, central differences with step +-eps per touched
/// coordinate, in two probe families scored separately:
///  - single coordinates, the largest analytic entries (d = g_i);
///  - random +-1 vectors v on a random subset of entries (d = g . v).
/// The random vectors move many entries at once, so tensors made of many
/// small entries stay above float32 rounding of the loss.
inline CaseResult check(const std::string& name, std::size_t instance, Problem& p, const Options& opt, Rng& rng) {
  CaseResult r;
  r.name = name;
  r.instance = instance;
  for (auto& in : p.inputs) in.tensor.zero_grad();
  backward(p.loss());
  for (auto& in : p.inputs) {
    Tensor& t = in.tensor;
    const std::size_t n = t.numel();
    const std::vector<float> g(t.grad().begin(), t.grad().end());
    const std::vector<float> orig(t.data().begin(), t.data().end());
    auto w = t.mutable_data();

    // Returns {g . v, (L(x + eps v) - L(x - eps v)) / 2eps} using the steps
    // actually representable in float.
    auto probe = [&](const std::vector<int>& v) -> std::pair<double, double> {
      double dot = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if (v[i]) w[i] = static_cast<float>(orig[i] + opt.eps * v[i]);
      const double fp = p.loss().item();
      for (std::size_t i = 0; i < n; ++i) {
        if (!v[i]) continue;
        const float up = w[i];
        w[i] = static_cast<float>(orig[i] - opt.eps * v[i]);
        const double step = (static_cast<double>(up) - w[i]) / (2.0 * opt.eps);
        dot += g[i] * step;
      }
      const double fm = p.loss().item();
      std::copy(orig.begin(), orig.end(), w.begin());
      ++r.coords;
      return {dot, (fp - fm) / (2.0 * opt.eps)};
    };

    std::vector<double> ca, cn, da, dn;
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    const std::size_t top = std::min(opt.max_coords, n);
    std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(top), idx.end(),
                      [&](std::size_t x, std::size_t y) { return std::abs(g[x]) > std::abs(g[y]); });
    std::vector<int> v(n, 0);
    for (std::size_t k = 0; k < top; ++k) {
      v[idx[k]] = 1;
      auto [a, num] = probe(v);
      v[idx[k]] = 0;
      ca.push_back(a);
      cn.push_back(num);
    }
    if (n > top) {
      std::bernoulli_distribution coin(0.5);
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      for (std::size_t d = 0; d < opt.directions; ++d) {
        std::shuffle(order.begin(), order.end(), rng);
        std::fill(v.begin(), v.end(), 0);
        for (std::size_t k = 0; k < std::min(n, opt.direction_support); ++k) v[order[k]] = coin(rng) ? 1 : -1;
        auto [a, num] = probe(v);
        da.push_back(a);
        dn.push_back(num);
      }
    }
    for (const auto& [a, num] : {std::pair{&ca, &cn}, std::pair{&da, &dn}}) {
      if (a->empty()) continue;
      const double rel = relative_error(*a, *num, opt.floor);
      if (rel > r.max_rel) {
        r.max_rel = rel;
        r.worst = in.name + (a == &ca ? " (coordinates)" : " (directions)");
      }
    }
  }
  r.pass = r.max_rel <= opt.tolerance;
  return r;
}

namespace detail {

inline Tensor leaf(Shape s, Rng& rng, float stddev = 1.0f) { return Tensor::randn(std::move(s), stddev, rng, true); }

/// sum(out * R) for a fixed random R, so every output element matters.
inline std::function<Tensor()> probe(std::function<Tensor()> f, Rng& rng) {
  const Tensor sample = f();
  Tensor R = Tensor::randn(sample.shape(), 1.0f, rng);
  return [f = std::move(f), R] { return sum(mul(f(), R)); };
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

inline ModelConfig micro_model() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 24;
  c.max_seq_len = 64;
  return c;
}

inline void rerandomize(Tensor t, float stddev, Rng& rng) {
  std::normal_distribution<float> d(0.0f, stddev);
  for (auto& v : t.mutable_data()) v = d(rng);
}

/// O(1) activations throughout, so the finite differences resolve every
/// parameter: unit-variance embeddings, gains near 1, weights N(0, 0.25).
inline void condition(const Transformer& model, Rng& rng) {
  std::normal_distribution<float> jitter(0.0f, 0.1f);
  for (auto& [n, t] : model.named_parameters()) {
    if (n.find("norm") != std::string::npos) {
      for (auto& v : Tensor(t).mutable_data()) v = 1.0f + jitter(rng);
    } else {
      rerandomize(t, n == "tok_embeddings" ? 1.0f : 0.25f, rng);
    }
  }
}

}  // namespace detail

inline std::vector<Case> op_cases() {
  using detail::leaf;
  using detail::pick;
  using detail::probe;
  std::vector<Case> c;
  c.push_back({"matmul", [](Rng& r) {
                 const auto m = pick(r, 1, 5), k = pick(r, 1, 5), n = pick(r, 1, 5);
                 Tensor a = leaf({m, k}, r), b = leaf({k, n}, r);
                 return Problem{{{"a", a}, {"b", b}}, probe([=] { return matmul(a, b); }, r)};
               }});
  c.push_back({"matmul_nt", [](Rng& r) {
                 const auto m = pick(r, 1, 5), k = pick(r, 1, 5), n = pick(r, 1, 5);
                 Tensor a = leaf({m, k}, r), b = leaf({n, k}, r);
                 return Problem{{{"a", a}, {"b", b}}, probe([=] { return matmul_nt(a, b); }, r)};
               }});
  c.push_back({"transpose", [](Rng& r) {
                 Tensor a = leaf({pick(r, 1, 5), pick(r, 1, 5)}, r);
                 return Problem{{{"a", a}}, probe([=] { return transpose(a); }, r)};
               }});
  c.push_back({"add_sub_mul", [](Rng& r) {
                 const Shape s{pick(r, 1, 4), pick(r, 1, 4)};
                 Tensor a = leaf(s, r), b = leaf(s, r), d = leaf(s, r);
                 return Problem{{{"a", a}, {"b", b}, {"d", d}}, probe([=] { return mul(sub(add(a, b), d), a); }, r)};
               }});
  c.push_back({"scale", [](Rng& r) {
                 Tensor a = leaf({pick(r, 1, 4), pick(r, 1, 4)}, r);
                 return Problem{{{"a", a}}, probe([=] { return scale(a, -1.7f); }, r)};
               }});
  c.push_back({"add_bias", [](Rng& r) {
                 const auto m = pick(r, 1, 5), n = pick(r, 1, 5);
                 Tensor a = leaf({m, n}, r), b = leaf({n}, r);
                 return Problem{{{"a", a}, {"bias", b}}, probe([=] { return add_bias(a, b); }, r)};
               }});
  c.push_back({"silu", [](Rng& r) {
                 Tensor a = leaf({pick(r, 1, 4), pick(r, 1, 6)}, r, 2.0f);
                 return Problem{{{"a", a}}, probe([=] { return silu(a); }, r)};
               }});
  c.push_back({"sqrt", [](Rng& r) {
                 Tensor a = Tensor::uniform({pick(r, 1, 4), pick(r, 1, 4)}, 0.5f, 2.0f, r, true);
                 return Problem{{{"a", a}}, probe([=] { return sqrt(a); }, r)};
               }});
  c.push_back({"sum_mean_reshape", [](Rng& r) {
                 const auto m = pick(r, 1, 4), n = pick(r, 1, 4);
                 Tensor a = leaf({m, n}, r);
                 return Problem{{{"a", a}}, [=] {
                                  Tensor x = reshape(a, {n, m});
                                  return add(sum(mul(x, x)), scale(mean(x), 3.0f));
                                }};
               }});
  c.push_back({"dropout", [](Rng& r) {
                 Tensor a = leaf({pick(r, 2, 5), pick(r, 2, 5)}, r);
                 const std::uint64_t s = r();
                 return Problem{{{"a", a}}, probe(
                                                [=] {
                                                  Rng g(s);
                                                  return dropout(a, 0.3f, g);
                                                },
                                                r)};
               }});
  c.push_back({"embedding", [](Rng& r) {
                 const auto v = pick(r, 3, 8), d = pick(r, 1, 5);
                 Tensor table = leaf({v, d}, r);
                 std::vector<int> ids(pick(r, 1, 6));
                 for (auto& i : ids) i = static_cast<int>(pick(r, 0, v - 1));
                 return Problem{{{"table", table}}, probe([=] { return embedding(table, ids); }, r)};
               }});
  c.push_back({"slice_concat", [](Rng& r) {
                 const auto m = pick(r, 2, 5), n = pick(r, 2, 5);
                 Tensor a = leaf({m, n}, r), b = leaf({m, n}, r);
                 return Problem{{{"a", a}, {"b", b}}, probe(
                                                          [=] {
                                                            Tensor x = concat_rows({slice_rows(a, 1, m - 1), b});
                                                            Tensor y = concat_cols({slice_cols(a, 0, 1), a});
                                                            return add(sum(mul(x, x)), sum(y));
                                                          },
                                                          r)};
               }});
  c.push_back({"frames", [](Rng& r) {
                 const auto k = pick(r, 1, 4), s = pick(r, 1, 3), ch = pick(r, 1, 3);
                 Tensor x = leaf({k + pick(r, 0, 8), ch}, r);
                 return Problem{{{"x", x}}, probe([=] { return frames(x, k, s); }, r)};
               }});
  c.push_back({"softmax_rows", [](Rng& r) {
                 Tensor a = leaf({pick(r, 1, 4), pick(r, 1, 6)}, r);
                 return Problem{{{"a", a}}, probe([=] { return softmax_rows(a); }, r)};
               }});
  c.push_back({"masked_softmax_rows", [](Rng& r) {
                 const auto n = pick(r, 2, 6);
                 Tensor a = leaf({n, n}, r);
                 std::vector<std::uint8_t> allow(n * n);
                 for (std::size_t i = 0; i < n; ++i)
                   for (std::size_t j = 0; j <= i; ++j) allow[i * n + j] = 1;
                 return Problem{{{"a", a}}, probe([=] { return masked_softmax_rows(a, allow); }, r)};
               }});
  c.push_back({"rmsnorm", [](Rng& r) {
                 const auto m = pick(r, 1, 4), d = pick(r, 2, 8);
                 Tensor x = leaf({m, d}, r), g = leaf({d}, r);
                 return Problem{{{"x", x}, {"gain", g}}, probe([=] { return rmsnorm(x, g, 1e-5f); }, r)};
               }});
  c.push_back({"layernorm", [](Rng& r) {
                 const auto m = pick(r, 1, 4), d = pick(r, 4, 8);
                 Tensor x = leaf({m, d}, r), g = leaf({d}, r), b = leaf({d}, r);
                 return Problem{{{"x", x}, {"gain", g}, {"bias", b}},
                                probe([=] { return layernorm(x, g, b, 1e-5f); }, r)};
               }});
  c.push_back({"rope", [](Rng& r) {
                 const auto m = pick(r, 1, 6), d = 2 * pick(r, 1, 4);
                 Tensor x = leaf({m, d}, r);
                 std::vector<std::size_t> pos(m);
                 for (auto& p : pos) p = pick(r, 0, 100);
                 return Problem{{{"x", x}}, probe([=] { return rope(x, pos, 10000.0f); }, r)};
               }});
  c.push_back({"cross_entropy", [](Rng& r) {
                 const auto m = pick(r, 1, 5), v = pick(r, 2, 7);
                 Tensor a = leaf({m, v}, r);
                 std::vector<int> tg(m);
                 std::vector<std::uint8_t> mask(m);
                 for (std::size_t i = 0; i < m; ++i) {
                   tg[i] = static_cast<int>(pick(r, 0, v - 1));
                   mask[i] = i == 0 || pick(r, 0, 1);
                 }
                 return Problem{{{"logits", a}}, [=] { return cross_entropy(a, tg, mask); }};
               }});
  return c;
}

inline std::vector<Case> composed_cases() {
  std::vector<Case> c;
  // LM loss back to the LoRA factors, with B moved off zero so both A and B
  // receive gradient.
  c.push_back({"lm_loss->lora", [](Rng& r) {
                 auto model = std::make_shared<Transformer>(Transformer::init(detail::micro_model(), r()));
                 LoraConfig lc;
                 lc.targets = {"q_proj", "k_proj", "v_proj", "o_proj"};
                 auto ads = std::make_shared<AdapterSet>(AdapterSet::create(model->config().n_layers, 16, lc, r()));
                 for (auto& [k, ad] : ads->adapters()) {
                   detail::rerandomize(ad.A, 0.25f, r);
                   detail::rerandomize(ad.B, 0.25f, r);
                 }
                 detail::condition(*model, r);
                 const std::size_t len = detail::pick(r, 3, 7);
                 std::vector<int> ids(len), tg(len);
                 for (std::size_t i = 0; i < len; ++i) {
                   ids[i] = static_cast<int>(detail::pick(r, 0, 255));
                   tg[i] = static_cast<int>(detail::pick(r, 0, 255));
                 }
                 std::vector<std::uint8_t> mask(len, 1);
                 Problem p;
                 p.inputs = ads->named_parameters();
                 p.loss = [=] { return lm_loss(model->forward(ids, ads.get()).logits, tg, mask); };
                 return p;
               }});
  // LM loss back to the base decoder weights (used by pretraining).
  c.push_back({"lm_loss->decoder", [](Rng& r) {
                 auto model = std::make_shared<Transformer>(Transformer::init(detail::micro_model(), r()));
                 model->set_trainable(true);
                 detail::condition(*model, r);
                 const std::size_t len = detail::pick(r, 3, 7);
                 std::vector<int> ids(len), tg(len);
                 for (std::size_t i = 0; i < len; ++i) {
                   ids[i] = static_cast<int>(detail::pick(r, 0, 259));
                   tg[i] = static_cast<int>(detail::pick(r, 0, 259));
                 }
                 std::vector<std::uint8_t> mask(len, 1);
                 Problem p;
                 p.inputs = model->named_parameters();
                 p.loss = [=] { return lm_loss(model->forward(ids).logits, tg, mask); };
                 return p;
               }});
  // PHQ score back through the head, the decoder, the projector and the
  // audio encoder.
  c.push_back({"phq_score->projector->encoder", [](Rng& r) {
                 auto model = std::make_shared<Transformer>(Transformer::init(detail::micro_model(), r()));
                 auto enc = std::make_shared<audio::AudioEncoder>(audio::AudioEncoder::init(audio::EncoderConfig{}, r()));
                 enc->set_trainable(true);
                 auto proj = std::make_shared<Projector>(Projector::init(enc->config().feature_dim(), 16, r()));
                 auto head = std::make_shared<RegressionHead>(RegressionHead::init(16, r()));
                 for (auto& [n, t] : proj->named_parameters()) detail::rerandomize(t, 0.3f, r);
                 for (auto& [n, t] : head->named_parameters()) detail::rerandomize(t, 0.5f, r);
                 detail::condition(*model, r);
                 audio::Waveform w;
                 w.samples.resize(detail::pick(r, 44, 90));
                 std::normal_distribution<float> nd(0.0f, 0.5f);
                 for (auto& v : w.samples) v = nd(r);
                 std::vector<int> text(detail::pick(r, 0, 4));
                 for (auto& t : text) t = static_cast<int>(detail::pick(r, 0, 255));
                 Problem p;
                 p.inputs = enc->named_parameters();
                 for (auto&& v : {proj->named_parameters(), head->named_parameters()})
                   p.inputs.insert(p.inputs.end(), v.begin(), v.end());
                 p.loss = [=] {
                   FusionInput in;
                   in.text_ids = text;
                   in.audio = proj->project(enc->extract(w));
                   in.mode = FusionMode::kTextAndAudio;
                   return predict_phq(*model, nullptr, *head, in);
                 };
                 return p;
               }});
  return c;
}

/// Runs every case for `instances` random instances each.
inline Report run_suite(const Options& opt = {}, std::function<void(const CaseResult&)> on_result = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  Report rep;
  auto cases = op_cases();
  auto comp = composed_cases();
  cases.insert(cases.end(), comp.begin(), comp.end());
  for (const auto& cs : cases) {
    for (std::size_t i = 0; i < opt.instances; ++i) {
      Rng rng = make_rng(opt.seed, "gradcheck:" + cs.name, i);
      Problem p = cs.build(rng);
      rep.results.push_back(check(cs.name, i, p, opt, rng));
      if (on_result) on_result(rep.results.back());
    }
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace phqfuse::gradcheck
