#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phqfuse/model.hpp"
#include "phqfuse/trainer.hpp"
#include "oracles.hpp"

using namespace phqfuse;

namespace {

ModelConfig micro() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 24;
  c.max_seq_len = 32;
  return c;
}

void randomize(AdapterSet& set, Rng& rng, float sd) {
  std::normal_distribution<float> n(0.0f, sd);
  for (auto& [k, ad] : set.adapters()) {
    for (auto& v : ad.A.mutable_data()) v = n(rng);
    for (auto& v : ad.B.mutable_data()) v = n(rng);
  }
}

}  // namespace

TEST(LoraConfig, DefaultsAndValidation) {
  LoraConfig c;
  EXPECT_EQ(c.r, 8);
  EXPECT_EQ(c.alpha, 16.0f);
  EXPECT_FLOAT_EQ(c.dropout, 0.1f);
  EXPECT_EQ(c.scaling(), 2.0f);
  EXPECT_EQ(c.targets, (std::vector<std::string>{"q_proj", "v_proj"}));
  c.targets = {"gate_proj"};
  EXPECT_THROW(c.validate(), ConfigError);
  c = LoraConfig{};
  c.r = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(AdaptedForward, ZeroInitIsBitwiseBase) {
  Rng rng = make_rng(1, "l");
  LoraConfig cfg;
  auto ad = LoraAdapter::init(12, 10, cfg, rng);
  Tensor W = Tensor::randn({10, 12}, 0.3f, rng), x = Tensor::randn({5, 12}, 1.0f, rng);
  Tensor base = matmul_nt(x, W), y = adapted_forward(x, W, &ad);
  for (std::size_t i = 0; i < base.numel(); ++i) ASSERT_EQ(base.data()[i], y.data()[i]);
}

TEST(AdaptedForward, ShapeMismatchIsDimensionError) {
  Rng rng = make_rng(2, "l");
  auto ad = LoraAdapter::init(8, 8, LoraConfig{}, rng);
  Tensor W = Tensor::zeros({8, 6}), x = Tensor::zeros({2, 6});
  EXPECT_THROW(adapted_forward(x, W, &ad), DimensionError);
}

TEST(AdaptedForward, EvalModeIgnoresDropout) {
  Rng rng = make_rng(3, "l");
  auto ad = LoraAdapter::init(8, 8, LoraConfig{}, rng);
  for (auto& v : ad.B.mutable_data()) v = 0.5f;
  Tensor W = Tensor::randn({8, 8}, 0.3f, rng), x = Tensor::randn({3, 8}, 1.0f, rng);
  Tensor a = adapted_forward(x, W, &ad), b = adapted_forward(x, W, &ad);
  for (std::size_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a.data()[i], b.data()[i]);
  Rng drop(9);
  Tensor t = adapted_forward(x, W, &ad, AdapterMode{true, &drop});
  bool differs = false;
  for (std::size_t i = 0; i < a.numel(); ++i) differs |= a.data()[i] != t.data()[i];
  EXPECT_TRUE(differs);
}

TEST(Delta, RankAtMostR) {
  Rng rng = make_rng(4, "l");
  for (int r : {1, 4, 8}) {
    LoraConfig cfg;
    cfg.r = r;
    auto ad = LoraAdapter::init(64, 64, cfg, rng);
    std::normal_distribution<float> n(0.0f, 0.5f);
    for (auto& v : ad.B.mutable_data()) v = n(rng);
    const std::size_t rank = oracle::numerical_rank(ad.delta());
    EXPECT_LE(rank, static_cast<std::size_t>(r));
    EXPECT_EQ(rank, static_cast<std::size_t>(r));  // random factors are full rank
  }
  // the elimination oracle itself sees full rank on a random square matrix
  Tensor full = Tensor::randn({16, 16}, 1.0f, rng);
  EXPECT_EQ(oracle::numerical_rank(full), 16u);
}

TEST(Merge, ZeroBLeavesWeightAndDoubleMergeFails) {
  Rng rng = make_rng(5, "l");
  auto ad = LoraAdapter::init(6, 6, LoraConfig{}, rng);
  Tensor W = Tensor::randn({6, 6}, 0.3f, rng);
  Tensor M = merge(W, ad);
  for (std::size_t i = 0; i < W.numel(); ++i) ASSERT_EQ(M.data()[i], W.data()[i]);
  EXPECT_THROW(merge(W, ad), ContractError);
  EXPECT_THROW(adapted_forward(W, W, &ad), ContractError);
}

TEST(Merge, MergedModelMatchesUnmerged) {
  Rng rng = make_rng(6, "l");
  auto model = Transformer::init(micro(), 3);
  LoraConfig lc;
  lc.targets = {"q_proj", "k_proj", "v_proj", "o_proj"};
  auto set = AdapterSet::create(2, 16, lc, 3);
  randomize(set, rng, 0.3f);
  std::vector<int> ids{256, 10, 99, 180, 7, 42};
  auto un = model.forward(ids, &set);
  auto copy = set.clone();
  auto merged = model.merged(copy);
  auto mg = merged.forward(ids);
  double worst = 0.0;
  for (std::size_t i = 0; i < un.logits.numel(); ++i)
    worst = std::max(worst, static_cast<double>(std::abs(un.logits.data()[i] - mg.logits.data()[i])));
  EXPECT_LT(worst, 1e-5);
}

TEST(AdapterSet, ZeroInitModelEqualsBase) {
  auto model = Transformer::init(micro(), 4);
  auto set = AdapterSet::create(2, 16, LoraConfig{}, 4);
  std::vector<int> ids{256, 1, 2, 3, 200};
  auto a = model.forward(ids), b = model.forward(ids, &set);
  for (std::size_t i = 0; i < a.logits.numel(); ++i) ASSERT_EQ(a.logits.data()[i], b.logits.data()[i]);
}

TEST(TrainableParameters, MicroConfigCounts) {
  auto s = PipelineState::init(ModelConfig{}, LoraConfig{}, kDefaultSeed);
  auto ps = trainable_parameters(s, Phase::kInject);
  EXPECT_EQ(ps.size(), 16u);
  for (const auto& p : ps) {
    EXPECT_NE(p.name, "layers.0.q_proj");
    EXPECT_TRUE(p.name.ends_with(".lora_A") || p.name.ends_with(".lora_B")) << p.name;
  }
  // 2 targets per layer, each r*d_t + d_t*r
  const std::size_t d = 64, r = 8, L = 4;
  EXPECT_EQ(parameter_count(ps), 2 * L * (r * d + d * r));
  EXPECT_EQ(parameter_count(ps), 8192u);
}

TEST(TrainableParameters, PhaseTwoAddsProjectorAndHead) {
  auto s = PipelineState::init(micro(), LoraConfig{}, 1);
  auto inject = trainable_parameters(s, Phase::kInject);
  auto text = trainable_parameters(s, Phase::kText);
  auto audio = trainable_parameters(s, Phase::kAudio);
  EXPECT_EQ(text.size(), inject.size() + 2);
  EXPECT_EQ(audio.size(), inject.size() + 6);
  auto has = [](const std::vector<NamedTensor>& v, std::string_view prefix) {
    return std::any_of(v.begin(), v.end(), [&](const auto& t) { return t.name.starts_with(prefix); });
  };
  EXPECT_TRUE(has(audio, "projector."));
  EXPECT_TRUE(has(audio, "head."));
  EXPECT_FALSE(has(audio, "audio."));
  for (const auto& t : audio) EXPECT_NE(t.name, "layers.0.q_proj");
}
