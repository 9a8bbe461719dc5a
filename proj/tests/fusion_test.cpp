#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "phqfuse/fusion.hpp"
#include "phqfuse/gradcheck.hpp"

using namespace phqfuse;

namespace {

ModelConfig one_layer(std::size_t d = 64) {
  ModelConfig c;
  c.d_model = d;
  c.n_layers = 1;
  c.n_heads = 1;
  c.d_ff = 32;
  c.max_seq_len = 300;
  return c;
}

audio::AudioFeatures random_features(std::size_t s, std::size_t d, Rng& rng) {
  return {Tensor::randn({s, d}, 1.0f, rng)};
}

}  // namespace

TEST(Projector, ShapeAndZeroInput) {
  auto p = Projector::init(32, 64, 42);
  Rng rng = make_rng(1, "f");
  Tensor e = p.project(random_features(998, 32, rng));
  EXPECT_EQ(e.shape(), (Shape{998, 64}));
  Tensor z = p.project({Tensor::zeros({5, 32})});
  for (float v : z.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(p.project(random_features(3, 16, rng)), ConfigError);
}

TEST(Projector, GradientMatchesFiniteDifferences) {
  gradcheck::Options opt;
  auto cases = gradcheck::composed_cases();
  auto it = std::find_if(cases.begin(), cases.end(),
                         [](const auto& c) { return c.name.find("projector") != std::string::npos; });
  ASSERT_NE(it, cases.end());
  for (std::size_t i = 0; i < 3; ++i) {
    Rng rng = make_rng(opt.seed, "fusion_test", i);
    auto prob = it->build(rng);
    auto r = gradcheck::check(it->name, i, prob, opt, rng);
    EXPECT_TRUE(r.pass) << r.worst << " rel=" << r.max_rel;
  }
}

TEST(Assemble, Lengths) {
  auto model = Transformer::init(one_layer(), 1);
  Rng rng = make_rng(2, "f");
  FusionInput in;
  in.text_ids = std::vector<int>(10, 65);
  in.audio = Tensor::randn({20, 64}, 1.0f, rng);
  in.mode = FusionMode::kTextAndAudio;
  EXPECT_EQ(assemble(model, in).rows(), 32u);
  in.mode = FusionMode::kAudioOnly;
  EXPECT_EQ(assemble(model, in).rows(), 21u);
  in.mode = FusionMode::kTextOnly;
  EXPECT_EQ(assemble(model, in).rows(), 11u);
  EXPECT_EQ(assembled_length(10, 20, FusionMode::kTextAndAudio), 32u);
}

TEST(Assemble, TextOnlyEqualsTokenForward) {
  auto model = Transformer::init(one_layer(), 2);
  FusionInput in;
  in.text_ids = text::encode("Transcripts:hello, PHQ Score:");
  in.mode = FusionMode::kTextOnly;
  auto a = model.forward_embeddings(assemble(model, in));
  std::vector<int> ids{text::kBos};
  ids.insert(ids.end(), in.text_ids.begin(), in.text_ids.end());
  auto b = model.forward(ids);
  for (std::size_t i = 0; i < a.hidden.numel(); ++i) ASSERT_EQ(a.hidden.data()[i], b.hidden.data()[i]);
}

TEST(Assemble, MissingPartsAndOverlength) {
  auto model = Transformer::init(one_layer(), 3);
  FusionInput in;
  in.mode = FusionMode::kAudioOnly;
  EXPECT_THROW(assemble(model, in), ContractError);
  in.mode = FusionMode::kTextOnly;
  EXPECT_THROW(assemble(model, in), ContractError);
  in.mode = FusionMode::kAudioOnly;
  in.audio = Tensor::zeros({300, 64});
  EXPECT_THROW(assemble(model, in), ContractError);
}

TEST(PredictPhq, ZeroHeadReturnsBias) {
  auto model = Transformer::init(one_layer(), 4);
  auto head = RegressionHead::init(64, 4);
  for (auto& v : head.parameter("head.w")->mutable_data()) v = 0.0f;
  head.parameter("head.b")->mutable_data()[0] = 7.25f;
  Rng rng = make_rng(3, "f");
  for (int rep = 0; rep < 3; ++rep) {
    FusionInput in;
    in.audio = Tensor::randn({5 + static_cast<std::size_t>(rep), 64}, 1.0f, rng);
    EXPECT_EQ(predict_phq(model, nullptr, head, in).item(), 7.25f);
  }
}

TEST(PredictPhq, AudioOnlyIgnoresText) {
  auto model = Transformer::init(one_layer(), 5);
  auto head = RegressionHead::init(64, 5);
  Rng rng = make_rng(4, "f");
  FusionInput a;
  a.audio = Tensor::randn({6, 64}, 1.0f, rng);
  FusionInput b = a;
  b.text_ids = text::encode("anything at all");
  EXPECT_EQ(predict_phq(model, nullptr, head, a).item(), predict_phq(model, nullptr, head, b).item());
}

TEST(PredictPhq, OneFrameMatchesManualOracle) {
  const std::size_t d = 8;
  auto model = Transformer::init(one_layer(d), 6);
  auto proj = Projector::init(4, d, 6);
  auto head = RegressionHead::init(d, 6);
  Rng rng = make_rng(5, "f");
  std::normal_distribution<float> n(0.0f, 0.5f);
  for (auto* name : {"projector.w1", "projector.b1", "projector.w2", "projector.b2"})
    for (auto& v : proj.parameter(name)->mutable_data()) v = n(rng);
  for (auto& v : head.parameter("head.w")->mutable_data()) v = n(rng);
  head.parameter("head.b")->mutable_data()[0] = 1.5f;
  auto r = random_features(1, 4, rng);

  // projector by hand
  const Tensor& w1 = *proj.parameter("projector.w1");
  const Tensor& b1 = *proj.parameter("projector.b1");
  const Tensor& w2 = *proj.parameter("projector.w2");
  const Tensor& b2 = *proj.parameter("projector.b2");
  std::vector<double> hmid(d), emb(d);
  for (std::size_t o = 0; o < d; ++o) {
    double s = b1.data()[o];
    for (std::size_t k = 0; k < 4; ++k) s += static_cast<double>(w1.at(o, k)) * r.values.data()[k];
    hmid[o] = s / (1.0 + std::exp(-s));
  }
  for (std::size_t o = 0; o < d; ++o) {
    double s = b2.data()[o];
    for (std::size_t k = 0; k < d; ++k) s += w2.at(o, k) * hmid[k];
    emb[o] = s;
  }
  Tensor projected = proj.project(r);
  for (std::size_t o = 0; o < d; ++o) ASSERT_NEAR(projected.data()[o], emb[o], 1e-5);

  FusionInput in;
  in.audio = projected;
  Tensor seq = assemble(model, in);
  ASSERT_EQ(seq.rows(), 2u);
  auto hid = model.forward_embeddings(seq).hidden;
  double score = head.parameter("head.b")->data()[0];
  for (std::size_t k = 0; k < d; ++k) score += static_cast<double>(head.parameter("head.w")->data()[k]) * hid.at(1, k);
  EXPECT_NEAR(predict_phq(model, nullptr, head, in).item(), score, 1e-5);
}

TEST(ShapeChain, RandomLengths) {
  auto enc = audio::AudioEncoder::init(audio::EncoderConfig{}, 42);
  auto model = Transformer::init(one_layer(), 7);
  auto proj = Projector::init(32, 64, 7);
  auto head = RegressionHead::init(64, 7);
  Rng rng = make_rng(6, "f");
  std::uniform_int_distribution<std::size_t> frames(1, 256);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t s = frames(rng);
    audio::Waveform w;
    w.samples.assign(44 + (s - 1) * 16, 0.0f);
    for (auto& v : w.samples) v = std::uniform_real_distribution<float>(-0.5f, 0.5f)(rng);
    auto r = enc.extract(w);
    ASSERT_EQ(r.values.shape(), (Shape{s, 32}));
    Tensor e = proj.project(r);
    ASSERT_EQ(e.shape(), (Shape{s, 64}));
    FusionInput in;
    in.audio = e;
    Tensor score = predict_phq(model, nullptr, head, in);
    ASSERT_EQ(score.numel(), 1u);
    ASSERT_TRUE(std::isfinite(score.item()));
  }
}

TEST(PredictPhq, GradientReachesProjectorAndAdapters) {
  auto model = Transformer::init(one_layer(16), 8);
  auto set = AdapterSet::create(1, 16, LoraConfig{}, 8);
  auto proj = Projector::init(32, 16, 8);
  auto head = RegressionHead::init(16, 8);
  Rng rng = make_rng(7, "f");
  FusionInput in;
  in.audio = proj.project(random_features(4, 32, rng));
  backward(predict_phq(model, &set, head, in));
  auto nonzero = [](const Tensor& t) {
    return std::any_of(t.grad().begin(), t.grad().end(), [](float g) { return g != 0.0f; });
  };
  EXPECT_TRUE(nonzero(*proj.parameter("projector.w1")));
  EXPECT_TRUE(nonzero(*head.parameter("head.w")));
  // B is zero at init, so the gradient lands on B first
  EXPECT_TRUE(nonzero(set.find(0, "v_proj")->B));
}

TEST(Clamp, ReportRange) {
  EXPECT_EQ(clamp_phq(-3.0), 0.0);
  EXPECT_EQ(clamp_phq(30.0), 24.0);
  EXPECT_EQ(clamp_phq(11.5), 11.5);
}
