#include <gtest/gtest.h>

#include <filesystem>

#include "phqfuse/trainer.hpp"

using namespace phqfuse;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_ff = 32;
  c.max_seq_len = 160;
  return c;
}

fs::path tmp(const std::string& name) {
  auto d = fs::temp_directory_path() / "phqfuse_trainer_test";
  fs::create_directories(d);
  return d / name;
}

std::vector<kb::LmExample> lm_data() {
  std::vector<kb::QAPair> pairs;
  for (int i = 0; i < 6; ++i) pairs.push_back({"q" + std::to_string(i), "answer " + std::to_string(i), "s", 1});
  return kb::build_injection_examples(pairs, 160).examples;
}

std::vector<PhqExample> phq_data(const PipelineState& s, bool with_audio) {
  std::vector<PhqExample> out;
  Rng rng = make_rng(9, "trainer_test");
  std::uniform_real_distribution<float> u(-0.3f, 0.3f);
  for (int i = 0; i < 4; ++i) {
    std::optional<audio::AudioFeatures> f;
    if (with_audio) {
      audio::Waveform w;
      w.samples.resize(44 + 16 * 20);
      for (auto& v : w.samples) v = u(rng);
      f = s.encoder.extract(w);
    }
    out.push_back(make_phq_example("30" + std::to_string(i), 0, "i feel " + std::to_string(i), f,
                                   static_cast<float>(6 * i)));
  }
  return out;
}

std::vector<float> snapshot(const std::vector<NamedTensor>& ts) {
  std::vector<float> out;
  for (const auto& t : ts) out.insert(out.end(), t.tensor.data().begin(), t.tensor.data().end());
  return out;
}

}  // namespace

TEST(TextPrompt, Template) {
  EXPECT_EQ(render_text_prompt("i feel tired"), "Transcripts:i feel tired, PHQ Score:");
  EXPECT_EQ(render_text_prompt(""), "Transcripts:, PHQ Score:");
  const std::string a = render_text_prompt("x"), b = render_text_prompt("yy");
  EXPECT_EQ(a.substr(0, 12), b.substr(0, 12));
  EXPECT_EQ(a.substr(13), b.substr(14));
}

TEST(Phase, ParseAndTrainableSets) {
  EXPECT_EQ(parse_phase("text_and_audio"), Phase::kTextAndAudio);
  EXPECT_THROW(parse_phase("finetune"), ConfigError);
  auto s = PipelineState::init(ModelConfig{}, LoraConfig{}, 42);
  EXPECT_EQ(trainable_parameters(s, Phase::kInject).size(), 16u);
  EXPECT_EQ(parameter_count(trainable_parameters(s, Phase::kInject)), 8192u);
  EXPECT_EQ(trainable_parameters(s, Phase::kText).size(), 18u);
  EXPECT_EQ(trainable_parameters(s, Phase::kAudio).size(), 22u);
  EXPECT_EQ(trainable_parameters(s, Phase::kPretrain).size(), s.model.named_parameters().size());
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto s = PipelineState::init(tiny(), LoraConfig{}, 5);
  s.phases_done = {"pretrain", "inject"};
  Rng rng = make_rng(1, "trainer_test");
  for (auto& v : s.adapters.find(1, "v_proj")->B.mutable_data()) v = std::normal_distribution<float>()(rng);
  save_checkpoint(s, tmp("a.phqf"));
  auto back = load_checkpoint(tmp("a.phqf"));
  save_checkpoint(back, tmp("b.phqf"));
  EXPECT_EQ(io::read_bytes(tmp("a.phqf")), io::read_bytes(tmp("b.phqf")));
  EXPECT_EQ(back.phases_done, s.phases_done);
  EXPECT_EQ(back.model_config.d_model, 16u);
}

TEST(Checkpoint, HeaderCountMatchesScan) {
  auto s = PipelineState::init(tiny(), LoraConfig{}, 6);
  const auto bytes = serialize_checkpoint(s);
  auto u32 = [&](std::size_t off) {
    return static_cast<std::uint32_t>(bytes[off]) | static_cast<std::uint32_t>(bytes[off + 1]) << 8 |
           static_cast<std::uint32_t>(bytes[off + 2]) << 16 | static_cast<std::uint32_t>(bytes[off + 3]) << 24;
  };
  ASSERT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "PHQF");
  EXPECT_EQ(u32(4), 1u);
  const std::uint32_t header_count = u32(8);
  std::size_t off = 16 + u32(12), scanned = 0;
  std::vector<std::string> names;
  while (off < bytes.size()) {
    const auto nlen = u32(off);
    names.emplace_back(bytes.begin() + static_cast<std::ptrdiff_t>(off + 4),
                       bytes.begin() + static_cast<std::ptrdiff_t>(off + 4 + nlen));
    off += 4 + nlen;
    EXPECT_EQ(u32(off), 1u);  // f32
    const auto rank = u32(off + 4);
    std::size_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) numel *= u32(off + 8 + 4 * r);
    off += 8 + 4 * rank + 4 * numel;
    ++scanned;
  }
  EXPECT_EQ(off, bytes.size());
  EXPECT_EQ(scanned, header_count);
  EXPECT_EQ(scanned, s.all_tensors().size());
  EXPECT_TRUE(std::is_sorted(names.begin(), names.end()));
}

TEST(Checkpoint, CorruptionIsFormatError) {
  auto s = PipelineState::init(tiny(), LoraConfig{}, 7);
  auto bytes = serialize_checkpoint(s);
  auto flipped = bytes;
  flipped[0] = 'X';
  io::write_bytes(tmp("bad.phqf"), flipped);
  EXPECT_THROW(load_checkpoint(tmp("bad.phqf")), FormatError);
  auto cut = bytes;
  cut.resize(cut.size() - 3);
  io::write_bytes(tmp("cut.phqf"), cut);
  EXPECT_THROW(load_checkpoint(tmp("cut.phqf")), FormatError);
  EXPECT_THROW(load_checkpoint(tmp("does_not_exist.phqf")), IoError);
}

TEST(Train, InjectKeepsBaseFrozenAndMovesAdapters) {
  auto s = PipelineState::init(tiny(), LoraConfig{}, 8);
  const auto base = snapshot(s.model.named_parameters());
  const auto head = snapshot(s.head.named_parameters());
  TrainConfig cfg;
  cfg.phase = Phase::kInject;
  cfg.max_steps = 5;
  cfg.batch_size = 2;
  TrainData data{lm_data(), {}};
  auto res = train_phase(cfg, data, s);
  EXPECT_GT(res.first_grad_norm, 0.0);
  EXPECT_EQ(res.log.size(), 5u);
  EXPECT_EQ(snapshot(s.model.named_parameters()), base);
  EXPECT_EQ(snapshot(s.head.named_parameters()), head);
  const auto& B = s.adapters.find(0, "q_proj")->B;
  EXPECT_TRUE(std::any_of(B.data().begin(), B.data().end(), [](float v) { return v != 0.0f; }));
  EXPECT_EQ(s.phases_done.back(), "inject");
}

TEST(Train, AudioPhaseTouchesOnlyItsSet) {
  auto s = PipelineState::init(tiny(), LoraConfig{}, 9);
  const auto base = snapshot(s.model.named_parameters());
  const auto enc = snapshot(s.encoder.named_parameters());
  const auto proj = snapshot(s.projector.named_parameters());
  TrainConfig cfg;
  cfg.phase = Phase::kAudio;
  cfg.max_steps = 3;
  cfg.batch_size = 2;
  TrainData data{{}, phq_data(s, true)};
  auto res = train_phase(cfg, data, s);
  EXPECT_GT(res.first_grad_norm, 0.0);
  EXPECT_EQ(snapshot(s.model.named_parameters()), base);
  EXPECT_EQ(snapshot(s.encoder.named_parameters()), enc);
  EXPECT_NE(snapshot(s.projector.named_parameters()), proj);
}

TEST(Train, LossTrajectoryIsDeterministic) {
  auto mse = [](const PipelineState& s, const std::vector<PhqExample>& data) {
    double e = 0.0;
    auto p = predict_segments(s, data, FusionMode::kTextOnly);
    for (std::size_t i = 0; i < p.size(); ++i) e += (p[i].score - data[i].label) * (p[i].score - data[i].label);
    return e / static_cast<double>(p.size());
  };
  auto run = [&](double* before, double* after) {
    auto s = PipelineState::init(tiny(), LoraConfig{}, 10);
    TrainConfig cfg;
    cfg.phase = Phase::kText;
    cfg.max_steps = 50;
    cfg.batch_size = 2;
    cfg.learning_rate = 1e-2f;
    TrainData data{{}, phq_data(s, false)};
    *before = mse(s, data.phq);
    std::vector<float> losses;
    for (const auto& e : train_phase(cfg, data, s).log) losses.push_back(e.loss);
    *after = mse(s, data.phq);
    return losses;
  };
  double b0, a0, b1, a1;
  const auto a = run(&b0, &a0), b = run(&b1, &a1);
  ASSERT_EQ(a.size(), 50u);
  EXPECT_EQ(a, b);
  EXPECT_EQ(a0, a1);
  EXPECT_LT(a0, b0);
}

TEST(Train, ContractErrors) {
  auto s = PipelineState::init(tiny(), LoraConfig{}, 11);
  TrainConfig cfg;
  cfg.phase = Phase::kInject;
  EXPECT_THROW(train_phase(cfg, TrainData{}, s), ContractError);
  cfg.phase = Phase::kText;
  EXPECT_THROW(train_phase(cfg, TrainData{}, s), ContractError);
  cfg.phase = Phase::kAudio;
  EXPECT_THROW(train_phase(cfg, TrainData{{}, phq_data(s, false)}, s), ContractError);
  cfg.batch_size = 0;
  EXPECT_THROW(train_phase(cfg, TrainData{{}, phq_data(s, true)}, s), ConfigError);
}

TEST(Train, NonFiniteLossAbortsWithLastGoodCheckpoint) {
  auto s = PipelineState::init(tiny(), LoraConfig{}, 12);
  auto data = phq_data(s, false);
  for (auto& ex : data) ex.label = 3e38f;  // squared error overflows
  TrainConfig cfg;
  cfg.phase = Phase::kText;
  cfg.max_steps = 3;
  cfg.abort_checkpoint = tmp("last_good.phqf");
  fs::remove(cfg.abort_checkpoint);
  const auto before = serialize_checkpoint(s);
  try {
    train_phase(cfg, TrainData{{}, data}, s);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos) << e.what();
  }
  ASSERT_TRUE(fs::exists(cfg.abort_checkpoint));
  EXPECT_EQ(io::read_bytes(cfg.abort_checkpoint), before);
}

TEST(Train, OverlengthExamplesSkipped) {
  auto s = PipelineState::init(tiny(), LoraConfig{}, 13);
  auto data = phq_data(s, false);
  data.push_back(make_phq_example("399", 0, std::string(400, 'x'), std::nullopt, 1.0f));
  TrainConfig cfg;
  cfg.phase = Phase::kText;
  cfg.max_steps = 1;
  EXPECT_EQ(train_phase(cfg, TrainData{{}, data}, s).skipped, 1u);
}

TEST(LossLog, Format) {
  write_loss_log(tmp("loss.csv"), {{1, Phase::kInject, 0.5f}, {2, Phase::kInject, 0.25f}});
  std::ifstream in(tmp("loss.csv"));
  std::string all((std::istreambuf_iterator<char>(in)), {});
  EXPECT_EQ(all, "step,phase,loss\n1,inject,0.5\n2,inject,0.25\n");
}

TEST(Predict, EvalModeIsDeterministic) {
  auto s = PipelineState::init(tiny(), LoraConfig{}, 14);
  auto data = phq_data(s, true);
  auto a = predict_segments(s, data, FusionMode::kTextAndAudio);
  auto b = predict_segments(s, data, FusionMode::kTextAndAudio);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].score, b[i].score);
}
