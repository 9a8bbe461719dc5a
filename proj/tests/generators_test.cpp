#include <gtest/gtest.h>

#include <atomic>
#include <mutex>
#include <thread>

#include "phqfuse/generators.hpp"

using namespace phqfuse;
using namespace phqfuse::kb;

namespace {

/// Local HTTP endpoint that replays scripted statuses, then answers 200.
class ScriptedServer {
 public:
  explicit ScriptedServer(std::vector<int> statuses) : statuses_(std::move(statuses)) {
    srv_.Post("/v1/generate", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard<std::mutex> lock(mu_);
      auth_ = req.get_header_value("Authorization");
      body_ = req.body;
      const std::size_t n = hits_++;
      if (n < statuses_.size()) {
        res.status = statuses_[n];
        res.set_content("{}", "application/json");
        return;
      }
      res.set_content(reply_, "application/json");
    });
    port_ = srv_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { srv_.listen_after_bind(); });
    srv_.wait_until_ready();
  }
  ~ScriptedServer() {
    srv_.stop();
    thread_.join();
  }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + "/v1/generate"; }
  std::size_t hits() const { return hits_; }
  std::string auth() {
    std::lock_guard<std::mutex> lock(mu_);
    return auth_;
  }
  std::string body() {
    std::lock_guard<std::mutex> lock(mu_);
    return body_;
  }
  std::string reply_ = R"({"text": "generated"})";

 private:
  httplib::Server srv_;
  std::thread thread_;
  int port_ = 0;
  std::vector<int> statuses_;
  std::atomic<std::size_t> hits_{0};
  std::mutex mu_;
  std::string auth_, body_;
};

RemoteConfig config_for(const ScriptedServer& s) {
  RemoteConfig c;
  c.url = s.url();
  c.api_key = "test-key";
  c.timeout_seconds = 5;
  c.backoff_ms = 1;
  return c;
}

}  // namespace

TEST(Remote, SendsBearerAndJsonBody) {
  ScriptedServer s({});
  RemoteGenerator g(config_for(s));
  SamplingParams p;
  p.max_tokens = 77;
  p.temperature = 0.5;
  EXPECT_EQ(g.generate("hello \"world\"", p), "generated");
  EXPECT_EQ(s.auth(), "Bearer test-key");
  auto j = nlohmann::json::parse(s.body());
  EXPECT_EQ(j["prompt"], "hello \"world\"");
  EXPECT_EQ(j["max_tokens"], 77);
  EXPECT_DOUBLE_EQ(j["temperature"].get<double>(), 0.5);
}

TEST(Remote, RetriesTransientStatuses) {
  ScriptedServer s({429, 503, 500});
  RemoteGenerator g(config_for(s));
  EXPECT_EQ(g.generate("p", {}), "generated");
  EXPECT_EQ(s.hits(), 4u);
}

TEST(Remote, GivesUpAfterMaxRetries) {
  ScriptedServer s({503, 503, 503, 503, 503});
  auto cfg = config_for(s);
  cfg.max_retries = 2;
  RemoteGenerator g(cfg);
  EXPECT_THROW(g.generate("p", {}), IoError);
  EXPECT_EQ(s.hits(), 3u);
}

TEST(Remote, ClientErrorsFailImmediately) {
  ScriptedServer s({401});
  RemoteGenerator g(config_for(s));
  EXPECT_THROW(g.generate("p", {}), IoError);
  EXPECT_EQ(s.hits(), 1u);
}

TEST(Remote, MalformedReplyIsFormatError) {
  ScriptedServer s({});
  s.reply_ = "not json";
  RemoteGenerator g(config_for(s));
  EXPECT_THROW(g.generate("p", {}), FormatError);
  s.reply_ = R"({"content": "x"})";
  EXPECT_THROW(g.generate("p", {}), FormatError);
}

TEST(Remote, UnreachableAndBadUrl) {
  RemoteConfig c;
  c.url = "http://127.0.0.1:1/x";
  c.max_retries = 1;
  c.backoff_ms = 1;
  c.timeout_seconds = 2;
  EXPECT_THROW(RemoteGenerator(c).generate("p", {}), IoError);
  c.url = "ftp://nowhere";
  EXPECT_THROW(RemoteGenerator{c}, ConfigError);
}

TEST(Fixture, PureAndFormatted) {
  FixtureGenerator g;
  const std::string prompt = render_generation_prompt({"e", "Mood", "Persistent sadness. More."});
  const auto a = g.generate(prompt, {}), b = g.generate(prompt, {});
  EXPECT_EQ(a, b);
  EXPECT_EQ(parse_qa_response(a, "e").size(), 40u);
  const auto qs = g.generate(render_judge_question_prompt(7), {});
  EXPECT_NE(qs.find("7. "), std::string::npos);
  EXPECT_EQ(qs.find("8. "), std::string::npos);
  const int r = std::stoi(g.generate(render_rating_prompt("q", "r"), {}));
  EXPECT_GE(r, 0);
  EXPECT_LE(r, 10);
}

TEST(Local, DeterministicPerSeedAndBounded) {
  ModelConfig mc;
  mc.d_model = 16;
  mc.n_layers = 1;
  mc.n_heads = 2;
  mc.d_ff = 32;
  mc.max_seq_len = 64;
  auto model = std::make_shared<const Transformer>(Transformer::init(mc, 3));
  LocalModelGenerator g(model, nullptr);
  SamplingParams p;
  p.max_tokens = 20;
  const std::string long_prompt(200, 'x');
  const auto a = g.generate(long_prompt, p), b = g.generate(long_prompt, p);
  EXPECT_EQ(a, b);
  EXPECT_LE(a.size(), 20u);
  p.seed = 7;
  p.temperature = 1.5;
  (void)g.generate("short", p);
}
