#pragma once

// TextGenerator implementations: a pure fixture stub, an HTTP client for a
// remote completion endpoint, and sampling from a local micro model.

#include <chrono>
#include <cstdlib>
#include <memory>
#include <regex>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "phqfuse/error.hpp"
#include "phqfuse/knowledge.hpp"
#include "phqfuse/model.hpp"
#include "phqfuse/rng.hpp"
#include "phqfuse/text_codec.hpp"

namespace phqfuse::kb {

/// Deterministic, pure stand-in generator. It recognises the three prompt
/// families used by the pipeline and answers each in the expected format:
/// 40 Q&A pairs, a numbered question list, or a 0-10 rating.
class FixtureGenerator : public TextGenerator {
 public:
  std::string generate(const std::string& prompt, const SamplingParams& params) const override {
    const std::uint64_t h = splitmix64(fnv1a(prompt) ^ params.seed);
    if (prompt.rfind("Construct Q&A sets", 0) == 0) return qa_response(prompt);
    if (prompt.rfind("Regard yourself as a teacher", 0) == 0) return question_list(prompt);
    if (prompt.rfind("Rate the following response", 0) == 0) return std::to_string(h % 11);
    return "Response " + std::to_string(h % 1000) + ": talk with a clinician about persistent low mood.";
  }

 private:
  static std::string qa_response(const std::string& prompt) {
    const auto at = prompt.find("[paragraph]:\n");
    const std::string para = at == std::string::npos ? prompt : prompt.substr(at + 13);
    const std::string topic = para.substr(0, std::min<std::size_t>(para.find_first_of(".\n"), 48));
    static const char* kinds[5] = {"definition", "why", "phenomena", "extended", "critical"};
    std::string out = "Here are the Q&A sets.\n";
    std::size_t n = 0;
    for (int c = 0; c < 5; ++c) {
      for (int i = 0; i < kCategoryCounts[c]; ++i, ++n) {
        out += "question: Q" + std::to_string(n + 1) + " (" + kinds[c] + ") about " + topic + "?\n";
        out += "answer: A" + std::to_string(n + 1) + " on " + kinds[c] + " of " + topic + ".\n";
      }
    }
    return out;
  }

  static std::string question_list(const std::string& prompt) {
    std::smatch m;
    static const std::regex re("Generate ([0-9]+) specific questions");
    std::size_t n = 50;
    if (std::regex_search(prompt, m, re)) n = std::stoul(m[1]);
    std::string out = "Sure, here are the questions:\n";
    for (std::size_t i = 1; i <= n; ++i)
      out += std::to_string(i) + ". How would you assess depressive symptom number " + std::to_string(i) + "?\n";
    return out;
  }
};

struct RemoteConfig {
  std::string url;  // e.g. http://host:8080/v1/generate
  std::string api_key;  // sent as "Authorization: Bearer <key>"
  int timeout_seconds = 60;
  int max_retries = 3;
  int backoff_ms = 500;  // doubled after each failed attempt

  static std::string api_key_from_env() {
    const char* k = std::getenv("PHQFUSE_API_KEY");
    return k ? k : "";
  }
};

/// POST {prompt, max_tokens, temperature} as JSON, read the "text" field of
/// the JSON reply. Transport errors, 429 and 5xx are retried with exponential
/// backoff; any other status fails immediately.
class RemoteGenerator : public TextGenerator {
 public:
  explicit RemoteGenerator(RemoteConfig cfg) : cfg_(std::move(cfg)) {
    static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(cfg_.url, m, re)) throw ConfigError("invalid generator url '" + cfg_.url + "'");
    origin_ = m[1];
    path_ = m[2].matched ? std::string(m[2]) : "/";
  }

  std::string generate(const std::string& prompt, const SamplingParams& params) const override {
    httplib::Client cli(origin_);
    cli.set_connection_timeout(cfg_.timeout_seconds, 0);
    cli.set_read_timeout(cfg_.timeout_seconds, 0);
    cli.set_write_timeout(cfg_.timeout_seconds, 0);
    httplib::Headers headers;
    if (!cfg_.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg_.api_key);
    const nlohmann::json body{{"prompt", prompt}, {"max_tokens", params.max_tokens}, {"temperature", params.temperature}};
    const std::string payload = body.dump();

    std::string last_error;
    int delay = cfg_.backoff_ms;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(delay));
        delay *= 2;
      }
      auto res = cli.Post(path_, headers, payload, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) throw IoError("generator returned HTTP " + std::to_string(res->status));
      try {
        const auto j = nlohmann::json::parse(res->body);
        if (!j.contains("text") || !j["text"].is_string()) throw FormatError("generator reply has no 'text' field");
        return j["text"].get<std::string>();
      } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("generator reply is not JSON: ") + e.what());
      }
    }
    throw IoError("generator unreachable after " + std::to_string(cfg_.max_retries + 1) + " attempts (" +
                  last_error + ")");
  }

 private:
  RemoteConfig cfg_;
  std::string origin_, path_;
};

/// Samples from a local decoder (optionally with adapters). The prompt is
/// left-truncated so that prompt plus continuation fits the context window.
class LocalModelGenerator : public TextGenerator {
 public:
  LocalModelGenerator(std::shared_ptr<const Transformer> model, std::shared_ptr<const AdapterSet> adapters)
      : model_(std::move(model)), adapters_(std::move(adapters)) {}

  std::string generate(const std::string& prompt, const SamplingParams& params) const override {
    const std::size_t ctx = model_->config().max_seq_len;
    const std::size_t budget = std::min<std::size_t>(static_cast<std::size_t>(std::max(params.max_tokens, 1)), ctx - 1);
    std::vector<int> ids = text::encode(prompt, false, false);
    const std::size_t keep = ctx - budget - 1;
    if (ids.size() > keep) ids.erase(ids.begin(), ids.end() - static_cast<std::ptrdiff_t>(keep));
    ids.insert(ids.begin(), text::kBos);
    Rng rng(splitmix64(params.seed ^ fnv1a(prompt)));
    const auto out = generate_tokens(*model_, adapters_.get(), std::move(ids), budget,
                                     static_cast<float>(params.temperature), rng);
    return text::decode(out);
  }

 private:
  std::shared_ptr<const Transformer> model_;
  std::shared_ptr<const AdapterSet> adapters_;
};

}  // namespace phqfuse::kb
