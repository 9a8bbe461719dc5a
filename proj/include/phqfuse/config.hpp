#pragma once

// Flat key=value run configuration. Lines may carry '#' comments; unknown
// keys are rejected. Command-line overrides are applied last.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "phqfuse/data.hpp"
#include "phqfuse/error.hpp"
#include "phqfuse/lora.hpp"
#include "phqfuse/model.hpp"
#include "phqfuse/rng.hpp"
#include "phqfuse/trainer.hpp"

namespace phqfuse {

class RunConfig {
 public:
  RunConfig() : values_(defaults()) {}

  static const std::map<std::string, std::string>& defaults() {
    static const std::map<std::string, std::string> d{
        {"seed", "42"},
        {"threads", "1"},
        {"model.d_model", "64"},
        {"model.n_layers", "4"},
        {"model.n_heads", "4"},
        {"model.d_ff", "176"},
        {"model.max_seq_len", "512"},
        {"model.rope_theta", "10000"},
        {"lora.r", "8"},
        {"lora.alpha", "16"},
        {"lora.dropout", "0.1"},
        {"lora.targets", "q_proj,v_proj"},
        {"train.lr", "0.001"},
        {"train.batch_size", "8"},
        {"train.max_steps", "200"},
        {"paths.prep_dir", "prep"},
        {"paths.corpus", "qa_corpus.jsonl"},
        {"paths.out_dir", "runs"},
        {"kb.max_concurrency", "1"},
        {"kb.retries", "3"},
        {"kb.temperature", "0.8"},
        {"kb.max_tokens", "1024"},
        {"generator.url", ""},
        {"generator.timeout", "60"},
        {"judge.questions", "50"},
        {"judge.samples", "2"},
    };
    return d;
  }

  static RunConfig parse(std::string_view text, const std::string& file = "config") {
    RunConfig c;
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
      pos = nl == std::string_view::npos ? text.size() : nl + 1;
      ++line_no;
      if (const auto h = line.find('#'); h != std::string_view::npos) line = line.substr(0, h);
      line = data::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError(file + ":" + std::to_string(line_no) + ": expected key=value");
      c.set(std::string(data::trim(line.substr(0, eq))), std::string(data::trim(line.substr(eq + 1))),
            file + ":" + std::to_string(line_no));
    }
    return c;
  }

  static RunConfig load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path.string());
  }

  void set(const std::string& key, const std::string& value, const std::string& where = "override") {
    if (!values_.count(key)) throw ConfigError(where + ": unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// "key=value" form used by --set.
  void apply_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not key=value");
    set(kv.substr(0, eq), kv.substr(eq + 1));
  }

  const std::string& str(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
  }

  std::uint64_t u64(const std::string& key) const {
    const auto& s = str(key);
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError("config key '" + key + "' needs a non-negative integer, got '" + s + "'");
    return v;
  }

  double real(const std::string& key) const {
    double v = 0.0;
    if (!data::parse_double(str(key), v)) throw ConfigError("config key '" + key + "' needs a number, got '" + str(key) + "'");
    return v;
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::string_view s = str(key);
    std::size_t pos = 0;
    while (pos <= s.size()) {
      auto c = s.find(',', pos);
      auto item = data::trim(s.substr(pos, c == std::string_view::npos ? std::string_view::npos : c - pos));
      if (!item.empty()) out.emplace_back(item);
      if (c == std::string_view::npos) break;
      pos = c + 1;
    }
    return out;
  }

  ModelConfig model() const {
    ModelConfig m;
    m.d_model = u64("model.d_model");
    m.n_layers = u64("model.n_layers");
    m.n_heads = u64("model.n_heads");
    m.d_ff = u64("model.d_ff");
    m.max_seq_len = u64("model.max_seq_len");
    m.rope_theta = static_cast<float>(real("model.rope_theta"));
    m.validate();
    return m;
  }

  LoraConfig lora() const {
    LoraConfig l;
    l.r = static_cast<int>(u64("lora.r"));
    l.alpha = static_cast<float>(real("lora.alpha"));
    l.dropout = static_cast<float>(real("lora.dropout"));
    l.targets = list("lora.targets");
    l.validate();
    return l;
  }

  TrainConfig train(Phase phase) const {
    TrainConfig t;
    t.phase = phase;
    t.learning_rate = static_cast<float>(real("train.lr"));
    t.batch_size = u64("train.batch_size");
    t.max_steps = u64("train.max_steps");
    t.seed = u64("seed");
    if (t.learning_rate <= 0.0f) throw ConfigError("train.lr must be positive");
    if (t.batch_size == 0) throw ConfigError("train.batch_size must be positive");
    return t;
  }

  std::uint64_t seed() const { return u64("seed"); }
  unsigned threads() const { return static_cast<unsigned>(std::max<std::uint64_t>(1, u64("threads"))); }

  std::string resolved() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + "=" + v + "\n";
    return out;
  }

  void write_resolved(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    std::ofstream out(dir / "config.resolved", std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + (dir / "config.resolved").string());
    out << resolved();
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace phqfuse
