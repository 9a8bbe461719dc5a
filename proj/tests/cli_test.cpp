#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "phqfuse/phqfuse.hpp"

namespace fs = std::filesystem;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

Run cli(const std::string& args) {
  const std::string cmd = std::string(PHQFUSE_CLI) + " " + args + " 2>&1";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  while (std::size_t n = fread(buf, 1, sizeof buf, p)) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

fs::path fresh(const std::string& name) {
  auto d = fs::temp_directory_path() / "phqfuse_cli_test" / name;
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = phqfuse::csv::read_text(e.path());
  return out;
}

bool has(const std::string& hay, const std::string& needle) { return hay.find(needle) != std::string::npos; }

const char* kTiny = "--set model.d_model=16 --set model.n_layers=1 --set model.n_heads=2 --set model.d_ff=32 "
                    "--set train.max_steps=2 --set train.batch_size=2";

}  // namespace

TEST(Cli, HelpListsExitCodes) {
  auto r = cli("--help");
  EXPECT_EQ(r.code, 0);
  EXPECT_TRUE(has(r.out, "Exit codes"));
  EXPECT_TRUE(has(r.out, "7  numeric"));
}

TEST(Cli, FixturesAreSeededAndDeterministic) {
  const auto d = fresh("fx");
  ASSERT_EQ(cli("fixtures --out " + (d / "a").string() + " --participants 3 --seed 7").code, 0);
  ASSERT_EQ(cli("fixtures --out " + (d / "b").string() + " --participants 3 --seed 7").code, 0);
  ASSERT_EQ(cli("fixtures --out " + (d / "c").string() + " --participants 3 --seed 8").code, 0);
  const auto a = tree(d / "a"), b = tree(d / "b"), c = tree(d / "c");
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_TRUE(a.count("split_manifest.csv"));
  EXPECT_TRUE(a.count("300_P/300_AUDIO.wav"));
}

TEST(Cli, PrepTwelveUtterancesPrintsThreeSegments) {
  const auto d = fresh("prep12");
  ASSERT_EQ(cli("fixtures --out " + (d / "data").string() + " --participants 1 --utterances 12").code, 0);
  auto r = cli("prep --data-dir " + (d / "data").string() + " --out " + (d / "prep").string());
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(has(r.out, "segments: 3")) << r.out;
  EXPECT_TRUE(fs::exists(d / "prep" / "config.resolved"));
}

TEST(Cli, ExitCodesByErrorKind) {
  const auto d = fresh("codes");
  auto r = cli("");
  EXPECT_EQ(r.code, 2);
  r = cli("gradcheck --set model.width=3");
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(has(r.out, "error: code=config msg=")) << r.out;
  r = cli("train --phase finetune --out " + d.string());
  EXPECT_EQ(r.code, 2);
  r = cli("eval --pred " + (d / "missing.csv").string() + " --truth " + (d / "missing.csv").string());
  EXPECT_EQ(r.code, 3);
  EXPECT_TRUE(has(r.out, "error: code=io msg=")) << r.out;
  std::ofstream(d / "bad.csv") << "participant_id,segment_index,score\n300,0,abc\n";
  r = cli("eval --pred " + (d / "bad.csv").string() + " --truth " + (d / "bad.csv").string());
  EXPECT_EQ(r.code, 4);
  std::ofstream(d / "empty.jsonl") << "";
  r = cli("train --phase inject --out " + (d / "t").string() + " --set paths.corpus=" + (d / "empty.jsonl").string());
  EXPECT_EQ(r.code, 5);
  EXPECT_TRUE(has(r.out, "error: code=contract")) << r.out;
  {
    std::vector<phqfuse::kb::QAPair> pairs;
    for (int i = 0; i < 40; ++i) pairs.push_back({"q", "a", "s", i < 35 ? 1 : 5});
    phqfuse::kb::write_corpus(d / "skewed.jsonl", pairs);
  }
  r = cli("kb validate --in " + (d / "skewed.jsonl").string());
  EXPECT_EQ(r.code, 6);
  EXPECT_TRUE(has(r.out, "error: code=validation")) << r.out;
}

TEST(Cli, DivergentTrainingExitsNumericAndKeepsCheckpoint) {
  const auto d = fresh("nan");
  {
    std::vector<phqfuse::kb::QAPair> pairs{{"why?", "because.", "s", 1}, {"what?", "that.", "s", 1}};
    phqfuse::kb::write_corpus(d / "qa.jsonl", pairs);
  }
  auto r = cli(std::string("train --phase pretrain --out ") + (d / "run").string() + " " + kTiny +
               " --set train.max_steps=20 --set train.lr=1e30 --set paths.corpus=" + (d / "qa.jsonl").string());
  EXPECT_EQ(r.code, 7) << r.out;
  EXPECT_TRUE(has(r.out, "error: code=numeric")) << r.out;
  EXPECT_TRUE(fs::exists(d / "run" / "last_good.phqf"));
}

TEST(Cli, GradcheckExitsZero) {
  auto r = cli("gradcheck");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_TRUE(has(r.out, "failed: 0")) << r.out;
}

TEST(Cli, FullWorkflow) {
  const auto d = fresh("flow");
  const std::string D = d.string();
  auto ok = [&](const std::string& args) {
    auto r = cli(args);
    EXPECT_EQ(r.code, 0) << args << "\n" << r.out;
    return r;
  };
  ok("fixtures --out " + D + "/data --participants 6 --utterances 6");
  ok("prep --data-dir " + D + "/data --out " + D + "/prep --threads 2");
  auto f = ok("kb filter --in " + D + "/data/kb.jsonl --out " + D + "/kb/filtered.jsonl");
  EXPECT_TRUE(has(f.out, "kept "));
  auto g = ok("kb generate --in " + D + "/kb/filtered.jsonl --out " + D + "/kb/qa.jsonl");
  EXPECT_TRUE(has(g.out, "pairs: "));
  ok("kb validate --in " + D + "/kb/qa.jsonl");

  const std::string common = std::string(kTiny) + " --set paths.corpus=" + D + "/kb/qa.jsonl --set paths.prep_dir=" +
                             D + "/prep --set model.max_seq_len=256";
  ok("train --phase inject --out " + D + "/inject " + common);
  ok("train --phase text --resume " + D + "/inject/checkpoint.phqf --out " + D + "/text " + common);
  ok("train --phase audio --resume " + D + "/text/checkpoint.phqf --out " + D + "/audio " + common);
  for (const char* phase : {"inject", "text", "audio"}) {
    EXPECT_TRUE(fs::exists(d / phase / "config.resolved")) << phase;
    EXPECT_TRUE(fs::exists(d / phase / "loss.csv")) << phase;
  }
  EXPECT_TRUE(has(phqfuse::csv::read_text(d / "audio" / "config.resolved"), "model.d_model=16"));
  EXPECT_EQ(phqfuse::load_checkpoint(d / "audio" / "checkpoint.phqf").phases_done,
            (std::vector<std::string>{"inject", "text", "audio"}));

  ok("predict --ckpt " + D + "/audio/checkpoint.phqf --split test --mode audio_only --prep-dir " + D +
     "/prep --out " + D + "/pred/test.csv");
  auto e = ok("eval --pred " + D + "/pred/test.csv --truth " + D + "/data/split_manifest.csv --out " + D + "/eval");
  EXPECT_TRUE(has(e.out, "MAE:")) << e.out;
  EXPECT_TRUE(fs::exists(d / "eval" / "eval.csv"));

  auto j = ok("judge --base " + D + "/text/checkpoint.phqf --injected " + D + "/audio/checkpoint.phqf --out " + D +
              "/judge --set judge.questions=3 --set judge.samples=1");
  EXPECT_TRUE(has(j.out, "injected: ")) << j.out;
  EXPECT_TRUE(fs::exists(d / "judge" / "judge.csv"));
}

TEST(Cli, RemoteGeneratorNeedsUrl) {
  const auto d = fresh("remote");
  std::ofstream(d / "kb.jsonl") << R"({"source_id":"1","title":"Mood","paragraph":"p"})" << "\n";
  auto r = cli("kb generate --generator remote --in " + (d / "kb.jsonl").string() + " --out " +
               (d / "qa.jsonl").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_TRUE(has(r.out, "generator.url")) << r.out;
}
