// phqfuse: command-line driver for the PHQ-8 scoring pipeline.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "phqfuse/phqfuse.hpp"

namespace fs = std::filesystem;
using namespace phqfuse;

namespace {

const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  1  internal error\n"
    "  2  usage: bad flags, unknown or invalid config keys\n"
    "  3  io: missing, unreadable or unwritable files, unreachable generator\n"
    "  4  format: malformed input files\n"
    "  5  contract: precondition violated (phase/dataset mismatch, shapes, lengths)\n"
    "  6  validation: generator output or judge ratings failed validation\n"
    "  7  numeric: NaN/Inf during training (last good checkpoint is kept)\n"
    "Errors are printed as one line: error: code=<kind> msg=<message>\n";

struct Globals {
  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;

  RunConfig resolve() const {
    RunConfig c = config_path ? RunConfig::load(*config_path) : RunConfig{};
    for (const auto& kv : overrides) c.apply_override(kv);
    if (seed) c.set("seed", std::to_string(*seed));
    if (threads) c.set("threads", std::to_string(*threads));
    return c;
  }
};

std::unique_ptr<kb::TextGenerator> make_generator(const std::string& kind, const RunConfig& cfg,
                                                  const std::string& ckpt) {
  if (kind == "fixture") return std::make_unique<kb::FixtureGenerator>();
  if (kind == "remote") {
    kb::RemoteConfig rc;
    rc.url = cfg.str("generator.url");
    if (rc.url.empty()) throw ConfigError("generator.url is required for the remote generator");
    rc.api_key = kb::RemoteConfig::api_key_from_env();
    rc.timeout_seconds = static_cast<int>(cfg.u64("generator.timeout"));
    return std::make_unique<kb::RemoteGenerator>(rc);
  }
  if (kind == "local") {
    if (ckpt.empty()) throw ConfigError("--ckpt is required for the local generator");
    auto st = std::make_shared<PipelineState>(load_checkpoint(ckpt));
    auto model = std::shared_ptr<const Transformer>(st, &st->model);
    auto ads = std::shared_ptr<const AdapterSet>(st, &st->adapters);
    return std::make_unique<kb::LocalModelGenerator>(model, ads);
  }
  throw ConfigError("unknown generator '" + kind + "' (expected fixture, remote or local)");
}

std::string fmt6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage multimodal PHQ-8 scoring pipeline"};
  app.footer(kExitCodes);
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config_path, "key=value run configuration file");
  app.add_option("--set", g.overrides, "override a config key (key=value), repeatable");
  app.add_option("--seed", g.seed, "global seed (default 42)");
  app.add_option("--threads", g.threads, "worker pool size");

  std::function<void()> action;

  // prep
  auto* prep = app.add_subcommand("prep", "segment transcripts and audio into five-utterance clips");
  std::string data_dir, prep_out;
  prep->add_option("--data-dir", data_dir, "corpus root with split_manifest.csv")->required();
  prep->add_option("--out", prep_out, "output directory")->required();
  prep->callback([&] {
    action = [&] {
      const auto cfg = g.resolve();
      data::PrepOptions po;
      po.threads = cfg.threads();
      const auto rep = data::run_prep(data_dir, prep_out, po);
      cfg.write_resolved(prep_out);
      for (const auto& [split, n] : rep.segments_per_split)
        std::cout << split << ": " << rep.participants_per_split.at(split) << " participants, " << n << " segments\n";
      std::cout << "segments: " << rep.total_segments << "\n";
    };
  });

  // kb
  auto* kbc = app.add_subcommand("kb", "knowledge-injection corpus stages");
  kbc->require_subcommand(1);
  auto* kb_filter = kbc->add_subcommand("filter", "keep entries whose title matches a keyword");
  std::string kb_in, kb_out, keywords;
  kb_filter->add_option("--in", kb_in, "knowledge dump (JSON lines)")->required();
  kb_filter->add_option("--out", kb_out, "filtered dump")->required();
  kb_filter->add_option("--keywords", keywords, "comma-separated keywords, '*' for prefix match");
  kb_filter->callback([&] {
    action = [&] {
      auto kws = kb::default_keywords();
      if (!keywords.empty()) {
        RunConfig tmp;
        tmp.set("lora.targets", keywords);
        kws = tmp.list("lora.targets");
      }
      const auto all = kb::read_knowledge_dump(kb_in);
      const auto kept = kb::filter_entries(all, kws);
      kb::write_knowledge_dump(kb_out, kept);
      std::cout << "kept " << kept.size() << " of " << all.size() << " entries\n";
    };
  });
  auto* kb_gen = kbc->add_subcommand("generate", "generate and validate 40 Q&A pairs per entry");
  std::string generator = "fixture", gen_ckpt;
  kb_gen->add_option("--in", kb_in, "filtered knowledge dump")->required();
  kb_gen->add_option("--out", kb_out, "Q&A corpus (JSON lines)")->required();
  kb_gen->add_option("--generator", generator, "fixture | remote | local")->capture_default_str();
  kb_gen->add_option("--ckpt", gen_ckpt, "checkpoint for the local generator");
  kb_gen->callback([&] {
    action = [&] {
      const auto cfg = g.resolve();
      auto gen = make_generator(generator, cfg, gen_ckpt);
      kb::CorpusOptions co;
      co.retries = static_cast<int>(cfg.u64("kb.retries"));
      co.max_concurrency = static_cast<unsigned>(cfg.u64("kb.max_concurrency"));
      co.sampling.temperature = cfg.real("kb.temperature");
      co.sampling.max_tokens = static_cast<int>(cfg.u64("kb.max_tokens"));
      co.sampling.seed = cfg.seed();
      const auto entries = kb::read_knowledge_dump(kb_in);
      const auto res = kb::generate_corpus(entries, *gen, co);
      kb::write_corpus(kb_out, res.pairs);
      if (fs::path(kb_out).has_parent_path()) cfg.write_resolved(fs::path(kb_out).parent_path());
      std::cout << "pairs: " << res.pairs.size() << " from " << entries.size() - res.dropped.size() << " sources\n";
      for (const auto& d : res.dropped) std::cerr << "warning: dropped source " << d << "\n";
    };
  });
  auto* kb_val = kbc->add_subcommand("validate", "check per-source category histograms");
  kb_val->add_option("--in", kb_in, "Q&A corpus")->required();
  kb_val->callback([&] {
    action = [&] {
      const auto pairs = kb::read_corpus(kb_in);
      const auto bad = kb::sources_with_bad_histogram(pairs);
      std::map<std::string, int> sources;
      for (const auto& p : pairs) sources[p.source_id]++;
      std::cout << "pairs: " << pairs.size() << " sources: " << sources.size() << "\n";
      if (!bad.empty()) {
        std::string ids;
        for (const auto& b : bad) ids += (ids.empty() ? "" : ",") + b;
        throw ValidationError("category histogram is not [10,10,10,5,5] for: " + ids);
      }
    };
  });

  // train
  auto* train = app.add_subcommand("train", "run one training phase");
  std::string phase_name, resume, train_out;
  train->add_option("--phase", phase_name, "pretrain | inject | text | audio | text_and_audio")->required();
  train->add_option("--resume", resume, "checkpoint to continue from");
  train->add_option("--out", train_out, "output directory")->required();
  train->callback([&] {
    action = [&] {
      const auto cfg = g.resolve();
      const Phase phase = parse_phase(phase_name);
      PipelineState state = resume.empty() ? PipelineState::init(cfg.model(), cfg.lora(), cfg.seed())
                                            : load_checkpoint(resume);
      TrainData td;
      if (is_lm_phase(phase)) {
        auto ds = kb::build_injection_examples(kb::read_corpus(cfg.str("paths.corpus")),
                                               state.model_config.max_seq_len);
        td.lm = std::move(ds.examples);
      } else {
        td.phq = load_split(state, cfg.str("paths.prep_dir"), "train", phase != Phase::kText);
      }
      fs::create_directories(train_out);
      TrainConfig tc = cfg.train(phase);
      tc.abort_checkpoint = fs::path(train_out) / "last_good.phqf";
      const auto res = train_phase(tc, td, state);
      save_checkpoint(state, fs::path(train_out) / "checkpoint.phqf");
      write_loss_log(fs::path(train_out) / "loss.csv", res.log);
      cfg.write_resolved(train_out);
      std::cout << "phase " << phase_name << ": " << res.log.size() << " steps, final loss "
                << (res.log.empty() ? 0.0 : res.log.back().loss) << ", skipped " << res.skipped << "\n";
    };
  });

  // predict
  auto* pred = app.add_subcommand("predict", "per-segment PHQ-8 scores for a split");
  std::string pred_ckpt, split = "test", mode_name = "audio_only", pred_out, prep_dir;
  pred->add_option("--ckpt", pred_ckpt, "checkpoint")->required();
  pred->add_option("--split", split, "train | dev | test")->capture_default_str();
  pred->add_option("--mode", mode_name, "text_only | audio_only | text_and_audio")->capture_default_str();
  pred->add_option("--prep-dir", prep_dir, "preprocessed corpus (default: paths.prep_dir)");
  pred->add_option("--out", pred_out, "predictions CSV")->required();
  pred->callback([&] {
    action = [&] {
      const auto cfg = g.resolve();
      const auto mode = parse_fusion_mode(mode_name);
      const PipelineState state = load_checkpoint(pred_ckpt);
      const fs::path pd = prep_dir.empty() ? fs::path(cfg.str("paths.prep_dir")) : fs::path(prep_dir);
      const auto examples = load_split(state, pd, split, mode != FusionMode::kTextOnly);
      const auto preds = predict_segments(state, examples, mode);
      write_segment_predictions(pred_out, preds);
      if (fs::path(pred_out).has_parent_path()) cfg.write_resolved(fs::path(pred_out).parent_path());
      std::cout << "segments: " << preds.size() << "\n";
    };
  });

  // eval
  auto* ev = app.add_subcommand("eval", "MAE/RMSE over per-participant mean scores");
  std::string ev_pred, ev_truth, ev_out;
  ev->add_option("--pred", ev_pred, "predictions CSV")->required();
  ev->add_option("--truth", ev_truth, "CSV with participant_id and phq8_score (e.g. the split manifest)")->required();
  ev->add_option("--out", ev_out, "directory for eval.csv and summary.txt");
  ev->callback([&] {
    action = [&] {
      const auto cfg = g.resolve();
      const auto recs = eval::read_predictions(ev_pred);
      auto truth = eval::read_truth(ev_truth);
      const auto rep = eval::evaluate(recs, truth);
      if (!ev_out.empty()) {
        fs::create_directories(ev_out);
        eval::write_report_csv(rep, fs::path(ev_out) / "eval.csv");
        std::ofstream(fs::path(ev_out) / "summary.txt", std::ios::binary) << eval::summary(rep);
        cfg.write_resolved(ev_out);
      }
      std::cout << eval::summary(rep);
    };
  });

  // judge
  auto* jd = app.add_subcommand("judge", "LLM-judge comparison of two checkpoints");
  std::string base_ckpt, inj_ckpt, jd_out, scorer_kind = "fixture";
  jd->add_option("--base", base_ckpt, "checkpoint without knowledge injection")->required();
  jd->add_option("--injected", inj_ckpt, "checkpoint after knowledge injection")->required();
  jd->add_option("--scorer", scorer_kind, "fixture | remote (question writer and rater)")->capture_default_str();
  jd->add_option("--out", jd_out, "output directory")->required();
  jd->callback([&] {
    action = [&] {
      const auto cfg = g.resolve();
      auto scorer = make_generator(scorer_kind, cfg, "");
      auto base = make_generator("local", cfg, base_ckpt);
      auto inj = make_generator("local", cfg, inj_ckpt);
      const auto questions = eval::generate_judge_questions(*scorer, cfg.u64("judge.questions"), cfg.seed());
      eval::JudgeOptions jo;
      jo.samples_per_question = cfg.u64("judge.samples");
      jo.max_concurrency = cfg.threads();
      jo.seed = cfg.seed();
      const auto rep = eval::judge({{"base", base.get()}, {"injected", inj.get()}}, *scorer, questions, jo);
      fs::create_directories(jd_out);
      eval::write_judge_csv(rep, fs::path(jd_out) / "judge.csv");
      std::ofstream(fs::path(jd_out) / "summary.txt", std::ios::binary) << eval::judge_summary(rep);
      cfg.write_resolved(jd_out);
      std::cout << eval::judge_summary(rep);
    };
  });

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every gradient");
  bool gc_verbose = false;
  gc->add_flag("-v,--verbose", gc_verbose, "print every instance");
  gc->callback([&] {
    action = [&] {
      const auto cfg = g.resolve();
      gradcheck::Options go;
      go.seed = cfg.seed();
      std::size_t failed = 0;
      const auto rep = gradcheck::run_suite(go, [&](const gradcheck::CaseResult& r) {
        if (!r.pass) ++failed;
        if (gc_verbose || !r.pass)
          std::cout << (r.pass ? "ok   " : "FAIL ") << r.name << " #" << r.instance << " rel=" << r.max_rel << " ("
                    << r.worst << ")\n";
      });
      std::cout << "instances: " << rep.results.size() << " failed: " << failed << " time: " << fmt6(rep.seconds)
                << "s\n";
      if (!rep.ok()) throw NumericError("gradient check failed for " + std::to_string(failed) + " instances");
    };
  });

  // fixtures
  auto* fx = app.add_subcommand("fixtures", "write a seeded synthetic corpus");
  std::string fx_out;
  std::size_t fx_n = 10, fx_utt = 0;
  fx->add_option("--out", fx_out, "output directory")->required();
  fx->add_option("--participants", fx_n, "number of participants")->capture_default_str();
  fx->add_option("--utterances", fx_utt, "participant utterances per session (0: random 8-20)");
  fx->callback([&] {
    action = [&] {
      const auto cfg = g.resolve();
      fixtures::FixtureOptions fo;
      fo.participants = fx_n;
      fo.utterances = fx_utt;
      fo.seed = cfg.seed();
      fixtures::write_corpus(fixtures::make_corpus(fo), fx_out);
      std::cout << "participants: " << fx_n << "\n";
    };
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: code=usage msg=" << e.what() << "\n";
    return static_cast<int>(ExitCode::kUsage);
  }
  try {
    if (action) action();
    return 0;
  } catch (const Error& e) {
    std::cerr << "error: code=" << e.kind() << " msg=" << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: code=internal msg=" << e.what() << "\n";
    return static_cast<int>(ExitCode::kInternal);
  }
}
