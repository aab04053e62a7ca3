// Command line front end: train a model from a JSON config, evaluate a saved
// checkpoint, run the invariant suite, or sweep carrier sizes against
// parameter budgets.
//
// Exit codes: 0 success, 1 verification failure, 2 configuration error,
// 3 data error, 4 numeric failure, 5 checkpoint error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "osm/checkpoint.hpp"
#include "osm/config.hpp"
#include "osm/training.hpp"
#include "osm/verify.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerify = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;
constexpr int kExitCheckpoint = 5;

int fail(int code, const std::string& msg) {
  std::cerr << "error: " << msg << "\n";
  return code;
}

// Relative output directories can be rerooted without touching the config,
// so tests and batch jobs stay self-contained.
std::filesystem::path resolve_output_dir(const std::string& dir) {
  std::filesystem::path p(dir);
  const char* root = std::getenv("OSM_OUTPUT_ROOT");
  if (root != nullptr && *root != '\0' && p.is_relative()) {
    return std::filesystem::path(root) / p;
  }
  return p;
}

std::string g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return std::string(buf);
}

struct LoadedRun {
  osm::RunConfig cfg;
  osm::Corpus corpus;
};

// Stages map to exit codes: a bad config never reports as a data error.
int load_run(const std::string& config_path, LoadedRun& out) {
  try {
    out.cfg = osm::load_run_config(config_path);
  } catch (const osm::InvalidInputError& e) {
    return fail(kExitConfig, e.what());
  }
  try {
    out.corpus = osm::load_corpus(out.cfg.data);
  } catch (const osm::InvalidInputError& e) {
    return fail(kExitData, e.what());
  }
  return kExitOk;
}

std::string summary_json(const osm::TrainRun& run, int64_t param_count, uint64_t seed) {
  return "{\"best_val_bpc\":" + g17(run.best_val_bpc) + ",\"test_bpc\":" + g17(run.test_bpc) +
         ",\"param_count\":" + std::to_string(param_count) + ",\"seed\":" + std::to_string(seed) +
         "}";
}

int train_into(osm::ModelVariant& mv, const osm::Corpus& corpus, const osm::TrainConfig& tc,
               std::ostream* metrics, osm::TrainRun& run) {
  try {
    run = std::visit([&](auto& p) { return osm::train_model(p, corpus, tc, metrics); }, mv);
  } catch (const osm::NumericRangeError& e) {
    return fail(kExitNumeric, e.what());
  } catch (const osm::InvalidInputError& e) {
    return fail(kExitData, e.what());
  }
  if (run.aborted_numeric) {
    return fail(kExitNumeric, "training aborted: too many consecutive non-finite steps");
  }
  if (run.best_step < 0) {
    return fail(kExitNumeric, "training never produced a finite validation loss");
  }
  return kExitOk;
}

int cmd_train(const std::string& config_path) {
  LoadedRun lr;
  if (int rc = load_run(config_path, lr); rc != kExitOk) return rc;

  const std::filesystem::path out = resolve_output_dir(lr.cfg.output_dir);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  std::ofstream metrics(out / "metrics.jsonl", std::ios::binary | std::ios::trunc);
  if (!metrics) return fail(kExitData, "cannot write to '" + (out / "metrics.jsonl").string() + "'");

  osm::Rng rng(lr.cfg.seed);
  osm::ModelVariant mv = osm::build_model(lr.cfg.model, lr.corpus.vocab_size(), rng);
  osm::TrainRun run;
  if (int rc = train_into(mv, lr.corpus, lr.cfg.train, &metrics, run); rc != kExitOk) return rc;
  metrics.close();

  const std::string meta = osm::canonical_dump(lr.cfg);
  const osm::ParamStore best = run.best_params;
  const osm::Checkpoint ck =
      osm::make_checkpoint(best, run.best_moments, static_cast<uint64_t>(run.best_step),
                           osm::fnv1a64(meta), lr.corpus.vocab, meta);
  try {
    osm::save_checkpoint(ck, (out / "ckpt.bin").string());
  } catch (const osm::InvalidInputError& e) {
    return fail(kExitData, e.what());
  }

  const int64_t params =
      std::visit([](const auto& p) { return osm::count_params(p).total; }, mv);
  const std::string summary = summary_json(run, params, lr.cfg.seed);
  std::ofstream sf(out / "summary.json", std::ios::binary | std::ios::trunc);
  sf << summary << "\n";
  sf.close();
  std::cout << summary << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& split_name) {
  osm::Checkpoint ck;
  try {
    ck = osm::load_checkpoint(ckpt_path);
  } catch (const osm::InvalidInputError& e) {
    return fail(kExitCheckpoint, e.what());
  }
  if (ck.meta.empty()) {
    return fail(kExitCheckpoint, "checkpoint carries no embedded configuration");
  }
  if (ck.config_digest != osm::fnv1a64(ck.meta)) {
    return fail(kExitCheckpoint, "checkpoint digest does not match embedded configuration");
  }
  osm::RunConfig cfg;
  try {
    cfg = osm::parse_run_config_text(ck.meta);
  } catch (const osm::InvalidInputError& e) {
    return fail(kExitCheckpoint, std::string("embedded configuration invalid: ") + e.what());
  }

  cfg.data.path = data_path;
  osm::Corpus corpus;
  try {
    corpus = osm::load_corpus(cfg.data);
  } catch (const osm::InvalidInputError& e) {
    return fail(kExitData, e.what());
  }
  if (corpus.vocab != ck.vocab) {
    return fail(kExitCheckpoint, "corpus vocabulary does not match the checkpoint");
  }

  osm::Rng rng(cfg.seed);
  osm::ModelVariant mv = osm::build_model(cfg.model, corpus.vocab_size(), rng);
  try {
    std::visit(
        [&](auto& p) {
          osm::ParamStore ps = osm::to_store(p);
          osm::AdamState st = osm::make_adam_state(ps);
          osm::restore_training(ck, ps, st);
          osm::load_from_store(p, ps);
        },
        mv);
  } catch (const osm::InvalidInputError& e) {
    return fail(kExitCheckpoint, e.what());
  }

  const osm::Split split = osm::parse_split(split_name);
  osm::EvalResult r;
  try {
    r = std::visit(
        [&](const auto& p) { return osm::evaluate_split(p, corpus, split, cfg.train.seq_len); },
        mv);
  } catch (const osm::NumericRangeError& e) {
    return fail(kExitNumeric, e.what());
  } catch (const osm::InvalidInputError& e) {
    return fail(kExitData, e.what());
  }

  const int64_t params =
      std::visit([](const auto& p) { return osm::count_params(p).total; }, mv);
  std::cout << "{\"split\":\"" << split_name << "\",\"bpc\":" << g17(r.bpc)
            << ",\"nats\":" << g17(r.nats) << ",\"chars\":" << r.chars
            << ",\"param_count\":" << params << "}\n";
  return kExitOk;
}

int cmd_verify(const std::string& level, bool corrupt_skew) {
  osm::VerifyOptions opt;
  opt.level = level == "full" ? osm::VerifyLevel::Full : osm::VerifyLevel::Fast;
  opt.corrupt_skew = corrupt_skew;
  bool all_pass = true;
  for (const osm::CheckResult& c : osm::run_verify(opt)) {
    std::cout << (c.pass ? "[PASS] " : "[FAIL] ") << c.name << " max_err=" << g17(c.max_err);
    if (!c.note.empty()) std::cout << " (" << c.note << ")";
    std::cout << "\n";
    all_pass = all_pass && c.pass;
  }
  std::cout << (all_pass ? "verify: all checks passed" : "verify: FAILURES above") << "\n";
  return all_pass ? kExitOk : kExitVerify;
}

int cmd_sweep(const std::string& config_path, const std::string& budgets_csv) {
  LoadedRun lr;
  if (int rc = load_run(config_path, lr); rc != kExitOk) return rc;

  std::vector<int64_t> budgets;
  {
    std::string tok;
    std::istringstream ss(budgets_csv);
    while (std::getline(ss, tok, ',')) {
      try {
        size_t used = 0;
        const long long v = std::stoll(tok, &used);
        if (used != tok.size() || v < 1) throw std::invalid_argument(tok);
        budgets.push_back(v);
      } catch (const std::exception&) {
        return fail(kExitConfig, "bad budget '" + tok + "': expected a positive integer");
      }
    }
  }
  if (budgets.empty()) return fail(kExitConfig, "no budgets given");

  const std::filesystem::path out = resolve_output_dir(lr.cfg.output_dir);
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  std::ofstream rows(out / "sweep.jsonl", std::ios::binary | std::ios::trunc);
  if (!rows) return fail(kExitData, "cannot write to '" + (out / "sweep.jsonl").string() + "'");

  std::cout << "budget     d     params     val_bpc      test_bpc\n";
  for (const int64_t budget : budgets) {
    const auto pick = osm::sweep_pick(lr.cfg.model, lr.corpus.vocab_size(), budget);
    if (!pick) {
      rows << "{\"budget\":" << budget
           << ",\"skipped\":true,\"note\":\"no carrier size lands near this budget\"}\n";
      std::cout << budget << "  skipped: no carrier size lands near this budget\n";
      continue;
    }
    osm::RunConfig cfg = lr.cfg;
    cfg.model.d = pick->d;
    osm::Rng rng(cfg.seed);
    osm::ModelVariant mv = osm::build_model(cfg.model, lr.corpus.vocab_size(), rng);
    osm::TrainRun run;
    if (int rc = train_into(mv, lr.corpus, cfg.train, nullptr, run); rc != kExitOk) return rc;
    rows << "{\"budget\":" << budget << ",\"d\":" << pick->d << ",\"params\":" << pick->params
         << ",\"val_bpc\":" << g17(run.best_val_bpc) << ",\"test_bpc\":" << g17(run.test_bpc)
         << "}\n";
    char line[160];
    std::snprintf(line, sizeof line, "%-9lld  %-4d  %-9lld  %-11.6f  %-11.6f\n",
                  static_cast<long long>(budget), pick->d,
                  static_cast<long long>(pick->params), run.best_val_bpc, run.test_bpc);
    std::cout << line;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"subgroup-valued sequence models"};
  app.require_subcommand(1);

  std::string config_path;
  std::string ckpt_path;
  std::string data_path;
  std::string split_name = "test";
  std::string level = "fast";
  std::string budgets;
  bool corrupt_skew = false;

  CLI::App* train = app.add_subcommand("train", "train a model from a JSON config");
  train->add_option("--config", config_path, "path to run config JSON")->required();

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a corpus split");
  eval->add_option("--ckpt", ckpt_path, "path to checkpoint file")->required();
  eval->add_option("--data", data_path, "path to corpus file")->required();
  eval->add_option("--split", split_name, "corpus split")
      ->check(CLI::IsMember({"val", "test"}));

  CLI::App* verify = app.add_subcommand("verify", "run the invariant checks");
  verify->add_option("--level", level, "fast or full")->check(CLI::IsMember({"fast", "full"}));
  verify->add_flag("--corrupt-skew", corrupt_skew,
                   "fault injection: perturb a projection to force a failure");

  CLI::App* sweep = app.add_subcommand("sweep", "train one model per parameter budget");
  sweep->add_option("--config", config_path, "path to run config JSON")->required();
  sweep->add_option("--budgets", budgets, "comma separated parameter budgets")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (train->parsed()) return cmd_train(config_path);
    if (eval->parsed()) return cmd_eval(ckpt_path, data_path, split_name);
    if (verify->parsed()) return cmd_verify(level, corrupt_skew);
    if (sweep->parsed()) return cmd_sweep(config_path, budgets);
  } catch (const std::exception& e) {
    return fail(kExitNumeric, std::string("unexpected failure: ") + e.what());
  }
  return kExitOk;
}
