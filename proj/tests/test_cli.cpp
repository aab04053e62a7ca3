#include <catch2/catch_amalgamated.hpp>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

#include "osm/config.hpp"

// Drives the installed binary end to end through popen. OSM_CLI_PATH is
// injected by the build so the tests always exercise the matching build.

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CmdResult {
  int exit_code = -1;
  std::string out;  // stdout and stderr interleaved
};

CmdResult run_cmd(const std::string& cmd) {
  const std::string full = cmd + " 2>&1";
  FILE* pipe = popen(full.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  while (true) {
    const size_t n = fread(buf, 1, sizeof buf, pipe);
    if (n == 0) break;
    out.append(buf, n);
  }
  const int status = pclose(pipe);
  CmdResult r;
  r.out = out;
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string cli() { return std::string(OSM_CLI_PATH); }

fs::path workspace(const std::string& tag) {
  const fs::path dir = fs::temp_directory_path() / "osm_cli_test" / tag;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& p, const std::string& body) {
  std::ofstream out(p, std::ios::binary);
  out << body;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(static_cast<bool>(in));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string corpus_ab(int pairs = 4000) {
  std::string s;
  s.reserve(2 * static_cast<size_t>(pairs));
  for (int i = 0; i < pairs; ++i) s += "ab";
  return s;
}

std::string rnn_config(const std::string& data_path, const std::string& output_dir,
                       int max_steps = 40, double lr = 1e-3) {
  json j;
  j["model"] = {{"kind", "osm-rnn"}, {"family", "so"}, {"d", 3}, {"mixing", "linear"}};
  j["train"] = {{"max_epochs", 3}, {"batch_size", 8}, {"seq_len", 16}, {"max_steps", max_steps},
                {"lr", lr}};
  j["data"] = {{"path", data_path}};
  j["output_dir"] = output_dir;
  j["seed"] = 7;
  return j.dump();
}

std::string last_line(const std::string& text) {
  std::istringstream ss(text);
  std::string line, last;
  while (std::getline(ss, line)) {
    if (!line.empty()) last = line;
  }
  return last;
}

// Metric rows differ between identical runs only in measured wall time.
std::string strip_wallclock(const std::string& text) {
  std::istringstream ss(text);
  std::string line, out;
  while (std::getline(ss, line)) {
    const size_t at = line.find("\"wallclock_s\":");
    if (at != std::string::npos) {
      const size_t comma = line.find(',', at);
      line.erase(at, comma == std::string::npos ? std::string::npos : comma - at + 1);
    }
    out += line;
    out += '\n';
  }
  return out;
}

CmdResult train_in(const fs::path& ws, const std::string& run_name, int max_steps = 40) {
  write_file(ws / "corpus.txt", corpus_ab());
  write_file(ws / "run.json", rnn_config((ws / "corpus.txt").string(), run_name, max_steps));
  return run_cmd("OSM_OUTPUT_ROOT=" + ws.string() + " " + cli() + " train --config " +
                 (ws / "run.json").string());
}

}  // namespace

TEST_CASE("train writes artifacts and prints a summary") {
  const fs::path ws = workspace("train_basic");
  const CmdResult r = train_in(ws, "run_a");
  INFO(r.out);
  REQUIRE(r.exit_code == 0);

  // The relative output directory lands under OSM_OUTPUT_ROOT.
  REQUIRE(fs::exists(ws / "run_a" / "metrics.jsonl"));
  REQUIRE(fs::exists(ws / "run_a" / "ckpt.bin"));
  REQUIRE(fs::exists(ws / "run_a" / "summary.json"));

  const std::string summary_line = last_line(r.out);
  REQUIRE(read_file(ws / "run_a" / "summary.json") == summary_line + "\n");

  const json s = json::parse(summary_line);
  REQUIRE(s.size() == 4);
  REQUIRE(s.contains("best_val_bpc"));
  REQUIRE(s.contains("test_bpc"));
  REQUIRE(s["seed"] == 7);
  const osm::RunConfig cfg =
      osm::parse_run_config_text(read_file(ws / "run.json"));
  REQUIRE(s["param_count"] ==
          osm::model_param_count(cfg.model, 2).total);
  REQUIRE(std::isfinite(s["best_val_bpc"].get<double>()));

  // Every metric row is a JSON object with the full field set.
  std::istringstream ms(read_file(ws / "run_a" / "metrics.jsonl"));
  std::string line;
  int rows = 0;
  while (std::getline(ms, line)) {
    const json row = json::parse(line);
    REQUIRE(row.size() == 7);
    for (const char* k :
         {"epoch", "step", "train_bpc", "val_bpc", "wallclock_s", "grad_norm", "drift"}) {
      REQUIRE(row.contains(k));
    }
    ++rows;
  }
  REQUIRE(rows >= 1);
}

TEST_CASE("training reruns are byte identical except wall time") {
  // One corpus and one config; only the output root differs between runs,
  // and the output root is not part of the configuration.
  const fs::path ws = workspace("repro");
  write_file(ws / "corpus.txt", corpus_ab());
  write_file(ws / "run.json", rnn_config((ws / "corpus.txt").string(), "run"));
  for (const char* root : {"r1", "r2"}) {
    const CmdResult r = run_cmd("OSM_OUTPUT_ROOT=" + (ws / root).string() + " " + cli() +
                                " train --config " + (ws / "run.json").string());
    INFO(r.out);
    REQUIRE(r.exit_code == 0);
  }

  const bool summary_same =
      read_file(ws / "r1" / "run" / "summary.json") == read_file(ws / "r2" / "run" / "summary.json");
  REQUIRE(summary_same);
  const bool metrics_same = strip_wallclock(read_file(ws / "r1" / "run" / "metrics.jsonl")) ==
                            strip_wallclock(read_file(ws / "r2" / "run" / "metrics.jsonl"));
  REQUIRE(metrics_same);
  const bool ckpt_same =
      read_file(ws / "r1" / "run" / "ckpt.bin") == read_file(ws / "r2" / "run" / "ckpt.bin");
  REQUIRE(ckpt_same);
}

TEST_CASE("config and data errors use distinct exit codes") {
  const fs::path ws = workspace("errors");
  write_file(ws / "corpus.txt", corpus_ab(200));

  write_file(ws / "bad_key.json",
             R"({"model": {"kind": "osm-rnn", "famly": "so", "d": 3},
                 "data": {"path": ")" +
                 (ws / "corpus.txt").string() + R"("}})");
  CmdResult r = run_cmd(cli() + " train --config " + (ws / "bad_key.json").string());
  REQUIRE(r.exit_code == 2);
  REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("model.famly"));

  write_file(ws / "bad_family.json",
             R"({"model": {"kind": "osm-rnn", "family": "qq", "d": 3},
                 "data": {"path": ")" +
                 (ws / "corpus.txt").string() + R"("}})");
  r = run_cmd(cli() + " train --config " + (ws / "bad_family.json").string());
  REQUIRE(r.exit_code == 2);
  REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("model.family"));

  r = run_cmd(cli() + " train --config " + (ws / "no_such.json").string());
  REQUIRE(r.exit_code == 2);

  write_file(ws / "no_corpus.json",
             R"({"model": {"kind": "osm-rnn", "family": "so", "d": 3},
                 "data": {"path": ")" +
                 (ws / "missing.txt").string() + R"("}})");
  r = run_cmd(cli() + " train --config " + (ws / "no_corpus.json").string());
  REQUIRE(r.exit_code == 3);

  // Flag misuse is a configuration error too.
  REQUIRE(run_cmd(cli() + " train").exit_code == 2);
  REQUIRE(run_cmd(cli() + " frobnicate").exit_code == 2);
  REQUIRE(run_cmd(cli() + " eval --ckpt x --data y --split train").exit_code == 2);
}

TEST_CASE("numeric collapse during training exits 4") {
  const fs::path ws = workspace("numeric");
  write_file(ws / "corpus.txt", corpus_ab(500));
  write_file(ws / "run.json",
             rnn_config((ws / "corpus.txt").string(), (ws / "out").string(), 15, 1e308));
  const CmdResult r = run_cmd(cli() + " train --config " + (ws / "run.json").string());
  INFO(r.out);
  REQUIRE(r.exit_code == 4);
}

TEST_CASE("eval reproduces training losses bit for bit") {
  const fs::path ws = workspace("eval_exact");
  REQUIRE(train_in(ws, "run").exit_code == 0);
  const json summary = json::parse(read_file(ws / "run" / "summary.json"));

  const std::string ckpt = (ws / "run" / "ckpt.bin").string();
  const std::string data = (ws / "corpus.txt").string();

  const CmdResult test1 = run_cmd(cli() + " eval --ckpt " + ckpt + " --data " + data +
                                  " --split test");
  INFO(test1.out);
  REQUIRE(test1.exit_code == 0);
  const json et = json::parse(last_line(test1.out));
  REQUIRE(et["split"] == "test");
  REQUIRE(et["bpc"].get<double>() == summary["test_bpc"].get<double>());
  REQUIRE(et["param_count"] == summary["param_count"]);

  // The model ends training holding its best parameters, so the validation
  // score is reproducible the same way.
  const CmdResult val = run_cmd(cli() + " eval --ckpt " + ckpt + " --data " + data +
                                " --split val");
  REQUIRE(val.exit_code == 0);
  const json ev = json::parse(last_line(val.out));
  REQUIRE(ev["bpc"].get<double>() == summary["best_val_bpc"].get<double>());

  const CmdResult test2 = run_cmd(cli() + " eval --ckpt " + ckpt + " --data " + data +
                                  " --split test");
  REQUIRE(test2.out == test1.out);
}

TEST_CASE("checkpoint problems exit 5") {
  const fs::path ws = workspace("ckpt_errors");
  REQUIRE(train_in(ws, "run").exit_code == 0);
  const std::string data = (ws / "corpus.txt").string();

  const std::string full = read_file(ws / "run" / "ckpt.bin");
  write_file(ws / "trunc.bin", full.substr(0, full.size() / 2));
  CmdResult r = run_cmd(cli() + " eval --ckpt " + (ws / "trunc.bin").string() + " --data " +
                        data + " --split test");
  REQUIRE(r.exit_code == 5);

  r = run_cmd(cli() + " eval --ckpt " + (ws / "run" / "summary.json").string() + " --data " +
              data + " --split test");
  REQUIRE(r.exit_code == 5);

  // A corpus with a different byte vocabulary cannot match the checkpoint.
  write_file(ws / "other.txt", std::string(600, 'x') + corpus_ab(300));
  r = run_cmd(cli() + " eval --ckpt " + (ws / "run" / "ckpt.bin").string() + " --data " +
              (ws / "other.txt").string() + " --split test");
  INFO(r.out);
  REQUIRE(r.exit_code == 5);
  REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("vocabulary"));
}

TEST_CASE("verify reports each check and honors the fault hook") {
  CmdResult fast = run_cmd(cli() + " verify --level fast");
  INFO(fast.out);
  REQUIRE(fast.exit_code == 0);
  REQUIRE_THAT(fast.out, Catch::Matchers::ContainsSubstring("[PASS] projection-idempotence"));
  REQUIRE_THAT(fast.out, Catch::Matchers::ContainsSubstring("all checks passed"));
  REQUIRE(fast.out.find("[FAIL]") == std::string::npos);

  CmdResult full = run_cmd(cli() + " verify --level full");
  INFO(full.out);
  REQUIRE(full.exit_code == 0);
  REQUIRE_THAT(full.out, Catch::Matchers::ContainsSubstring("[PASS] gradient-fd-rnn"));
  REQUIRE_THAT(full.out, Catch::Matchers::ContainsSubstring("[PASS] drift-rollout"));

  CmdResult bad = run_cmd(cli() + " verify --level fast --corrupt-skew");
  INFO(bad.out);
  REQUIRE(bad.exit_code == 1);
  REQUIRE_THAT(bad.out, Catch::Matchers::ContainsSubstring("[FAIL] projection-idempotence"));
}

TEST_CASE("sweep trains one model per reachable budget") {
  const fs::path ws = workspace("sweep");
  write_file(ws / "corpus.txt", corpus_ab());
  write_file(ws / "run.json", rnn_config((ws / "corpus.txt").string(), "sw", 10));

  const CmdResult r = run_cmd("OSM_OUTPUT_ROOT=" + ws.string() + " " + cli() +
                              " sweep --config " + (ws / "run.json").string() +
                              " --budgets 600,5000,1000000000");
  INFO(r.out);
  REQUIRE(r.exit_code == 0);
  REQUIRE_THAT(r.out, Catch::Matchers::ContainsSubstring("skipped"));

  std::istringstream rows(read_file(ws / "sw" / "sweep.jsonl"));
  std::string line;
  std::vector<json> parsed;
  while (std::getline(rows, line)) parsed.push_back(json::parse(line));
  REQUIRE(parsed.size() == 3);

  const osm::RunConfig cfg = osm::parse_run_config_text(read_file(ws / "run.json"));
  int64_t prev = 0;
  for (size_t i = 0; i < 2; ++i) {
    const json& row = parsed[i];
    REQUIRE(row.contains("d"));
    osm::ModelConfig m = cfg.model;
    m.d = row["d"].get<int>();
    REQUIRE(row["params"].get<int64_t>() == osm::model_param_count(m, 2).total);
    REQUIRE(row["params"].get<int64_t>() >= prev);
    prev = row["params"].get<int64_t>();
    REQUIRE(std::isfinite(row["val_bpc"].get<double>()));
  }
  REQUIRE(parsed[2]["skipped"] == true);

  REQUIRE(run_cmd(cli() + " sweep --config " + (ws / "run.json").string() +
                  " --budgets 5x00")
              .exit_code == 2);
}
