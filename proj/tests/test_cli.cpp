#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "xattn/accounting.hpp"
#include "xattn/cli.hpp"
#include "xattn/model_io.hpp"
#include "xattn/pruning.hpp"
#include "xattn/usage.hpp"

using namespace xattn;
using nlohmann::json;

namespace {

namespace fs = std::filesystem;

struct RunResult {
  int code = -1;
  std::string out;
};

// Drives the production entry point in-process, capturing stdout.
RunResult run_cli(const std::vector<std::string>& args) {
  std::ostringstream captured;
  std::streambuf* saved = std::cout.rdbuf(captured.rdbuf());
  RunResult r;
  try {
    r.code = cli::run(args);
  } catch (...) {
    std::cout.rdbuf(saved);
    throw;
  }
  std::cout.rdbuf(saved);
  r.out = captured.str();
  return r;
}

std::vector<json> parse_lines(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

// Scratch directory shared by the cases below; doctest runs them in order.
const fs::path kDir = fs::temp_directory_path() / "xattn_cli_scratch";

std::string at(const std::string& name) { return (kDir / name).string(); }

json base_config() {
  return json{
      {"model",
       {{"vocab_size", 32}, {"max_len", 10}, {"d_model", 16}, {"n_heads", 2},
        {"n_layers", 2}, {"d_ff", 32}, {"n_classes", 2}, {"use_pooler", true}}},
      {"train",
       {{"epochs", 2}, {"batch_size", 8}, {"lr", 1e-3}, {"convert_layers", 1},
        {"top_k", 1}, {"seed", 3}}},
      {"task",
       {{"n_clusters", 2}, {"n_classes", 2}, {"vocab_size", 32},
        {"seq_len", 8}, {"train_examples", 24}, {"val_examples", 16},
        {"seed", 7}}}};
}

void write_config(const std::string& path, const json& j) {
  std::ofstream(path, std::ios::trunc) << j.dump(2);
}

EncoderConfig tiny_from_config() {
  return encoder_config_from_json(base_config()["model"]);
}

}  // namespace

TEST_CASE("cli: help exits clean, missing subcommand does not") {
  fs::create_directories(kDir);
  CHECK(run_cli({"--help"}).code == cli::kOk);
  CHECK(run_cli({}).code == cli::kConfigError);
  CHECK(run_cli({"florble"}).code == cli::kConfigError);
}

TEST_CASE("cli: train -> usage -> prune -> eval pipeline") {
  write_config(at("cfg.json"), base_config());

  // train: checkpoint + JSONL log + epoch lines on stdout.
  const RunResult tr = run_cli({"train", "--config", at("cfg.json"), "--out",
                                at("ck"), "--log", at("log.jsonl")});
  REQUIRE(tr.code == cli::kOk);
  CHECK(fs::exists(at("ck") + ".bin"));
  CHECK(fs::exists(at("ck") + ".manifest.json"));
  const auto stdout_lines = parse_lines(tr.out);
  REQUIRE(stdout_lines.size() == 3);  // 2 epochs + done
  CHECK(stdout_lines[0]["kind"] == "epoch");
  CHECK(stdout_lines[0]["converted_layer"] == 1);
  CHECK(stdout_lines[1]["converted_layer"] == -1);
  CHECK(stdout_lines[2]["kind"] == "done");
  CHECK(stdout_lines[2]["val_accuracy"].is_number());

  // The log carries one line per step plus the epoch records.
  std::ifstream log(at("log.jsonl"));
  std::stringstream log_text;
  log_text << log.rdbuf();
  const auto log_lines = parse_lines(log_text.str());
  int steps = 0, epochs = 0;
  for (const json& l : log_lines) {
    if (l["kind"] == "step") ++steps;
    if (l["kind"] == "epoch") ++epochs;
  }
  CHECK(steps == 6);  // 24 examples / batch 8 * 2 epochs
  CHECK(epochs == 2);

  // eval on the regenerated validation split.
  const RunResult ev = run_cli(
      {"eval", "--model", at("ck"), "--config", at("cfg.json"), "--split", "val"});
  REQUIRE(ev.code == cli::kOk);
  const json ev_j = json::parse(ev.out);
  CHECK(ev_j["examples"] == 16);
  CHECK(ev_j["accuracy"].is_number());

  // usage: stdout and --out agree, and the file round-trips.
  const RunResult us = run_cli({"usage", "--model", at("ck"), "--config",
                                at("cfg.json"), "--out", at("usage.json")});
  REQUIRE(us.code == cli::kOk);
  const json us_j = json::parse(us.out);
  CHECK(us_j["k"] == 1);
  std::ifstream usage_in(at("usage.json"));
  const auto usage = usage_from_json(json::parse(usage_in));
  REQUIRE(usage.size() == 1);
  CHECK(usage[0].layer == 1);
  CHECK(usage[0].total == 16);

  // prune: new checkpoint, all routers gone, report written.
  const RunResult pr =
      run_cli({"prune", "--model", at("ck"), "--usage", at("usage.json"),
               "--keep", "1", "--out", at("pruned"), "--report",
               at("prune.json")});
  REQUIRE(pr.code == cli::kOk);
  CHECK(json::parse(pr.out)["m"] == 1);
  Model<float> pruned = load_checkpoint(at("pruned"));
  CHECK(kind_of(pruned.layers[1]) == LayerKind::deterministic);
  CHECK_FALSE(has_router_params(pruned));
  CHECK(fs::exists(at("prune.json")));

  // The pruned checkpoint evaluates end to end.
  const RunResult ev2 = run_cli({"eval", "--model", at("pruned"), "--config",
                                 at("cfg.json"), "--split", "val"});
  CHECK(ev2.code == cli::kOk);
}

TEST_CASE("cli: train is reproducible byte for byte") {
  write_config(at("cfg.json"), base_config());
  REQUIRE(run_cli({"train", "--config", at("cfg.json"), "--out", at("ck_a")})
              .code == cli::kOk);
  REQUIRE(run_cli({"train", "--config", at("cfg.json"), "--out", at("ck_b")})
              .code == cli::kOk);
  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in),
                       std::istreambuf_iterator<char>());
  };
  CHECK(slurp(at("ck_a.bin")) == slurp(at("ck_b.bin")));
  CHECK(slurp(at("ck_a.manifest.json")) == slurp(at("ck_b.manifest.json")));
}

TEST_CASE("cli: count --config reproduces the analytic accounting") {
  write_config(at("cfg.json"), base_config());
  const RunResult r = run_cli({"count", "--config", at("cfg.json"),
                               "--seq-len", "8", "--pruned", "1", "--keep", "1"});
  REQUIRE(r.code == cli::kOk);
  const json j = json::parse(r.out);
  const EncoderConfig c = tiny_from_config();
  CHECK(j["transformer_params"] == transformer_params(c, 1, 1));
  CHECK(j["encoder_flops_per_example"] == encoder_flops(c, 8, 1, 1));
  CHECK(j["param_reduction_vs_standard"].get<double>() ==
        doctest::Approx(param_reduction(c, 1, 1)).epsilon(1e-12));
  CHECK(j["layer_kinds"] ==
        json(std::vector<std::string>{"standard", "deterministic"}));
}

TEST_CASE("cli: bench and ablate run on a config") {
  write_config(at("cfg.json"), base_config());
  const RunResult b =
      run_cli({"bench", "--config", at("cfg.json"), "--pruned", "1", "--keep",
               "1", "--batch", "4", "--seq-len", "8", "--warmup", "1",
               "--iters", "5"});
  REQUIRE(b.code == cli::kOk);
  const json bj = json::parse(b.out);
  CHECK(bj["examples_per_sec"].get<double>() > 0.0);
  CHECK(bj["mean_ms_per_batch"].get<double>() > 0.0);
  const EncoderConfig c = tiny_from_config();
  CHECK(bj["encoder_flops_per_example"] == encoder_flops(c, 8, 1, 1));

  const RunResult a = run_cli({"ablate", "--config", at("cfg.json"),
                               "--seq-len", "8", "--grid", "1", "2"});
  REQUIRE(a.code == cli::kOk);
  const json aj = json::parse(a.out);
  REQUIRE(aj["rows"].size() == 2);
  CHECK(aj["rows"][0]["pruned_layers"] == 1);
  CHECK(aj["rows"][1]["param_reduction"].get<double>() ==
        doctest::Approx(param_reduction(c, 2, 1)).epsilon(1e-12));
}

TEST_CASE("cli: data exports TSVs that import back") {
  write_config(at("cfg.json"), base_config());
  const RunResult d = run_cli({"data", "--config", at("cfg.json"),
                               "--out-train", at("train.tsv"), "--out-val",
                               at("val.tsv")});
  REQUIRE(d.code == cli::kOk);
  CHECK(import_tsv(at("train.tsv")).size() == 24);
  CHECK(import_tsv(at("val.tsv")).size() == 16);

  // ...and a TSV drives eval directly.
  const RunResult ev = run_cli(
      {"eval", "--model", at("pruned"), "--data", at("val.tsv")});
  CHECK(ev.code == cli::kOk);
  CHECK(json::parse(ev.out)["examples"] == 16);
}

TEST_CASE("cli: gradcheck audits the full model") {
  const RunResult g = run_cli({"gradcheck", "--seed", "1"});
  CHECK(g.code == cli::kOk);
  const json j = json::parse(g.out);
  CHECK(j["ok"] == true);
  CHECK(j["max_violation"].get<double>() <= 1.0);
  CHECK(j["coordinates_checked"].get<Index>() > 1000);
}

TEST_CASE("cli: exit codes distinguish config, numeric, and io failures") {
  // Missing file: io.
  CHECK(run_cli({"train", "--config", at("nope.json")}).code == cli::kIoError);

  // Unknown key anywhere: config.
  json bad = base_config();
  bad["model"]["oops"] = 1;
  write_config(at("bad.json"), bad);
  CHECK(run_cli({"train", "--config", at("bad.json")}).code ==
        cli::kConfigError);

  // Self-inconsistent values: config.
  json bad2 = base_config();
  bad2["train"]["top_k"] = 5;  // > n_heads
  write_config(at("bad2.json"), bad2);
  CHECK(run_cli({"train", "--config", at("bad2.json")}).code ==
        cli::kConfigError);

  // Task too large for the model: config.
  json bad3 = base_config();
  bad3["task"]["seq_len"] = 11;  // > max_len 10
  write_config(at("bad3.json"), bad3);
  CHECK(run_cli({"train", "--config", at("bad3.json")}).code ==
        cli::kConfigError);

  // Ambiguous data source: config.
  write_config(at("cfg.json"), base_config());
  CHECK(run_cli({"eval", "--model", at("ck"), "--config", at("cfg.json"),
                 "--data", at("val.tsv")})
            .code == cli::kConfigError);

  // Usage of a model with no routed layers: config.
  CHECK(run_cli({"usage", "--model", at("pruned"), "--config", at("cfg.json")})
            .code == cli::kConfigError);

  // Corrupt checkpoint blob: io.
  {
    std::ifstream in(at("ck.bin"), std::ios::binary);
    std::string blob((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
    std::ofstream(at("trunc.bin"), std::ios::binary | std::ios::trunc)
        << blob.substr(0, blob.size() / 2);
    fs::copy_file(at("ck.manifest.json"), at("trunc.manifest.json"),
                  fs::copy_options::overwrite_existing);
  }
  CHECK(run_cli({"eval", "--model", at("trunc"), "--config", at("cfg.json")})
            .code == cli::kIoError);

  // Divergent training: numeric.
  json diverge = base_config();
  diverge["train"]["lr"] = 1e12;
  diverge["train"]["convert_layers"] = 0;
  diverge["train"]["epochs"] = 1;
  write_config(at("diverge.json"), diverge);
  CHECK(run_cli({"train", "--config", at("diverge.json")}).code ==
        cli::kNumericError);

  fs::remove_all(kDir);
}
