#include "xattn/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "xattn/accounting.hpp"
#include "xattn/gradcheck.hpp"
#include "xattn/model_io.hpp"
#include "xattn/pruning.hpp"
#include "xattn/training.hpp"

namespace xattn::cli {
namespace {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Config files
//
// One JSON file drives an experiment, with up to three sections:
//   "model": encoder geometry            (EncoderConfig)
//   "train": optimizer and schedule      (TrainConfig; all keys optional)
//   "task":  synthetic corpus            (TaskSpec;    all keys optional)
// Unknown keys anywhere are rejected: a typo must fail loudly, not fall
// back to a default.

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IoError(path + ": " + e.what());
  }
}

void reject_unknown_keys(const json& j, const std::vector<std::string>& known,
                         const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& item : j.items())
    if (std::find(known.begin(), known.end(), item.key()) == known.end())
      throw ConfigError(where + ": unknown key '" + item.key() + "'");
}

TrainConfig train_config_from_json(const json& j) {
  reject_unknown_keys(
      j,
      {"epochs", "batch_size", "lr", "weight_decay", "clip_norm",
       "warmup_frac", "adam_beta1", "adam_beta2", "adam_eps", "convert_layers",
       "top_k", "balance_weight", "balance_eps", "seed"},
      "train config");
  TrainConfig tc;
  if (j.contains("epochs")) tc.epochs = j.at("epochs").get<Index>();
  if (j.contains("batch_size")) tc.batch_size = j.at("batch_size").get<Index>();
  if (j.contains("lr")) tc.lr = j.at("lr").get<double>();
  if (j.contains("weight_decay"))
    tc.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("clip_norm")) tc.clip_norm = j.at("clip_norm").get<double>();
  if (j.contains("warmup_frac"))
    tc.warmup_frac = j.at("warmup_frac").get<double>();
  if (j.contains("adam_beta1")) tc.adam_beta1 = j.at("adam_beta1").get<double>();
  if (j.contains("adam_beta2")) tc.adam_beta2 = j.at("adam_beta2").get<double>();
  if (j.contains("adam_eps")) tc.adam_eps = j.at("adam_eps").get<double>();
  if (j.contains("convert_layers"))
    tc.convert_layers = j.at("convert_layers").get<Index>();
  if (j.contains("top_k")) tc.top_k = j.at("top_k").get<Index>();
  if (j.contains("balance_weight"))
    tc.balance_weight = j.at("balance_weight").get<double>();
  if (j.contains("balance_eps"))
    tc.balance_eps = j.at("balance_eps").get<double>();
  if (j.contains("seed")) tc.seed = j.at("seed").get<std::uint64_t>();
  return tc;
}

TaskSpec task_spec_from_json(const json& j) {
  reject_unknown_keys(j,
                      {"n_clusters", "n_classes", "vocab_size", "seq_len",
                       "train_examples", "val_examples", "seed"},
                      "task config");
  TaskSpec spec;
  if (j.contains("n_clusters")) spec.n_clusters = j.at("n_clusters").get<Index>();
  if (j.contains("n_classes")) spec.n_classes = j.at("n_classes").get<Index>();
  if (j.contains("vocab_size")) spec.vocab_size = j.at("vocab_size").get<Index>();
  if (j.contains("seq_len")) spec.seq_len = j.at("seq_len").get<Index>();
  if (j.contains("train_examples"))
    spec.train_examples = j.at("train_examples").get<Index>();
  if (j.contains("val_examples"))
    spec.val_examples = j.at("val_examples").get<Index>();
  if (j.contains("seed")) spec.seed = j.at("seed").get<std::uint64_t>();
  spec.validate();
  return spec;
}

struct ExperimentConfig {
  EncoderConfig model;
  TrainConfig train;
  TaskSpec task;
  bool has_model = false;
  bool has_train = false;
  bool has_task = false;
};

ExperimentConfig experiment_from_json(const json& j, const std::string& path) {
  reject_unknown_keys(j, {"model", "train", "task"}, path);
  ExperimentConfig exp;
  try {
    if (j.contains("model")) {
      exp.model = encoder_config_from_json(j.at("model"));
      exp.has_model = true;
    }
    if (j.contains("train")) {
      exp.train = train_config_from_json(j.at("train"));
      exp.has_train = true;
    }
    if (j.contains("task")) {
      exp.task = task_spec_from_json(j.at("task"));
      exp.has_task = true;
    }
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return exp;
}

ExperimentConfig load_experiment(const std::string& path) {
  return experiment_from_json(load_json_file(path), path);
}

// The corpus must fit the encoder: ids inside the embedding table, the
// sequence inside the position table, labels inside the classifier head.
void check_task_fits_model(const TaskSpec& task, const EncoderConfig& model) {
  if (task.vocab_size > model.vocab_size)
    throw ConfigError("task vocab_size " + std::to_string(task.vocab_size) +
                      " exceeds model vocab_size " +
                      std::to_string(model.vocab_size));
  if (task.seq_len > model.max_len)
    throw ConfigError("task seq_len " + std::to_string(task.seq_len) +
                      " exceeds model max_len " +
                      std::to_string(model.max_len));
  if (task.n_classes > model.n_classes)
    throw ConfigError("task n_classes " + std::to_string(task.n_classes) +
                      " exceeds model n_classes " +
                      std::to_string(model.n_classes));
}

void check_dataset_fits_model(const Dataset& ds, const EncoderConfig& model,
                              const std::string& label) {
  if (ds.seq_len > model.max_len)
    throw ConfigError(label + ": seq_len " + std::to_string(ds.seq_len) +
                      " exceeds model max_len " +
                      std::to_string(model.max_len));
  for (const Example& ex : ds.examples) {
    if (ex.label >= model.n_classes)
      throw ConfigError(label + ": label " + std::to_string(ex.label) +
                        " outside model n_classes " +
                        std::to_string(model.n_classes));
    for (std::int32_t t : ex.tokens)
      if (t >= model.vocab_size)
        throw ConfigError(label + ": token id " + std::to_string(t) +
                          " outside model vocab_size " +
                          std::to_string(model.vocab_size));
  }
}

// Evaluation-style commands accept either a TSV file or a config whose
// task section regenerates the corpus; exactly one source must be given.
struct DataSource {
  Dataset ds;
  std::string label;
};

DataSource resolve_dataset(const std::string& data_path,
                           const std::string& config_path,
                           const std::string& split,
                           const EncoderConfig& model) {
  if (data_path.empty() == config_path.empty())
    throw ConfigError("give exactly one of --data and --config");
  DataSource src;
  if (!data_path.empty()) {
    src.ds = import_tsv(data_path);
    src.label = data_path;
  } else {
    const ExperimentConfig exp = load_experiment(config_path);
    if (!exp.has_task)
      throw ConfigError(config_path + ": needs a 'task' section");
    check_task_fits_model(exp.task, model);
    DataSplits splits = gen_cluster_task(exp.task);
    if (split == "train") src.ds = std::move(splits.train);
    else if (split == "val") src.ds = std::move(splits.val);
    else throw ConfigError("--split must be 'train' or 'val', got '" + split + "'");
    src.label = split;
  }
  check_dataset_fits_model(src.ds, model, src.label);
  return src;
}

// ---------------------------------------------------------------------------
// Record serialization shared by train's stdout and its JSONL log

json usage_layers_json(const std::vector<LayerUsage>& usage) {
  json layers = json::array();
  for (const LayerUsage& u : usage)
    layers.push_back(
        {{"layer", u.layer}, {"counts", u.counts}, {"total", u.total}});
  return layers;
}

json step_json(const StepRecord& s) {
  return json{{"kind", "step"},
              {"step", s.step},
              {"epoch", s.epoch},
              {"lr", s.lr},
              {"task_loss", s.task_loss},
              {"balance_loss", s.balance_loss},
              {"total_loss", s.total_loss},
              {"grad_norm", s.grad_norm}};
}

json epoch_json(const EpochRecord& e) {
  return json{{"kind", "epoch"},
              {"epoch", e.epoch},
              {"converted_layer", e.converted_layer},
              {"balance_active", e.balance_active},
              {"train_task_mean", e.train_task_mean},
              {"val_accuracy", e.val_accuracy},
              {"usage", usage_layers_json(e.usage)}};
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << text;
  if (!out.flush()) throw IoError("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Model construction helpers

Model<float> load_model(const std::string& prefix) {
  return load_checkpoint(prefix);
}

Index first_routed_top_k(Model<float>& model) {
  for (const auto& layer : model.layers)
    if (kind_of(layer) == LayerKind::routed)
      return std::get<MoELayer<float>>(layer).top_k;
  throw ConfigError("model has no routed layers");
}

// Converts the deepest `z` layers and prunes each to its `m` lowest-index
// experts. Structure is what matters here (bench/count of a hypothetical
// deployment); the expert weights are fresh, not trained.
void synthesize_pruned_stack(Model<float>& model, Index z, Index m) {
  if (z < 0 || z > model.cfg.n_layers)
    throw ConfigError("--pruned must be in [0, n_layers]");
  if (m < 1 || m > model.cfg.n_heads)
    throw ConfigError("--keep must be in [1, n_heads]");
  if (z == 0) return;
  TrainConfig tc;
  tc.top_k = m;
  std::vector<LayerUsage> usage;
  for (Index i = 0; i < z; ++i) {
    const Index at = convert_next_layer(model, tc);
    LayerUsage u;
    u.layer = at;
    u.counts.assign(static_cast<std::size_t>(model.cfg.n_heads), 1);
    u.total = model.cfg.n_heads;
    usage.push_back(std::move(u));
  }
  prune_model(model, usage, m);
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_train(const std::string& config_path, const std::string& out_prefix,
              const std::string& log_path) {
  const ExperimentConfig exp = load_experiment(config_path);
  if (!exp.has_model)
    throw ConfigError(config_path + ": needs a 'model' section");
  if (!exp.has_task)
    throw ConfigError(config_path + ": needs a 'task' section");
  check_task_fits_model(exp.task, exp.model);

  const DataSplits data = gen_cluster_task(exp.task);
  Model<float> model = init_model<float>(exp.model, exp.train.seed);
  const TrainResult result = train(model, data, exp.train);

  for (const EpochRecord& e : result.epochs)
    std::cout << epoch_json(e).dump() << "\n";

  if (!log_path.empty()) {
    std::string lines;
    for (const StepRecord& s : result.steps)
      lines += step_json(s).dump() + "\n";
    for (const EpochRecord& e : result.epochs)
      lines += epoch_json(e).dump() + "\n";
    write_text_file(log_path, lines);
  }

  if (!out_prefix.empty()) save_checkpoint(out_prefix, model);
  std::cout << json{{"kind", "done"},
                    {"val_accuracy", result.epochs.back().val_accuracy},
                    {"checkpoint", out_prefix}}
                   .dump()
            << "\n";
  return kOk;
}

int cmd_eval(const std::string& model_prefix, const std::string& data_path,
             const std::string& config_path, const std::string& split,
             Index batch) {
  if (batch < 1) throw ConfigError("--batch must be positive");
  Model<float> model = load_model(model_prefix);
  const DataSource src = resolve_dataset(data_path, config_path, split, model.cfg);
  const double acc = accuracy(model, src.ds, batch);
  std::cout << json{{"accuracy", acc},
                    {"examples", src.ds.size()},
                    {"data", src.label}}
                   .dump(2)
            << "\n";
  return kOk;
}

int cmd_usage(const std::string& model_prefix, const std::string& data_path,
              const std::string& config_path, const std::string& split,
              Index batch, const std::string& out_path) {
  if (batch < 1) throw ConfigError("--batch must be positive");
  Model<float> model = load_model(model_prefix);
  const Index k = first_routed_top_k(model);
  const DataSource src = resolve_dataset(data_path, config_path, split, model.cfg);
  const auto usage = collect_usage(model, src.ds, batch);
  const json j = usage_to_json(usage, k, src.label);
  std::cout << j.dump(2) << "\n";
  if (!out_path.empty()) write_text_file(out_path, j.dump(2) + "\n");
  return kOk;
}

int cmd_prune(const std::string& model_prefix, const std::string& usage_path,
              Index keep, const std::string& out_prefix,
              const std::string& report_path) {
  Model<float> model = load_model(model_prefix);
  const auto usage = usage_from_json(load_json_file(usage_path));
  const PruneReport report = prune_model(model, usage, keep);
  save_checkpoint(out_prefix, model);
  const json j = prune_report_to_json(report);
  std::cout << j.dump(2) << "\n";
  if (!report_path.empty()) write_text_file(report_path, j.dump(2) + "\n");
  return kOk;
}

int cmd_count(const std::string& model_prefix, const std::string& config_path,
              Index seq_len, Index z, Index m) {
  if (model_prefix.empty() == config_path.empty())
    throw ConfigError("give exactly one of --model and --config");
  if (seq_len < 2) throw ConfigError("--seq-len must be at least 2");

  if (!model_prefix.empty()) {
    // A live checkpoint is counted as-is; the hypothetical flags make no
    // sense against real structure.
    if (z != 0 || m != 1)
      throw ConfigError("--pruned/--keep apply to --config, not --model");
    Model<float> model = load_model(model_prefix);
    std::cout << cost_report_to_json(cost_report(model, seq_len)).dump(2)
              << "\n";
    return kOk;
  }

  // Pure arithmetic for a hypothetical geometry: no tensors are allocated,
  // so this works for full-scale configs too.
  const ExperimentConfig exp = load_experiment(config_path);
  if (!exp.has_model)
    throw ConfigError(config_path + ": needs a 'model' section");
  const EncoderConfig& c = exp.model;
  if (z < 0 || z > c.n_layers)
    throw ConfigError("--pruned must be in [0, n_layers]");
  if (m < 1 || m > c.n_heads)
    throw ConfigError("--keep must be in [1, n_heads]");
  if (seq_len > c.max_len)
    throw ConfigError("--seq-len exceeds model max_len");

  CostReport r;
  r.seq_len = seq_len;
  r.transformer_params = transformer_params(c, z, m);
  r.embedding_params_ = embedding_params(c);
  r.encoder_flops_ = encoder_flops(c, seq_len, z, m);
  r.aux_flops_ = head_flops(c) + embedding_flops(c, seq_len);
  r.param_reduction_vs_standard = param_reduction(c, z, m);
  r.flops_remaining_vs_standard = flops_remaining(c, seq_len, z, m);
  for (Index i = 0; i < c.n_layers; ++i)
    r.layer_kinds.emplace_back(i < c.n_layers - z ? "standard"
                                                  : "deterministic");
  std::cout << cost_report_to_json(r).dump(2) << "\n";
  return kOk;
}

int cmd_bench(const std::string& model_prefix, const std::string& config_path,
              Index z, Index m, Index batch, Index seq_len, Index warmup,
              Index iters, std::uint64_t seed) {
  if (model_prefix.empty() == config_path.empty())
    throw ConfigError("give exactly one of --model and --config");
  Model<float> model = [&] {
    if (!model_prefix.empty()) {
      if (z != 0 || m != 1)
        throw ConfigError("--pruned/--keep apply to --config, not --model");
      return load_model(model_prefix);
    }
    const ExperimentConfig exp = load_experiment(config_path);
    if (!exp.has_model)
      throw ConfigError(config_path + ": needs a 'model' section");
    Model<float> fresh = init_model<float>(exp.model, seed);
    synthesize_pruned_stack(fresh, z, m);
    return fresh;
  }();
  if (seq_len > model.cfg.max_len)
    throw ConfigError("--seq-len exceeds model max_len");

  const BenchReport r = bench_forward(model, batch, seq_len, warmup, iters, seed);
  json j = bench_report_to_json(r);
  j["encoder_flops_per_example"] = measured_encoder_flops(model, seq_len);
  std::cout << j.dump(2) << "\n";
  return kOk;
}

int cmd_gradcheck(std::uint64_t seed) {
  // Small double-precision fixture with one routed layer, a padded row,
  // and the stage-1 objective (task + weighted balance), so the check
  // crosses every differentiable component in one pass.
  EncoderConfig cfg;
  cfg.vocab_size = 16;
  cfg.max_len = 6;
  cfg.d_model = 16;
  cfg.n_heads = 4;
  cfg.n_layers = 2;
  cfg.d_ff = 32;
  cfg.n_classes = 2;
  cfg.use_pooler = true;
  Model<double> model = init_model<double>(cfg, seed);
  TrainConfig tc;
  tc.top_k = 1;
  tc.seed = seed;
  convert_next_layer(model, tc);

  Tensor<std::int32_t> ids({2, 6});
  Tensor<std::int32_t> mask({2, 6});
  Rng rng(derive_seed(seed, 3));
  for (Index i = 0; i < ids.numel(); ++i) {
    ids[i] = static_cast<std::int32_t>(
        kFirstContentId +
        uniform_below(rng, static_cast<std::uint64_t>(cfg.vocab_size -
                                                      kFirstContentId)));
    mask[i] = 1;
  }
  ids.at({0, 0}) = kClsId;
  ids.at({1, 0}) = kClsId;
  ids.at({1, 5}) = kPadId;
  mask.at({1, 5}) = 0;
  const std::vector<int> labels{0, 1};

  std::vector<Parameter<double>*> params;
  std::vector<std::string> names;
  Index coords = 0;
  model.visit_params([&](const std::string& n, Parameter<double>& p) {
    params.push_back(&p);
    names.push_back(n);
    coords += p.numel();
  });

  const auto build = [&](Tape<double>* tape) {
    RoutingTrace<double> trace;
    Value<double> logits = classify(tape, model, ids, mask, &trace);
    Value<double> task = cross_entropy_mean(logits, labels);
    Value<double> bal = balance_loss(trace.records, 1e-7);
    return add(task, scale(bal, 0.1));
  };
  const GradCheckReport rep = grad_check<double>(build, params);

  // Report the worst coordinate by parameter name, not internal index.
  std::string worst = rep.worst;
  const auto bracket = worst.find('[');
  if (bracket != std::string::npos) {
    const std::size_t pi =
        static_cast<std::size_t>(std::stoll(worst.substr(0, bracket)));
    if (pi < names.size()) worst = names[pi] + worst.substr(bracket);
  }
  std::cout << json{{"coordinates_checked", coords},
                    {"max_violation", rep.max_violation},
                    {"max_abs_err", rep.max_abs_err},
                    {"worst", worst},
                    {"ok", rep.ok()}}
                   .dump(2)
            << "\n";
  return rep.ok() ? kOk : kNumericError;
}

int cmd_ablate(const std::string& config_path, Index seq_len, Index m,
               const std::vector<Index>& grid) {
  const ExperimentConfig exp = load_experiment(config_path);
  if (!exp.has_model)
    throw ConfigError(config_path + ": needs a 'model' section");
  const EncoderConfig& c = exp.model;
  if (m < 1 || m > c.n_heads)
    throw ConfigError("--keep must be in [1, n_heads]");
  if (seq_len < 2 || seq_len > c.max_len)
    throw ConfigError("--seq-len must be in [2, max_len]");

  json rows = json::array();
  for (Index z : grid) {
    if (z < 0 || z > c.n_layers)
      throw ConfigError("grid entry " + std::to_string(z) +
                        " outside [0, n_layers]");
    rows.push_back({{"pruned_layers", z},
                    {"transformer_params", transformer_params(c, z, m)},
                    {"param_reduction", param_reduction(c, z, m)},
                    {"encoder_flops_per_example", encoder_flops(c, seq_len, z, m)},
                    {"flops_remaining", flops_remaining(c, seq_len, z, m)}});
  }
  std::cout << json{{"seq_len", seq_len},
                    {"keep", m},
                    {"baseline_transformer_params", transformer_params(c, 0, m)},
                    {"baseline_encoder_flops", encoder_flops(c, seq_len, 0, m)},
                    {"rows", rows}}
                   .dump(2)
            << "\n";
  return kOk;
}

int cmd_data(const std::string& config_path, const std::string& out_train,
             const std::string& out_val) {
  const ExperimentConfig exp = load_experiment(config_path);
  if (!exp.has_task)
    throw ConfigError(config_path + ": needs a 'task' section");
  const DataSplits splits = gen_cluster_task(exp.task);
  if (!out_train.empty()) export_tsv(out_train, splits.train);
  if (!out_val.empty()) export_tsv(out_val, splits.val);
  std::cout << json{{"train_examples", splits.train.size()},
                    {"val_examples", splits.val.size()},
                    {"seq_len", splits.train.seq_len}}
                   .dump(2)
            << "\n";
  return kOk;
}

}  // namespace

// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args) {
  CLI::App app{"expert-attention encoder: train, prune, and measure"};
  app.require_subcommand(1);

  // train
  auto* t = app.add_subcommand("train", "two-stage training on the synthetic task");
  std::string t_config, t_out, t_log;
  t->add_option("--config", t_config, "experiment JSON (model+train+task)")
      ->required();
  t->add_option("--out", t_out, "checkpoint prefix to write");
  t->add_option("--log", t_log, "JSONL step/epoch log path");

  // eval
  auto* e = app.add_subcommand("eval", "accuracy of a checkpoint on a dataset");
  std::string e_model, e_data, e_config, e_split = "val";
  Index e_batch = 64;
  e->add_option("--model", e_model, "checkpoint prefix")->required();
  e->add_option("--data", e_data, "dataset TSV");
  e->add_option("--config", e_config, "experiment JSON with a task section");
  e->add_option("--split", e_split, "train|val (with --config)");
  e->add_option("--batch", e_batch, "evaluation batch size");

  // usage
  auto* u = app.add_subcommand("usage", "expert selection counts on a dataset");
  std::string u_model, u_data, u_config, u_split = "val", u_out;
  Index u_batch = 64;
  u->add_option("--model", u_model, "checkpoint prefix")->required();
  u->add_option("--data", u_data, "dataset TSV");
  u->add_option("--config", u_config, "experiment JSON with a task section");
  u->add_option("--split", u_split, "train|val (with --config)");
  u->add_option("--batch", u_batch, "batch size");
  u->add_option("--out", u_out, "also write the usage JSON here");

  // prune
  auto* p = app.add_subcommand("prune", "keep the m most-used experts per routed layer");
  std::string p_model, p_usage, p_out, p_report;
  Index p_keep = 1;
  p->add_option("--model", p_model, "checkpoint prefix")->required();
  p->add_option("--usage", p_usage, "usage JSON from the usage command")
      ->required();
  p->add_option("--keep", p_keep, "experts to retain per layer");
  p->add_option("--out", p_out, "pruned checkpoint prefix")->required();
  p->add_option("--report", p_report, "also write the prune report here");

  // count
  auto* c = app.add_subcommand("count", "parameter and FLOP accounting");
  std::string c_model, c_config;
  Index c_seq = 128, c_z = 0, c_m = 1;
  c->add_option("--model", c_model, "checkpoint prefix (counted as-is)");
  c->add_option("--config", c_config, "experiment JSON (analytic scenario)");
  c->add_option("--seq-len", c_seq, "sequence length for FLOPs");
  c->add_option("--pruned", c_z, "hypothetical pruned layer count (--config)");
  c->add_option("--keep", c_m, "experts kept per pruned layer (--config)");

  // bench
  auto* b = app.add_subcommand("bench", "forward-pass throughput");
  std::string b_model, b_config;
  Index b_z = 0, b_m = 1, b_batch = 64, b_seq = 128, b_warmup = 1, b_iters = 5;
  std::uint64_t b_seed = 7;
  b->add_option("--model", b_model, "checkpoint prefix");
  b->add_option("--config", b_config, "experiment JSON (fresh weights)");
  b->add_option("--pruned", b_z, "convert+prune this many layers (--config)");
  b->add_option("--keep", b_m, "experts kept per pruned layer (--config)");
  b->add_option("--batch", b_batch, "batch size");
  b->add_option("--seq-len", b_seq, "sequence length");
  b->add_option("--warmup", b_warmup, "untimed warmup iterations");
  b->add_option("--iters", b_iters, "timed iterations");
  b->add_option("--seed", b_seed, "init + synthetic batch seed");

  // gradcheck
  auto* g = app.add_subcommand("gradcheck",
                               "finite-difference audit of the whole model");
  std::uint64_t g_seed = 1;
  g->add_option("--seed", g_seed, "fixture seed");

  // ablate
  auto* a = app.add_subcommand("ablate", "param/FLOP sweep over pruned-layer counts");
  std::string a_config;
  Index a_seq = 128, a_keep = 1;
  std::vector<Index> a_grid{2, 4, 6, 8, 10, 11};
  a->add_option("--config", a_config, "experiment JSON with a model section")
      ->required();
  a->add_option("--seq-len", a_seq, "sequence length for FLOPs");
  a->add_option("--keep", a_keep, "experts kept per pruned layer");
  a->add_option("--grid", a_grid, "pruned-layer counts to sweep");

  // data
  auto* d = app.add_subcommand("data", "generate the synthetic corpus as TSV");
  std::string d_config, d_train, d_val;
  d->add_option("--config", d_config, "experiment JSON with a task section")
      ->required();
  d->add_option("--out-train", d_train, "training split TSV path");
  d->add_option("--out-val", d_val, "validation split TSV path");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);  // prints help, exits 0
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kConfigError;
  }

  try {
    if (*t) return cmd_train(t_config, t_out, t_log);
    if (*e) return cmd_eval(e_model, e_data, e_config, e_split, e_batch);
    if (*u) return cmd_usage(u_model, u_data, u_config, u_split, u_batch, u_out);
    if (*p) return cmd_prune(p_model, p_usage, p_keep, p_out, p_report);
    if (*c) return cmd_count(c_model, c_config, c_seq, c_z, c_m);
    if (*b)
      return cmd_bench(b_model, b_config, b_z, b_m, b_batch, b_seq, b_warmup,
                       b_iters, b_seed);
    if (*g) return cmd_gradcheck(g_seed);
    if (*a) return cmd_ablate(a_config, a_seq, a_keep, a_grid);
    if (*d) return cmd_data(d_config, d_train, d_val);
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const NumericError& ex) {
    std::cerr << "numeric error: " << ex.what() << "\n";
    return kNumericError;
  } catch (const IoError& ex) {
    std::cerr << "io error: " << ex.what() << "\n";
    return kIoError;
  } catch (const ShapeError& ex) {
    // Shape/index/usage/domain problems reaching the CLI mean the inputs
    // disagreed with each other; report them as configuration errors.
    std::cerr << "config error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const IndexError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const UsageError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const DomainError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kConfigError;
  } catch (const std::exception& ex) {
    std::cerr << "internal error: " << ex.what() << "\n";
    return 1;
  }
  return kConfigError;
}

}  // namespace xattn::cli
