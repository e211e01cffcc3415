#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include <cmath>
#include <cstdint>
#include <vector>

#include "xattn/accounting.hpp"
#include "xattn/pruning.hpp"
#include "xattn/training.hpp"

using namespace xattn;

namespace {

// The 12-layer, 768-wide reference geometry every frozen constant below was
// derived for (independently of the formulas under test).
EncoderConfig reference() {
  EncoderConfig cfg;
  cfg.vocab_size = 30522;
  cfg.max_len = 512;
  cfg.d_model = 768;
  cfg.n_heads = 12;
  cfg.n_layers = 12;
  cfg.d_ff = 3072;
  cfg.n_classes = 2;
  cfg.use_pooler = true;
  return cfg;
}

EncoderConfig tiny_encoder() {
  EncoderConfig cfg;
  cfg.vocab_size = 32;
  cfg.max_len = 8;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.n_layers = 2;
  cfg.d_ff = 32;
  cfg.n_classes = 2;
  cfg.use_pooler = true;
  return cfg;
}

LayerUsage make_usage(Index layer, std::vector<Index> counts) {
  LayerUsage u;
  u.layer = layer;
  u.total = 0;
  for (Index c : counts) u.total += c;
  u.counts = std::move(counts);
  return u;
}

constexpr Index kZGrid[] = {2, 4, 6, 8, 10, 11};

}  // namespace

// ---------------------------------------------------------------------------
// Parameter counts

TEST_CASE("params: frozen constants at the reference geometry") {
  const EncoderConfig c = reference();
  CHECK(standard_layer_params(c) == 7087872);
  CHECK(routed_layer_params(c) == 1833996);
  CHECK(pruned_layer_params(c, 1) == 200640);
  CHECK(head_params(c) == 592130);
  CHECK(embedding_params(c) == 23835648);
  CHECK(transformer_params(c, 0, 1) == 12 * 7087872 + 592130);

  // A routed layer is a fully-pruned layer plus its router.
  CHECK(routed_layer_params(c) ==
        pruned_layer_params(c, c.n_heads) + c.d_model * c.n_heads + c.n_heads);
  // Each retained expert adds exactly one Q/K/V triple.
  const Index per_expert =
      3 * (c.d_model * c.d_head() + c.d_head());
  CHECK(pruned_layer_params(c, 5) - pruned_layer_params(c, 4) == per_expert);
}

TEST_CASE("params: reduction grid matches the reference figures") {
  const EncoderConfig c = reference();
  // Frozen from an independent derivation of the same counting rules.
  const double expected[] = {0.1608290926315178, 0.3216581852630357,
                             0.4824872778945535, 0.6433163705260714,
                             0.8041454631575892, 0.8845600094733481};
  // Reference reduction percentages reported for this geometry.
  const double reported[] = {16.1, 32.2, 48.2, 64.3, 80.4, 88.5};
  for (int i = 0; i < 6; ++i) {
    const double got = param_reduction(c, kZGrid[i], 1);
    CHECK(got == doctest::Approx(expected[i]).epsilon(1e-12));
    CHECK(std::abs(100.0 * got - reported[i]) <= 0.5);
  }
  CHECK(param_reduction(c, 0, 1) == 0.0);
}

TEST_CASE("params: analytic counts equal a live model's tensors") {
  const EncoderConfig c = tiny_encoder();
  Model<float> model = init_model<float>(c, 4);

  // All-standard: every parameter is accounted for, split embed/transformer.
  CHECK(model.n_params() == embedding_params(c) + transformer_params(c, 0, 1));
  CHECK(measured_transformer_params(model) == transformer_params(c, 0, 1));

  // Convert both layers: the analytic routed count matches the live tensors.
  TrainConfig tc;
  tc.top_k = 1;
  convert_next_layer(model, tc);
  CHECK(measured_transformer_params(model) ==
        standard_layer_params(c) + routed_layer_params(c) + head_params(c));
  convert_next_layer(model, tc);
  CHECK(measured_transformer_params(model) ==
        2 * routed_layer_params(c) + head_params(c));

  // Prune both to one expert: the live model lands exactly on the analytic
  // pruned total.
  prune_model(model, {make_usage(0, {5, 3}), make_usage(1, {2, 6})}, 1);
  CHECK(measured_transformer_params(model) == transformer_params(c, 2, 1));
  CHECK(model.n_params() == embedding_params(c) + transformer_params(c, 2, 1));
}

// ---------------------------------------------------------------------------
// FLOP counts

TEST_CASE("flops: frozen constants at the reference geometry") {
  const EncoderConfig c = reference();
  const Index L = 128;
  CHECK(standard_layer_flops(c, L) == 1868660736);
  CHECK(per_expert_flops(c, L) == 56221696);
  CHECK(pruned_layer_flops(c, L, 1) == 56811520);
  CHECK(head_flops(c) == 1189634);
  CHECK(embedding_flops(c, L) == 589824);
  CHECK(encoder_flops(c, L, 0, 1) ==
        static_cast<std::int64_t>(12) * 1868660736);

  // Routing adds only the router matvec on top of executing k experts.
  CHECK(routed_layer_flops(c, L, 3) ==
        pruned_layer_flops(c, L, 3) +
            2 * c.d_model * c.n_heads + c.n_heads);
  // Expert work scales linearly in the retained count.
  CHECK(pruned_layer_flops(c, L, 7) - pruned_layer_flops(c, L, 6) ==
        per_expert_flops(c, L));
}

TEST_CASE("flops: remaining grid matches the reference figures") {
  const EncoderConfig c = reference();
  const Index L = 128;
  // Frozen from an independent derivation of the same op walk.
  const double expected[] = {0.8384003775989152, 0.6768007551978302,
                             0.5152011327967454, 0.3536015103956605,
                             0.19200188799457568, 0.11120207679403324};
  // Reference remaining-compute percentages reported for this geometry.
  const double reported[] = {83.91, 67.82, 51.74, 35.65, 19.56, 11.52};
  for (int i = 0; i < 6; ++i) {
    const double got = flops_remaining(c, L, kZGrid[i], 1);
    CHECK(got == doctest::Approx(expected[i]).epsilon(1e-12));
    CHECK(std::abs(100.0 * got - reported[i]) <= 1.5);
  }
  CHECK(flops_remaining(c, L, 0, 1) == 1.0);
}

TEST_CASE("flops: measured walk equals the analytic stack") {
  const EncoderConfig c = tiny_encoder();
  const Index L = 8;
  Model<float> model = init_model<float>(c, 4);
  CHECK(measured_encoder_flops(model, L) == 2 * standard_layer_flops(c, L));

  TrainConfig tc;
  tc.top_k = 2;
  convert_next_layer(model, tc);  // layer 1 routed at k=2
  CHECK(measured_encoder_flops(model, L) ==
        standard_layer_flops(c, L) + routed_layer_flops(c, L, 2));

  prune_model(model, {make_usage(1, {9, 23})}, 1);
  CHECK(measured_encoder_flops(model, L) ==
        standard_layer_flops(c, L) + pruned_layer_flops(c, L, 1));
  CHECK(measured_encoder_flops(model, L) == encoder_flops(c, L, 1, 1));
}

// ---------------------------------------------------------------------------
// Cost report

TEST_CASE("cost report: live model fields are internally consistent") {
  const EncoderConfig c = tiny_encoder();
  const Index L = 8;
  Model<float> model = init_model<float>(c, 4);

  CostReport base = cost_report(model, L);
  CHECK(base.seq_len == L);
  CHECK(base.transformer_params == transformer_params(c, 0, 1));
  CHECK(base.embedding_params_ == embedding_params(c));
  CHECK(base.encoder_flops_ == encoder_flops(c, L, 0, 1));
  CHECK(base.aux_flops_ == head_flops(c) + embedding_flops(c, L));
  CHECK(base.param_reduction_vs_standard == 0.0);
  CHECK(base.flops_remaining_vs_standard == 1.0);
  CHECK(base.layer_kinds == std::vector<std::string>{"standard", "standard"});

  TrainConfig tc;
  tc.top_k = 1;
  convert_next_layer(model, tc);
  prune_model(model, {make_usage(1, {3, 1})}, 1);
  CostReport pruned = cost_report(model, L);
  CHECK(pruned.layer_kinds ==
        std::vector<std::string>{"standard", "deterministic"});
  CHECK(pruned.param_reduction_vs_standard ==
        doctest::Approx(param_reduction(c, 1, 1)).epsilon(1e-12));
  CHECK(pruned.flops_remaining_vs_standard ==
        doctest::Approx(flops_remaining(c, L, 1, 1)).epsilon(1e-12));

  const nlohmann::json j = cost_report_to_json(pruned);
  for (const char* key :
       {"seq_len", "transformer_params", "embedding_params",
        "encoder_flops_per_example", "embed_and_head_flops_per_example",
        "param_reduction_vs_standard", "flops_remaining_vs_standard",
        "layer_kinds"})
    CHECK(j.contains(key));
}

// ---------------------------------------------------------------------------
// Benchmark

TEST_CASE("benchmark: positive, internally consistent timings") {
  Model<float> model = init_model<float>(tiny_encoder(), 4);
  const BenchReport r = bench_forward(model, 2, 8, 1, 5);
  CHECK(r.batch == 2);
  CHECK(r.seq_len == 8);
  CHECK(r.warmup_iters == 1);
  CHECK(r.timed_iters == 5);
  CHECK(r.min_ms_per_batch > 0.0);
  CHECK(r.median_ms_per_batch >= r.min_ms_per_batch);
  CHECK(r.mean_ms_per_batch >= r.min_ms_per_batch);
  CHECK(r.examples_per_sec > 0.0);
  // Throughput is defined off the median batch time.
  CHECK(r.examples_per_sec ==
        doctest::Approx(2.0 * 1e3 / r.median_ms_per_batch).epsilon(1e-9));

  CHECK_THROWS_AS(bench_forward(model, 0, 8, 1, 5), UsageError);
  // A median over fewer than five samples is not reported.
  CHECK_THROWS_AS(bench_forward(model, 2, 8, 1, 4), UsageError);

  const nlohmann::json j = bench_report_to_json(r);
  for (const char* key :
       {"batch", "seq_len", "warmup_iters", "timed_iters", "mean_ms_per_batch",
        "median_ms_per_batch", "min_ms_per_batch", "examples_per_sec"})
    CHECK(j.contains(key));
}
