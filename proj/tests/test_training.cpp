#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "xattn/gradcheck.hpp"
#include "xattn/training.hpp"

using namespace xattn;

namespace {

Tensor<double> rand_tensor(Shape shape, Rng& rng, double lo = -1.0,
                           double hi = 1.0) {
  Tensor<double> t(std::move(shape));
  for (Index i = 0; i < t.numel(); ++i)
    t[i] = lo + (hi - lo) * uniform01(rng);
  return t;
}

Value<double> P(Tape<double>* tp, Parameter<double>& p) {
  return tp ? tp->use(p) : borrow(p.value);
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

TaskSpec tiny_task() {
  TaskSpec spec;
  spec.n_clusters = 2;
  spec.n_classes = 2;
  spec.vocab_size = 32;
  spec.seq_len = 8;
  spec.train_examples = 24;
  spec.val_examples = 16;
  spec.seed = 7;
  return spec;
}

template <class S>
Parameter<S>* named(Model<S>& m, const std::string& want) {
  Parameter<S>* hit = nullptr;
  m.visit_params([&](const std::string& n, Parameter<S>& p) {
    if (n == want) hit = &p;
  });
  REQUIRE(hit != nullptr);
  return hit;
}

template <class S>
std::vector<S> flatten(Model<S>& m) {
  std::vector<S> out;
  m.visit_params([&](const std::string&, Parameter<S>& p) {
    for (Index i = 0; i < p.numel(); ++i) out.push_back(p.value[i]);
  });
  return out;
}

template <class S>
void zero_all_grads(Model<S>& m) {
  m.visit_params([](const std::string&, Parameter<S>& p) { p.zero_grad(); });
}

}  // namespace

// ---------------------------------------------------------------------------
// LR schedule

TEST_CASE("lr schedule: linear warmup then cosine decay") {
  // total 100, 10% warmup: ceil(10) = 10 warmup steps, 90 cosine steps.
  LrSchedule sched(100, 0.1, 1.0);
  CHECK(sched.warmup_steps == 10);
  CHECK(sched.at(0) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(sched.at(4) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sched.at(9) == doctest::Approx(1.0).epsilon(1e-12));
  // Cosine starts at the peak and reaches half amplitude mid-decay.
  CHECK(sched.at(10) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(sched.at(55) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(sched.at(99) ==
        doctest::Approx(0.00030458649045211894).epsilon(1e-12));
  // Monotone rise through warmup, monotone fall after the peak.
  for (Index s = 1; s < 10; ++s) CHECK(sched.at(s) > sched.at(s - 1));
  for (Index s = 11; s < 100; ++s) CHECK(sched.at(s) < sched.at(s - 1));
}

TEST_CASE("lr schedule: degenerate shapes") {
  // No warmup: the first step already sits on the cosine peak.
  LrSchedule flat(10, 0.0, 0.5);
  CHECK(flat.warmup_steps == 0);
  CHECK(flat.at(0) == doctest::Approx(0.5).epsilon(1e-12));
  // All-warmup: never decays, holds the base rate at the end.
  LrSchedule ramp(3, 1.0, 0.9);
  CHECK(ramp.warmup_steps == 3);
  CHECK(ramp.at(0) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(ramp.at(2) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(ramp.at(3) == doctest::Approx(0.9).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// AdamW

TEST_CASE("adamw: frozen two-step recurrence with decoupled decay") {
  EncoderConfig cfg = tiny_encoder();
  cfg.use_pooler = false;
  Model<double> model = init_model<double>(cfg, 11);
  Parameter<double>* b = named(model, "classifier.b");

  TrainConfig tc;  // beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01
  AdamW<double> opt(tc);

  // theta0=1, g=1, lr=0.1:
  //   m1=0.1, v1=0.001, update = 1/(1+1e-8)
  //   theta1 = 0.999 - 0.1/(1+1e-8) = 0.8990000009999999
  zero_all_grads(model);
  b->value[0] = 1.0;
  b->grad[0] = 1.0;
  opt.step(model, 0.1);
  CHECK(opt.t == 1);
  CHECK(b->value[0] == doctest::Approx(0.8990000009999999).epsilon(1e-14));

  // Parameters with zero gradient only feel the decoupled decay.
  Parameter<double>* gamma = named(model, "embed.ln.gamma");
  CHECK(gamma->value[0] == doctest::Approx(0.999).epsilon(1e-14));

  // Second identical gradient: m2=0.19, v2=0.001999, both bias corrections
  // cancel to a unit update again.
  //   theta2 = 0.8990000009999999*0.999 - 0.1/(1+1e-8) = 0.7981010019990006
  zero_all_grads(model);
  b->grad[0] = 1.0;
  opt.step(model, 0.1);
  CHECK(opt.t == 2);
  CHECK(b->value[0] == doctest::Approx(0.7981010019990006).epsilon(1e-14));

  // Moments are keyed by name and persist across steps.
  const auto& mo = opt.slots.at("classifier.b");
  CHECK(mo.m[0] == doctest::Approx(0.19).epsilon(1e-12));
  CHECK(mo.v[0] == doctest::Approx(0.001999).epsilon(1e-12));
}

TEST_CASE("gradient clipping: rescales only above the ceiling") {
  EncoderConfig cfg = tiny_encoder();
  cfg.use_pooler = false;
  Model<double> model = init_model<double>(cfg, 12);
  Parameter<double>* b = named(model, "classifier.b");
  REQUIRE(b->numel() == 2);

  // Global norm 5 against a ceiling of 1: gradients shrink by 5x.
  zero_all_grads(model);
  b->grad[0] = 3.0;
  b->grad[1] = 4.0;
  CHECK(clip_gradients(model, 1.0) == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(b->grad[0] == doctest::Approx(0.6).epsilon(1e-6));
  CHECK(b->grad[1] == doctest::Approx(0.8).epsilon(1e-6));

  // Below the ceiling the gradients pass through untouched.
  zero_all_grads(model);
  b->grad[0] = 0.3;
  b->grad[1] = 0.4;
  CHECK(clip_gradients(model, 1.0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(b->grad[0] == 0.3);
  CHECK(b->grad[1] == 0.4);
}

// ---------------------------------------------------------------------------
// Balance loss

TEST_CASE("balance loss: frozen values against the closed form") {
  // Fully collapsed routing over two experts, eps=1e-7:
  //   0.5*KL(u+eps || p+eps) + 0.5*KL(p+eps || u+eps) = 4.029523937739579
  Tensor<double> collapsed({2});
  collapsed[0] = 1.0;
  collapsed[1] = 0.0;
  CHECK(balance_from_probs(borrow(collapsed), 1e-7).t()[0] ==
        doctest::Approx(4.029523937739579).epsilon(1e-12));

  Tensor<double> skewed({4});
  skewed[0] = 0.7;
  skewed[1] = skewed[2] = skewed[3] = 0.1;
  CHECK(balance_from_probs(borrow(skewed), 1e-7).t()[0] ==
        doctest::Approx(0.43782959068041283).epsilon(1e-12));

  // Uniform usage is the fixed point: exactly zero, not merely small.
  Tensor<double> uniform = Tensor<double>::full({4}, 0.25);
  CHECK(std::abs(balance_from_probs(borrow(uniform), 1e-7).t()[0]) < 1e-12);

  Tensor<double> matrix({2, 2});
  CHECK_THROWS_AS(balance_from_probs(borrow(matrix), 1e-7), ShapeError);
}

TEST_CASE("balance loss: mean over routed layers") {
  // Layer A routes uniformly (term 0); layer B routes at [0.7,0.1,0.1,0.1].
  // Feeding log-probabilities as logits makes the softmax recover the
  // distribution exactly, so the mean is half the frozen skewed value.
  RoutingRecord<double> a;
  a.layer = 0;
  a.gate_logits = constant(Tensor<double>({1, 2}));
  RoutingRecord<double> b;
  b.layer = 1;
  Tensor<double> logit_b({1, 4});
  logit_b[0] = std::log(0.7);
  logit_b[1] = logit_b[2] = logit_b[3] = std::log(0.1);
  b.gate_logits = constant(logit_b);

  const double got =
      balance_loss(std::vector<RoutingRecord<double>>{a, b}, 1e-7).t()[0];
  CHECK(got == doctest::Approx(0.21891479534020641).epsilon(1e-9));

  CHECK_THROWS_AS(balance_loss(std::vector<RoutingRecord<double>>{}, 1e-7),
                  UsageError);
}

TEST_CASE("balance loss: batch-mean routing hides per-row skew") {
  // Two rows with mirrored preferences average to a uniform batch
  // distribution, which the balance term cannot distinguish from
  // genuinely uniform routing.
  RoutingRecord<double> rec;
  rec.layer = 0;
  Tensor<double> logits({2, 2});
  logits.at({0, 0}) = 2.0;
  logits.at({0, 1}) = 0.0;
  logits.at({1, 0}) = 0.0;
  logits.at({1, 1}) = 2.0;
  rec.gate_logits = constant(logits);
  const double got =
      balance_loss(std::vector<RoutingRecord<double>>{rec}, 1e-7).t()[0];
  CHECK(std::abs(got) < 1e-12);
}

TEST_CASE("gradcheck: balance loss through the router softmax") {
  Rng rng(21);
  Parameter<double> logits(rand_tensor({3, 4}, rng));
  auto rep = grad_check<double>(
      [&](Tape<double>* tp) {
        auto p = mean_rows(softmax_lastdim(P(tp, logits)));
        return balance_from_probs(p, 1e-7);
      },
      {&logits});
  CHECK(rep.max_violation <= 1.0);
}

// ---------------------------------------------------------------------------
// Conversion schedule

TEST_CASE("conversion schedule: deepest remaining layer first") {
  EncoderConfig cfg = tiny_encoder();
  cfg.n_layers = 3;
  Model<float> model = init_model<float>(cfg, 3);
  TrainConfig tc;
  tc.top_k = 1;
  tc.seed = 5;

  CHECK(count_routed(model) == 0);
  CHECK(next_unconverted(model) == 2);
  CHECK(convert_next_layer(model, tc) == 2);
  CHECK(kind_of(model.layers[2]) == LayerKind::routed);
  CHECK(kind_of(model.layers[1]) == LayerKind::standard);
  CHECK(count_routed(model) == 1);

  CHECK(convert_next_layer(model, tc) == 1);
  CHECK(convert_next_layer(model, tc) == 0);
  CHECK(count_routed(model) == 3);
  CHECK(next_unconverted(model) == -1);
  CHECK_THROWS_AS(convert_next_layer(model, tc), UsageError);
}

TEST_CASE("conversion schedule: fresh weights keyed by layer, not epoch") {
  EncoderConfig cfg = tiny_encoder();
  cfg.n_layers = 3;
  TrainConfig tc;
  tc.seed = 5;

  auto expander_w = [](Model<float>& m, Index layer) {
    std::vector<float> out;
    const std::string want =
        "layer." + std::to_string(layer) + ".expander.proj.w";
    m.visit_params([&](const std::string& n, Parameter<float>& p) {
      if (n == want)
        for (Index i = 0; i < p.numel(); ++i) out.push_back(p.value[i]);
    });
    return out;
  };

  // Identical seeds reproduce identical fresh weights per layer...
  Model<float> m1 = init_model<float>(cfg, 3);
  Model<float> m2 = init_model<float>(cfg, 3);
  for (int i = 0; i < 3; ++i) {
    convert_next_layer(m1, tc);
    convert_next_layer(m2, tc);
  }
  CHECK(expander_w(m1, 2) == expander_w(m2, 2));
  CHECK(expander_w(m1, 0) == expander_w(m2, 0));
  // ...while different layers draw from decorrelated streams.
  CHECK(expander_w(m1, 2) != expander_w(m1, 1));
}

// ---------------------------------------------------------------------------
// Training loop

TEST_CASE("train: single conversion, balance runs only in the convert epoch") {
  const TaskSpec spec = tiny_task();
  const DataSplits data = gen_cluster_task(spec);
  Model<float> model = init_model<float>(tiny_encoder(), 1);

  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.lr = 1e-3;
  tc.convert_layers = 1;
  tc.top_k = 1;
  tc.seed = 3;
  const TrainResult res = train(model, data, tc);

  // 24 examples / batch 8 = 3 steps per epoch, 2 epochs.
  REQUIRE(res.steps.size() == 6);
  LrSchedule sched(6, tc.warmup_frac, tc.lr);
  for (std::size_t i = 0; i < res.steps.size(); ++i) {
    const StepRecord& s = res.steps[i];
    CHECK(s.step == static_cast<Index>(i));
    CHECK(s.epoch == static_cast<Index>(i / 3));
    CHECK(s.lr == doctest::Approx(sched.at(static_cast<Index>(i)))
                      .epsilon(1e-12));
    CHECK(std::isfinite(s.task_loss));
    CHECK(s.task_loss > 0.0);
    CHECK(s.grad_norm > 0.0);
    // Z=1: the conversion epoch is the whole exploration stage, so the
    // balance term contributes there and nowhere else.
    if (s.epoch == 0) {
      CHECK(s.balance_loss > 0.0);
      CHECK(s.total_loss ==
            doctest::Approx(s.task_loss + tc.balance_weight * s.balance_loss)
                .epsilon(1e-5));
    } else {
      CHECK(s.balance_loss == 0.0);
      CHECK(s.total_loss == s.task_loss);
    }
  }

  REQUIRE(res.epochs.size() == 2);
  CHECK(res.epochs[0].converted_layer == 1);  // deepest of two layers
  CHECK(res.epochs[1].converted_layer == -1);
  CHECK(res.epochs[0].balance_active);
  CHECK_FALSE(res.epochs[1].balance_active);

  CHECK(kind_of(model.layers[0]) == LayerKind::standard);
  CHECK(kind_of(model.layers[1]) == LayerKind::routed);

  for (const EpochRecord& e : res.epochs) {
    CHECK(e.val_accuracy >= 0.0);
    CHECK(e.val_accuracy <= 1.0);
    CHECK(std::isfinite(e.train_task_mean));
    // Validation usage covers exactly val_examples * top_k selections on
    // the single routed layer.
    REQUIRE(e.usage.size() == 1);
    CHECK(e.usage[0].layer == 1);
    REQUIRE(e.usage[0].counts.size() == 2);
    CHECK(e.usage[0].total == spec.val_examples * tc.top_k);
    CHECK(e.usage[0].counts[0] + e.usage[0].counts[1] == e.usage[0].total);
  }
}

TEST_CASE("train: balance term active only while conversions are pending") {
  const TaskSpec spec = tiny_task();
  const DataSplits data = gen_cluster_task(spec);
  Model<float> model = init_model<float>(tiny_encoder(), 2);

  TrainConfig tc;
  tc.epochs = 3;
  tc.batch_size = 8;
  tc.lr = 1e-3;
  tc.convert_layers = 2;
  tc.top_k = 1;
  tc.seed = 4;
  const TrainResult res = train(model, data, tc);

  REQUIRE(res.epochs.size() == 3);
  CHECK(res.epochs[0].converted_layer == 1);
  CHECK(res.epochs[1].converted_layer == 0);
  CHECK(res.epochs[2].converted_layer == -1);
  // Epochs 0 and 1 each convert a layer, so the balance term runs through
  // both; once the target count is reached it switches off.
  CHECK(res.epochs[0].balance_active);
  CHECK(res.epochs[1].balance_active);
  CHECK_FALSE(res.epochs[2].balance_active);

  for (const StepRecord& s : res.steps) {
    if (s.epoch <= 1) {
      CHECK(s.balance_loss >= 0.0);
      CHECK(s.total_loss ==
            doctest::Approx(s.task_loss + tc.balance_weight * s.balance_loss)
                .epsilon(1e-5));
    } else {
      CHECK(s.balance_loss == 0.0);
      CHECK(s.total_loss == s.task_loss);
    }
  }

  // Both layers routed; usage reports them in ascending layer order.
  CHECK(count_routed(model) == 2);
  const EpochRecord& last = res.epochs.back();
  REQUIRE(last.usage.size() == 2);
  CHECK(last.usage[0].layer == 0);
  CHECK(last.usage[1].layer == 1);
  CHECK(last.usage[0].total == spec.val_examples * tc.top_k);
  CHECK(last.usage[1].total == spec.val_examples * tc.top_k);
}

TEST_CASE("train: bitwise deterministic given identical seeds") {
  const DataSplits data = gen_cluster_task(tiny_task());
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 8;
  tc.lr = 1e-3;
  tc.convert_layers = 1;
  tc.seed = 9;

  Model<float> m1 = init_model<float>(tiny_encoder(), 5);
  Model<float> m2 = init_model<float>(tiny_encoder(), 5);
  const TrainResult r1 = train(m1, data, tc);
  const TrainResult r2 = train(m2, data, tc);

  CHECK(flatten(m1) == flatten(m2));
  REQUIRE(r1.steps.size() == r2.steps.size());
  for (std::size_t i = 0; i < r1.steps.size(); ++i) {
    CHECK(r1.steps[i].total_loss == r2.steps[i].total_loss);
    CHECK(r1.steps[i].grad_norm == r2.steps[i].grad_norm);
  }
  CHECK(r1.epochs.back().val_accuracy == r2.epochs.back().val_accuracy);
}

TEST_CASE("train: configuration and data validation") {
  const EncoderConfig enc = tiny_encoder();  // 2 layers, 2 heads
  auto reject = [&enc](auto mutate) {
    TrainConfig tc;
    mutate(tc);
    CHECK_THROWS_AS(tc.validate(enc), ConfigError);
  };
  reject([](TrainConfig& tc) { tc.epochs = 0; });
  reject([](TrainConfig& tc) { tc.batch_size = 0; });
  reject([](TrainConfig& tc) { tc.lr = 0.0; });
  reject([](TrainConfig& tc) { tc.weight_decay = -0.1; });
  reject([](TrainConfig& tc) { tc.clip_norm = 0.0; });
  reject([](TrainConfig& tc) { tc.warmup_frac = 1.0; });
  reject([](TrainConfig& tc) { tc.convert_layers = 3; });  // > n_layers
  reject([](TrainConfig& tc) {  // one conversion per epoch
    tc.convert_layers = 2;
    tc.epochs = 1;
  });
  reject([](TrainConfig& tc) { tc.top_k = 0; });
  reject([](TrainConfig& tc) { tc.top_k = 3; });  // > n_heads
  reject([](TrainConfig& tc) { tc.balance_weight = -1.0; });
  reject([](TrainConfig& tc) { tc.balance_eps = 0.0; });

  // Defaults validate cleanly.
  TrainConfig ok;
  CHECK_NOTHROW(ok.validate(enc));

  // An empty training split is rejected before any work happens.
  Model<float> model = init_model<float>(enc, 1);
  DataSplits empty;
  empty.train.seq_len = 8;
  empty.val.seq_len = 8;
  TrainConfig tc;
  CHECK_THROWS_AS(train(model, empty, tc), ConfigError);
}

TEST_CASE("train: non-finite loss raises instead of training on garbage") {
  const DataSplits data = gen_cluster_task(tiny_task());
  Model<float> model = init_model<float>(tiny_encoder(), 1);
  named(model, "classifier.b")->value[0] =
      std::numeric_limits<float>::quiet_NaN();

  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 24;
  tc.convert_layers = 0;
  CHECK_THROWS_AS(train(model, data, tc), NumericError);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST_CASE("accuracy: pure evaluation with optional usage collection") {
  const TaskSpec spec = tiny_task();
  const DataSplits data = gen_cluster_task(spec);
  Model<float> model = init_model<float>(tiny_encoder(), 6);

  // A fully standard model routes nothing.
  std::vector<LayerUsage> usage;
  const double acc = accuracy(model, data.val, 8, &usage);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
  CHECK(usage.empty());
  // Evaluation mutates nothing: a second pass agrees exactly.
  CHECK(accuracy(model, data.val, 8) == acc);

  // After one conversion the routed layer shows up in the usage table.
  TrainConfig tc;
  tc.top_k = 2;
  convert_next_layer(model, tc);
  accuracy(model, data.val, 8, &usage);
  REQUIRE(usage.size() == 1);
  CHECK(usage[0].layer == 1);
  CHECK(usage[0].total == spec.val_examples * tc.top_k);
}
