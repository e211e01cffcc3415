#pragma once

// Two-stage routed training.
//
// Stage 1 (adaptation): at the start of each epoch, while fewer than
// `convert_layers` layers have been converted, one more standard layer is
// rebuilt as an expert-attention layer, deepest remaining layer first. A
// symmetric-KL balance loss nudges the routers toward uniform expert usage
// while conversions are still pending; the instant the last scheduled
// conversion lands, the balance term switches off.
//
// Stage 2 (specialization): remaining epochs train the task loss alone, so
// routers stop receiving gradient entirely (selection is discrete and the
// chosen expert's output is not weighted by the gate, so the task loss
// never touches the router) and experts specialize for the traffic the
// frozen routing sends them.
//
// One optimizer and one LR schedule (linear warmup, cosine decay) span both
// stages. Optimizer moments are keyed by parameter name so they survive
// layer conversion, which swaps out parameter objects mid-run.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "xattn/data.hpp"
#include "xattn/model.hpp"

namespace xattn {

struct TrainConfig {
  Index epochs = 4;
  Index batch_size = 64;
  double lr = 2e-5;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  double warmup_frac = 0.10;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  Index convert_layers = 0;  // Z: how many layers get expert attention
  Index top_k = 1;           // experts per example in converted layers
  double balance_weight = 0.1;  // lambda
  double balance_eps = 1e-7;    // epsilon inside the balance logs
  std::uint64_t seed = 1;       // shuffling + conversion initialization

  void validate(const EncoderConfig& enc) const {
    if (epochs < 1) throw ConfigError("epochs must be positive");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (!(lr > 0.0)) throw ConfigError("lr must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (clip_norm <= 0.0) throw ConfigError("clip_norm must be positive");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
      throw ConfigError("warmup_frac must be in [0,1)");
    if (convert_layers < 0 || convert_layers > enc.n_layers)
      throw ConfigError("convert_layers must be in [0, n_layers]");
    if (convert_layers > epochs)
      throw ConfigError("convert_layers " + std::to_string(convert_layers) +
                        " cannot exceed epochs " + std::to_string(epochs) +
                        " (one conversion per epoch)");
    if (top_k < 1 || top_k > enc.n_heads)
      throw ConfigError("top_k must be in [1, n_heads]");
    if (balance_weight < 0.0) throw ConfigError("balance_weight must be >= 0");
    if (!(balance_eps > 0.0)) throw ConfigError("balance_eps must be positive");
  }
};

// ---------------------------------------------------------------------------
// LR schedule: linear warmup over ceil(warmup_frac * total) steps, then
// cosine decay toward zero over the remainder.

struct LrSchedule {
  Index total_steps = 0;
  Index warmup_steps = 0;
  double base_lr = 0.0;

  LrSchedule() = default;
  LrSchedule(Index total, double frac, double base)
      : total_steps(total),
        warmup_steps(static_cast<Index>(
            std::ceil(frac * static_cast<double>(total)))),
        base_lr(base) {}

  // `step` is 0-based: the value used for the (step+1)-th update.
  double at(Index step) const {
    if (warmup_steps > 0 && step < warmup_steps)
      return base_lr * static_cast<double>(step + 1) /
             static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return base_lr;
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
  }
};

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay, moments keyed by parameter name.

template <class S>
struct AdamW {
  struct Moments {
    Tensor<S> m, v;
  };

  double beta1, beta2, eps, weight_decay;
  Index t = 0;  // global update count, shared by late-added parameters
  std::map<std::string, Moments> slots;

  AdamW(const TrainConfig& tc)
      : beta1(tc.adam_beta1), beta2(tc.adam_beta2), eps(tc.adam_eps),
        weight_decay(tc.weight_decay) {}

  void step(Model<S>& model, double lr) {
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    model.visit_params([&](const std::string& name, Parameter<S>& p) {
      auto [it, fresh] = slots.try_emplace(name);
      if (fresh || !it->second.m.same_shape(p.value)) {
        it->second.m = Tensor<S>(p.value.shape());
        it->second.v = Tensor<S>(p.value.shape());
      }
      Moments& mo = it->second;
      for (Index i = 0; i < p.numel(); ++i) {
        const double g = static_cast<double>(p.grad[i]);
        const double m = beta1 * static_cast<double>(mo.m[i]) +
                         (1.0 - beta1) * g;
        const double v = beta2 * static_cast<double>(mo.v[i]) +
                         (1.0 - beta2) * g * g;
        mo.m[i] = static_cast<S>(m);
        mo.v[i] = static_cast<S>(v);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + eps);
        const double theta = static_cast<double>(p.value[i]);
        p.value[i] =
            static_cast<S>(theta * (1.0 - lr * weight_decay) - lr * update);
      }
    });
  }
};

// Global-norm gradient clipping. Returns the pre-clip norm.
template <class S>
double clip_gradients(Model<S>& model, double max_norm) {
  double sq = 0.0;
  model.visit_params([&sq](const std::string&, Parameter<S>& p) {
    for (Index i = 0; i < p.numel(); ++i) {
      const double g = static_cast<double>(p.grad[i]);
      sq += g * g;
    }
  });
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const S scale = static_cast<S>(max_norm / norm);
    model.visit_params([scale](const std::string&, Parameter<S>& p) {
      p.grad.flat() *= scale;
    });
  }
  return norm;
}

// ---------------------------------------------------------------------------
// Balance loss: symmetric KL between the batch-mean routing distribution p
// and the uniform distribution u, both shifted by eps inside the logs.
//   KL(t || exp(x)) form: sum t * (log t - x)
//   loss = 0.5*KL(u+eps, log(p+eps)) + 0.5*KL(p+eps, log(u+eps))

template <class S>
Value<S> balance_from_probs(const Value<S>& p, S eps) {
  const Index n = p.t().numel();
  if (p.t().rank() != 1 || n < 1)
    throw ShapeError("balance_from_probs: want a probability vector, got " +
                     shape_str(p.t().shape()));
  const S u = S(1) / S(n);
  const double cu = static_cast<double>(u) + static_cast<double>(eps);
  const double lcu = std::log(cu);

  auto pe = add_const(p, eps);
  auto lp = vlog(pe);
  // sum (u+eps)*(log(u+eps) - log(p+eps))
  auto term_forward =
      add_const(scale(sum_all(lp), S(-cu)), S(double(n) * cu * lcu));
  // sum (p+eps)*(log(p+eps) - log(u+eps))
  auto term_reverse = add(dot(pe, lp), scale(sum_all(pe), S(-lcu)));
  return scale(add(term_forward, term_reverse), S(0.5));
}

// Mean balance loss over all routed layers seen in a forward pass.
template <class S>
Value<S> balance_loss(const std::vector<RoutingRecord<S>>& records, S eps) {
  if (records.empty())
    throw UsageError("balance_loss: no routed layers in the trace");
  Value<S> acc;
  for (const RoutingRecord<S>& rec : records) {
    auto p = mean_rows(softmax_lastdim(rec.gate_logits));
    auto term = balance_from_probs(p, eps);
    acc = acc.data ? add(acc, term) : term;
  }
  return scale(acc, S(1.0 / double(records.size())));
}

// ---------------------------------------------------------------------------
// Layer conversion schedule: deepest unconverted layer first.

template <class S>
Index next_unconverted(const Model<S>& model) {
  for (Index i = static_cast<Index>(model.layers.size()) - 1; i >= 0; --i)
    if (kind_of(model.layers[static_cast<std::size_t>(i)]) ==
        LayerKind::standard)
      return i;
  return -1;
}

template <class S>
Index count_routed(const Model<S>& model) {
  Index n = 0;
  for (const auto& l : model.layers)
    if (kind_of(l) != LayerKind::standard) ++n;
  return n;
}

// Converts the deepest remaining standard layer in place. The conversion
// RNG stream is derived from (seed, layer index), so which epoch a layer
// converts in does not change its fresh weights.
template <class S>
Index convert_next_layer(Model<S>& model, const TrainConfig& tc) {
  const Index idx = next_unconverted(model);
  if (idx < 0) throw UsageError("convert_next_layer: nothing left to convert");
  Rng rng(derive_seed(tc.seed, 0x1000 + static_cast<std::uint64_t>(idx)));
  auto& slot = model.layers[static_cast<std::size_t>(idx)];
  slot = convert_layer(std::get<StandardLayer<S>>(slot), tc.top_k, rng,
                       model.cfg.init_std);
  return idx;
}

// ---------------------------------------------------------------------------
// Training loop

struct StepRecord {
  Index step = 0;   // global, 0-based
  Index epoch = 0;  // 0-based
  double lr = 0.0;
  double task_loss = 0.0;
  double balance_loss = 0.0;  // post-lambda contribution is lambda * this
  double total_loss = 0.0;
  double grad_norm = 0.0;
};

struct LayerUsage {
  Index layer = -1;
  std::vector<Index> counts;  // selections per expert over the dataset
  Index total = 0;            // sum of counts = examples * top_k
};

struct EpochRecord {
  Index epoch = 0;
  Index converted_layer = -1;  // layer converted at this epoch's start, or -1
  bool balance_active = false;
  double train_task_mean = 0.0;
  double val_accuracy = 0.0;
  std::vector<LayerUsage> usage;  // from the epoch-end validation pass
};

struct TrainResult {
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
};

template <class S>
double accuracy(Model<S>& model, const Dataset& ds, Index batch_size,
                std::vector<LayerUsage>* usage_out = nullptr) {
  const auto order = identity_order(ds.size());
  Index correct = 0;
  std::map<Index, LayerUsage> usage;
  for (Index begin = 0; begin < ds.size(); begin += batch_size) {
    const Index end = std::min(ds.size(), begin + batch_size);
    Batch batch = make_batch(ds, order, begin, end);
    RoutingTrace<S> trace;
    const auto preds =
        predict(model, batch.ids, batch.mask, usage_out ? &trace : nullptr);
    for (std::size_t i = 0; i < preds.size(); ++i)
      if (preds[i] == batch.labels[i]) ++correct;
    for (const RoutingRecord<S>& rec : trace.records) {
      LayerUsage& lu = usage[rec.layer];
      if (lu.counts.empty()) {
        lu.layer = rec.layer;
        lu.counts.assign(
            static_cast<std::size_t>(rec.gate_logits.t().dim(1)), 0);
      }
      for (const auto& picks : rec.selected)
        for (Index e : picks) {
          ++lu.counts[static_cast<std::size_t>(e)];
          ++lu.total;
        }
    }
  }
  if (usage_out) {
    usage_out->clear();
    for (auto& [layer, lu] : usage) usage_out->push_back(std::move(lu));
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

template <class S>
TrainResult train(Model<S>& model, const DataSplits& data,
                  const TrainConfig& tc) {
  tc.validate(model.cfg);
  if (data.train.size() < 1) throw ConfigError("empty training split");
  const Index steps_per_epoch =
      (data.train.size() + tc.batch_size - 1) / tc.batch_size;
  LrSchedule sched(steps_per_epoch * tc.epochs, tc.warmup_frac, tc.lr);
  AdamW<S> opt(tc);
  TrainResult result;

  Index global_step = 0;
  for (Index epoch = 0; epoch < tc.epochs; ++epoch) {
    EpochRecord erec;
    erec.epoch = epoch;
    // The balance term runs for every epoch that still converts a layer
    // (the exploration stage) and is disabled once the target count is
    // reached, so the count is read before this epoch's conversion.
    erec.balance_active =
        count_routed(model) < tc.convert_layers && tc.balance_weight > 0.0;
    if (count_routed(model) < tc.convert_layers)
      erec.converted_layer = convert_next_layer(model, tc);

    Rng shuffle_rng(derive_seed(tc.seed, 0x2000 + static_cast<std::uint64_t>(epoch)));
    const auto order = shuffled_indices(data.train.size(), shuffle_rng);

    double task_sum = 0.0;
    Index task_batches = 0;
    for (Index begin = 0; begin < data.train.size(); begin += tc.batch_size) {
      const Index end = std::min(data.train.size(), begin + tc.batch_size);
      Batch batch = make_batch(data.train, order, begin, end);

      model.visit_params(
          [](const std::string&, Parameter<S>& p) { p.zero_grad(); });
      Tape<S> tape;
      RoutingTrace<S> trace;
      Value<S> logits = classify(&tape, model, batch.ids, batch.mask, &trace);
      Value<S> task = cross_entropy_mean(logits, batch.labels);
      StepRecord srec;
      srec.step = global_step;
      srec.epoch = epoch;
      srec.task_loss = static_cast<double>(task.t()[0]);

      Value<S> total = task;
      if (erec.balance_active && !trace.records.empty()) {
        Value<S> bal =
            balance_loss(trace.records, static_cast<S>(tc.balance_eps));
        srec.balance_loss = static_cast<double>(bal.t()[0]);
        total = add(task, scale(bal, static_cast<S>(tc.balance_weight)));
      }
      srec.total_loss = static_cast<double>(total.t()[0]);
      if (!std::isfinite(srec.total_loss))
        throw NumericError("non-finite loss at step " +
                           std::to_string(global_step));

      tape.backward(total);
      srec.grad_norm = clip_gradients(model, tc.clip_norm);
      srec.lr = sched.at(global_step);
      opt.step(model, srec.lr);

      task_sum += srec.task_loss;
      ++task_batches;
      result.steps.push_back(srec);
      ++global_step;
    }

    erec.train_task_mean = task_sum / static_cast<double>(task_batches);
    erec.val_accuracy = accuracy(model, data.val, tc.batch_size, &erec.usage);
    result.epochs.push_back(std::move(erec));
  }
  return result;
}

}  // namespace xattn
