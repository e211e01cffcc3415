#pragma once

// Analytic parameter and FLOP accounting, plus a wall-clock throughput
// benchmark.
//
// FLOP convention: one multiply-accumulate = 2 FLOPs, so a (p,q)x(q,r)
// matmul costs 2pqr and a bias add costs one FLOP per output element.
// Nonlinearity costs per element: LayerNorm 5, softmax 5, GELU 8, tanh 8.
// Residual adds and the 1/sqrt(d_head) score scaling are counted; index
// permutations (head split/merge) and embedding lookups are free. The
// formulas walk exactly the ops the forward pass executes, and the tests
// hold them to independently-derived totals.
//
// Ratios follow the deployment question they answer: parameter reduction is
// over transformer parameters (embedding tables excluded, classifier head
// included); FLOP reduction is over the encoder stack, the only part
// conversion touches.

#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "xattn/data.hpp"
#include "xattn/model.hpp"

namespace xattn {

// ---------------------------------------------------------------------------
// Parameters

inline Index standard_layer_params(const EncoderConfig& c) {
  const Index d = c.d_model, dff = c.d_ff;
  const Index attn = 4 * (d * d + d);
  const Index ffn = d * dff + dff + dff * d + d;
  const Index norms = 2 * (2 * d);
  return attn + ffn + norms;
}

inline Index routed_layer_params(const EncoderConfig& c) {
  const Index d = c.d_model, dh = c.d_head(), n = c.n_heads;
  const Index experts = n * 3 * (d * dh + dh);
  const Index expander = dh * d + d + 2 * d;  // projection + its LayerNorm
  const Index router = d * n + n;
  const Index out_norm = 2 * d;
  return experts + expander + router + out_norm;
}

inline Index pruned_layer_params(const EncoderConfig& c, Index m) {
  const Index d = c.d_model, dh = c.d_head();
  return m * 3 * (d * dh + dh) + (dh * d + d + 2 * d) + 2 * d;
}

inline Index embedding_params(const EncoderConfig& c) {
  return c.vocab_size * c.d_model + c.max_len * c.d_model + 2 * c.d_model;
}

inline Index head_params(const EncoderConfig& c) {
  const Index pooler = c.use_pooler ? c.d_model * c.d_model + c.d_model : 0;
  return pooler + c.d_model * c.n_classes + c.n_classes;
}

// Transformer parameters with Z layers pruned to m experts each.
inline Index transformer_params(const EncoderConfig& c, Index z_pruned,
                                Index m) {
  return (c.n_layers - z_pruned) * standard_layer_params(c) +
         z_pruned * pruned_layer_params(c, m) + head_params(c);
}

// Fraction of transformer parameters removed by pruning Z layers to m
// experts, relative to the all-standard baseline.
inline double param_reduction(const EncoderConfig& c, Index z_pruned, Index m) {
  const double base = static_cast<double>(transformer_params(c, 0, m));
  const double variant =
      static_cast<double>(transformer_params(c, z_pruned, m));
  return 1.0 - variant / base;
}

// Measured count over a live model, embeddings excluded to match the
// analytic transformer_params.
template <class S>
Index measured_transformer_params(Model<S>& model) {
  Index n = 0;
  model.visit_params([&n](const std::string& name, Parameter<S>& p) {
    if (name.rfind("embed.", 0) != 0) n += p.numel();
  });
  return n;
}

// ---------------------------------------------------------------------------
// FLOPs per example at sequence length L

inline std::int64_t standard_layer_flops(const EncoderConfig& c, Index L) {
  const std::int64_t d = c.d_model, dff = c.d_ff, h = c.n_heads, l = L;
  std::int64_t fl = 0;
  fl += 4 * 2 * l * d * d + 4 * l * d;  // q,k,v,out projections + biases
  fl += h * l * l;                      // score scaling
  fl += 2 * l * l * d;                  // scores (all heads)
  fl += 5 * h * l * l;                  // softmax
  fl += 2 * l * l * d;                  // attention-weighted values
  fl += l * d;                          // attention residual add
  fl += 5 * l * d;                      // post-attention LayerNorm
  fl += 2 * l * d * dff + l * dff;      // FFN in + bias
  fl += 8 * l * dff;                    // GELU
  fl += 2 * l * dff * d + l * d;        // FFN out + bias
  fl += l * d;                          // FFN residual add
  fl += 5 * l * d;                      // post-FFN LayerNorm
  return fl;
}

// Work of one expert's attention + shared expander on a full sequence,
// including its axpy into the combined output.
inline std::int64_t per_expert_flops(const EncoderConfig& c, Index L) {
  const std::int64_t d = c.d_model, dh = c.d_head(), l = L;
  std::int64_t fl = 0;
  fl += 3 * 2 * l * d * dh + 3 * l * dh;  // q,k,v projections + biases
  fl += l * l;                            // score scaling
  fl += 2 * l * l * dh;                   // scores
  fl += 5 * l * l;                        // softmax
  fl += 2 * l * l * dh;                   // attention-weighted values
  fl += 2 * l * dh * d + l * d;           // expander projection + bias
  fl += 8 * l * d;                        // GELU
  fl += 5 * l * d;                        // expander LayerNorm
  fl += 2 * l * d;                        // scaled accumulation into E
  return fl;
}

inline std::int64_t pruned_layer_flops(const EncoderConfig& c, Index L,
                                       Index m) {
  const std::int64_t d = c.d_model, l = L;
  return m * per_expert_flops(c, L) + 5 * l * d + l * d;  // out LN + residual
}

// A routed layer evaluates k experts per example plus the router itself.
inline std::int64_t routed_layer_flops(const EncoderConfig& c, Index L,
                                       Index k) {
  const std::int64_t router = 2 * c.d_model * c.n_heads + c.n_heads;
  return pruned_layer_flops(c, L, k) + router;
}

inline std::int64_t embedding_flops(const EncoderConfig& c, Index L) {
  // Lookups are free; position add + LayerNorm are not.
  return L * c.d_model + 5 * L * c.d_model;
}

inline std::int64_t head_flops(const EncoderConfig& c) {
  const std::int64_t d = c.d_model;
  std::int64_t fl = 2 * d * c.n_classes + c.n_classes;
  if (c.use_pooler) fl += 2 * d * d + d + 8 * d;  // pooler + bias + tanh
  return fl;
}

// Encoder-stack FLOPs with Z layers pruned to m experts.
inline std::int64_t encoder_flops(const EncoderConfig& c, Index L,
                                  Index z_pruned, Index m) {
  return (c.n_layers - z_pruned) * standard_layer_flops(c, L) +
         z_pruned * pruned_layer_flops(c, L, m);
}

// Fraction of encoder FLOPs still executed after pruning Z layers to m.
inline double flops_remaining(const EncoderConfig& c, Index L, Index z_pruned,
                              Index m) {
  return static_cast<double>(encoder_flops(c, L, z_pruned, m)) /
         static_cast<double>(encoder_flops(c, L, 0, m));
}

// Per-example FLOPs of a live model at length L, walking its actual layer
// kinds (routed layers counted at their top_k).
template <class S>
std::int64_t measured_encoder_flops(Model<S>& model, Index L) {
  std::int64_t fl = 0;
  for (const auto& layer : model.layers) {
    switch (kind_of(layer)) {
      case LayerKind::standard:
        fl += standard_layer_flops(model.cfg, L);
        break;
      case LayerKind::routed:
        fl += routed_layer_flops(model.cfg, L,
                                 std::get<MoELayer<S>>(layer).top_k);
        break;
      case LayerKind::deterministic:
        fl += pruned_layer_flops(
            model.cfg, L,
            std::get<DeterministicLayer<S>>(layer).n_experts());
        break;
    }
  }
  return fl;
}

// ---------------------------------------------------------------------------
// Cost report

struct CostReport {
  Index transformer_params = 0;
  Index embedding_params_ = 0;
  std::int64_t encoder_flops_ = 0;  // per example at seq_len
  std::int64_t aux_flops_ = 0;      // embeddings + pooler/classifier
  Index seq_len = 0;
  double param_reduction_vs_standard = 0.0;
  double flops_remaining_vs_standard = 0.0;
  std::vector<std::string> layer_kinds;
};

template <class S>
CostReport cost_report(Model<S>& model, Index L) {
  CostReport r;
  r.seq_len = L;
  r.transformer_params = measured_transformer_params(model);
  Index total = model.n_params();
  r.embedding_params_ = total - r.transformer_params;
  r.encoder_flops_ = measured_encoder_flops(model, L);
  r.aux_flops_ = head_flops(model.cfg) + embedding_flops(model.cfg, L);
  const Index base_params = transformer_params(model.cfg, 0, 1);
  r.param_reduction_vs_standard =
      1.0 - static_cast<double>(r.transformer_params) /
                static_cast<double>(base_params);
  r.flops_remaining_vs_standard =
      static_cast<double>(r.encoder_flops_) /
      static_cast<double>(encoder_flops(model.cfg, L, 0, 1));
  for (const auto& layer : model.layers)
    r.layer_kinds.emplace_back(to_string(kind_of(layer)));
  return r;
}

inline nlohmann::json cost_report_to_json(const CostReport& r) {
  return nlohmann::json{
      {"seq_len", r.seq_len},
      {"transformer_params", r.transformer_params},
      {"embedding_params", r.embedding_params_},
      {"encoder_flops_per_example", r.encoder_flops_},
      {"embed_and_head_flops_per_example", r.aux_flops_},
      {"param_reduction_vs_standard", r.param_reduction_vs_standard},
      {"flops_remaining_vs_standard", r.flops_remaining_vs_standard},
      {"layer_kinds", r.layer_kinds}};
}

// ---------------------------------------------------------------------------
// Throughput benchmark: untraced forward passes over a synthetic batch.

struct BenchReport {
  Index batch = 0;
  Index seq_len = 0;
  Index warmup_iters = 0;
  Index timed_iters = 0;
  double mean_ms_per_batch = 0.0;
  double median_ms_per_batch = 0.0;
  double min_ms_per_batch = 0.0;
  double examples_per_sec = 0.0;  // batch / median seconds per batch
};

// Fewer than five timed iterations makes the median meaningless, so that is
// rejected rather than silently reported.
template <class S>
BenchReport bench_forward(Model<S>& model, Index batch, Index L,
                          Index warmup_iters, Index timed_iters,
                          std::uint64_t seed = 7) {
  if (batch < 1 || warmup_iters < 0 || timed_iters < 5)
    throw UsageError("bench_forward: need batch>=1 and timed_iters>=5");
  Tensor<std::int32_t> ids({batch, L});
  Tensor<std::int32_t> mask({batch, L});
  Rng rng(derive_seed(seed, 0));
  for (Index i = 0; i < ids.numel(); ++i) {
    ids[i] = static_cast<std::int32_t>(
        uniform_below(rng, static_cast<std::uint64_t>(model.cfg.vocab_size)));
    mask[i] = 1;
  }
  for (Index b = 0; b < batch; ++b) ids.at({b, 0}) = kClsId;

  for (Index i = 0; i < warmup_iters; ++i)
    (void)classify<S>(nullptr, model, ids, mask);

  using clock = std::chrono::steady_clock;
  BenchReport r;
  r.batch = batch;
  r.seq_len = L;
  r.warmup_iters = warmup_iters;
  r.timed_iters = timed_iters;
  std::vector<double> seconds;
  seconds.reserve(static_cast<std::size_t>(timed_iters));
  double total_s = 0.0;
  for (Index i = 0; i < timed_iters; ++i) {
    const auto t0 = clock::now();
    (void)classify<S>(nullptr, model, ids, mask);
    const auto t1 = clock::now();
    seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
    total_s += seconds.back();
  }
  std::sort(seconds.begin(), seconds.end());
  const std::size_t n = seconds.size();
  const double median_s = (n % 2 == 1)
                              ? seconds[n / 2]
                              : 0.5 * (seconds[n / 2 - 1] + seconds[n / 2]);
  r.mean_ms_per_batch = total_s * 1e3 / static_cast<double>(timed_iters);
  r.median_ms_per_batch = median_s * 1e3;
  r.min_ms_per_batch = seconds.front() * 1e3;
  r.examples_per_sec = static_cast<double>(batch) / median_s;
  return r;
}

inline nlohmann::json bench_report_to_json(const BenchReport& r) {
  return nlohmann::json{{"batch", r.batch},
                        {"seq_len", r.seq_len},
                        {"warmup_iters", r.warmup_iters},
                        {"timed_iters", r.timed_iters},
                        {"mean_ms_per_batch", r.mean_ms_per_batch},
                        {"median_ms_per_batch", r.median_ms_per_batch},
                        {"min_ms_per_batch", r.min_ms_per_batch},
                        {"examples_per_sec", r.examples_per_sec}};
}

}  // namespace xattn
