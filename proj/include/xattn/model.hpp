#pragma once

// The full classifier: embeddings, a stack of layers each of which is
// standard, routed (expert attention), or deterministic (post-pruning),
// then [CLS] readout, optional tanh pooler, and the linear head.
//
// Parameter traversal order is the contract for checkpoints and optimizer
// state, so visit_params must stay stable; names are hierarchical
// ("layer.3.expert.5.q.w") and the only router parameters anywhere live
// under ".router.", which is what makes router removal checkable.

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "xattn/expert.hpp"

namespace xattn {

enum class LayerKind { standard, routed, deterministic };

inline const char* to_string(LayerKind k) {
  switch (k) {
    case LayerKind::standard: return "standard";
    case LayerKind::routed: return "routed";
    case LayerKind::deterministic: return "deterministic";
  }
  return "?";
}

inline LayerKind layer_kind_from_string(const std::string& s) {
  if (s == "standard") return LayerKind::standard;
  if (s == "routed") return LayerKind::routed;
  if (s == "deterministic") return LayerKind::deterministic;
  throw ConfigError("unknown layer kind '" + s + "'");
}

template <class S>
using Layer = std::variant<StandardLayer<S>, MoELayer<S>, DeterministicLayer<S>>;

template <class S>
LayerKind kind_of(const Layer<S>& layer) {
  if (std::holds_alternative<StandardLayer<S>>(layer)) return LayerKind::standard;
  if (std::holds_alternative<MoELayer<S>>(layer)) return LayerKind::routed;
  return LayerKind::deterministic;
}

template <class S>
struct Model {
  EncoderConfig cfg;
  Embedding<S> embed;
  std::vector<Layer<S>> layers;
  std::optional<Dense<S>> pooler;  // (d, d) + tanh when cfg.use_pooler
  Dense<S> classifier;             // (d, n_classes)

  void visit_params(const ParamFn<S>& fn) {
    embed.visit("embed", fn);
    for (std::size_t i = 0; i < layers.size(); ++i) {
      const std::string prefix = "layer." + std::to_string(i);
      std::visit([&](auto& l) { l.visit(prefix, fn); }, layers[i]);
    }
    if (pooler) pooler->visit("pooler", fn);
    classifier.visit("classifier", fn);
  }

  Index n_params() {
    Index n = 0;
    visit_params([&n](const std::string&, Parameter<S>& p) { n += p.numel(); });
    return n;
  }
};

// Fresh model: truncated-normal(init_std) weights clipped at two sigma,
// zero biases, unit LayerNorm gains. One RNG stream in visitation order
// keeps initialization reproducible for a given seed.
template <class S>
Model<S> init_model(const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Model<S> m;
  m.cfg = cfg;
  m.embed = Embedding<S>(cfg.vocab_size, cfg.max_len, cfg.d_model);
  for (Index i = 0; i < cfg.n_layers; ++i)
    m.layers.emplace_back(StandardLayer<S>(cfg.d_model, cfg.n_heads, cfg.d_ff));
  if (cfg.use_pooler) m.pooler = Dense<S>(cfg.d_model, cfg.d_model);
  m.classifier = Dense<S>(cfg.d_model, cfg.n_classes);

  Rng rng(derive_seed(seed, 0));
  m.embed.init(rng, cfg.init_std);
  for (auto& layer : m.layers)
    std::get<StandardLayer<S>>(layer).init(rng, cfg.init_std);
  if (m.pooler) m.pooler->init(rng, cfg.init_std);
  m.classifier.init(rng, cfg.init_std);
  return m;
}

// Routing activity of one forward pass, one record per routed layer.
template <class S>
struct RoutingTrace {
  std::vector<RoutingRecord<S>> records;
};

template <class S>
Value<S> encode(Tape<S>* tape, Model<S>& m, const Tensor<std::int32_t>& ids,
                const Tensor<std::int32_t>& mask,
                RoutingTrace<S>* trace = nullptr) {
  if (ids.rank() != 2 || !ids.same_shape(mask))
    throw ShapeError("encode: ids " + shape_str(ids.shape()) +
                     " and mask " + shape_str(mask.shape()) +
                     " must both be (B,L)");
  if (ids.dim(1) > m.cfg.max_len)
    throw ShapeError("encode: sequence length " + std::to_string(ids.dim(1)) +
                     " exceeds max_len " + std::to_string(m.cfg.max_len));
  const Tensor<S> key_bias = make_key_bias<S>(mask);
  Value<S> x = embed_forward(tape, m.embed, ids, m.cfg.ln_eps);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    x = std::visit(
        [&](auto& layer) -> Value<S> {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, StandardLayer<S>>) {
            return standard_layer_forward(tape, layer, x, key_bias,
                                          m.cfg.ln_eps);
          } else if constexpr (std::is_same_v<L, MoELayer<S>>) {
            RoutingRecord<S> rec;
            auto y = moe_forward(tape, layer, x, key_bias, m.cfg.ln_eps,
                                 trace ? &rec : nullptr);
            if (trace) {
              rec.layer = static_cast<Index>(i);
              trace->records.push_back(std::move(rec));
            }
            return y;
          } else {
            return deterministic_forward(tape, layer, x, key_bias,
                                         m.cfg.ln_eps);
          }
        },
        m.layers[i]);
  }
  return x;
}

template <class S>
Value<S> classify(Tape<S>* tape, Model<S>& m, const Tensor<std::int32_t>& ids,
                  const Tensor<std::int32_t>& mask,
                  RoutingTrace<S>* trace = nullptr) {
  Value<S> enc = encode(tape, m, ids, mask, trace);
  Value<S> cls = take_token(enc, 0);
  if (m.pooler) cls = vtanh(dense(tape, *m.pooler, cls));
  return dense(tape, m.classifier, cls);
}

// Argmax class predictions from an untraced forward pass.
template <class S>
std::vector<int> predict(Model<S>& m, const Tensor<std::int32_t>& ids,
                         const Tensor<std::int32_t>& mask,
                         RoutingTrace<S>* trace = nullptr) {
  Value<S> logits = classify<S>(nullptr, m, ids, mask, trace);
  const Index B = logits.t().dim(0), C = logits.t().dim(1);
  std::vector<int> out(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b) {
    Index best = 0;
    for (Index c = 1; c < C; ++c)
      if (logits.t().at({b, c}) > logits.t().at({b, best})) best = c;
    out[static_cast<std::size_t>(b)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace xattn
