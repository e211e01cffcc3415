#pragma once

// Expert-attention layer: the drop-in replacement for a standard encoder
// layer. Each attention head becomes an independent expert with its own
// d -> d_head projections; a shared expander FFN lifts the selected head's
// output back to d; a linear router over the [CLS] embedding picks the
// top-k experts per example (argmax only, no probability weighting); the
// layer output is LayerNorm(E + X) where E averages the selected experts'
// expander outputs. After pruning, a deterministic layer runs the retained
// experts for every example with no router at all.

#include <algorithm>
#include <numeric>
#include <vector>

#include "xattn/encoder.hpp"

namespace xattn {

template <class S>
struct ExpertHead {
  Dense<S> q, k, v;  // each (d, d_head)

  ExpertHead() = default;
  ExpertHead(Index d, Index dh) : q(d, dh), k(d, dh), v(d, dh) {}

  void visit(const std::string& prefix, const ParamFn<S>& fn) {
    q.visit(prefix + ".q", fn);
    k.visit(prefix + ".k", fn);
    v.visit(prefix + ".v", fn);
  }
};

// ExpFFN(x) = LayerNorm(GELU(W x + b)), shared across a layer's experts.
template <class S>
struct ExpanderFFN {
  Dense<S> proj;  // (d_head, d)
  Norm<S> ln;

  ExpanderFFN() = default;
  ExpanderFFN(Index dh, Index d) : proj(dh, d), ln(d) {}

  void visit(const std::string& prefix, const ParamFn<S>& fn) {
    proj.visit(prefix + ".proj", fn);
    ln.visit(prefix + ".ln", fn);
  }
};

template <class S>
struct MoELayer {
  std::vector<ExpertHead<S>> experts;
  ExpanderFFN<S> expander;
  Dense<S> router;  // (d, n_experts)
  Norm<S> ln_out;
  Index top_k = 1;

  MoELayer() = default;
  MoELayer(Index d, Index dh, Index n_experts, Index k)
      : expander(dh, d), router(d, n_experts), ln_out(d), top_k(k) {
    experts.reserve(static_cast<std::size_t>(n_experts));
    for (Index i = 0; i < n_experts; ++i) experts.emplace_back(d, dh);
  }

  Index n_experts() const { return static_cast<Index>(experts.size()); }

  void visit(const std::string& prefix, const ParamFn<S>& fn) {
    for (std::size_t i = 0; i < experts.size(); ++i)
      experts[i].visit(prefix + ".expert." + std::to_string(i), fn);
    expander.visit(prefix + ".expander", fn);
    router.visit(prefix + ".router", fn);
    ln_out.visit(prefix + ".ln_out", fn);
  }
};

// Post-pruning layer: the retained experts run on every example and their
// expander outputs are averaged. No router, no data-dependent control flow.
template <class S>
struct DeterministicLayer {
  std::vector<ExpertHead<S>> experts;
  std::vector<Index> source;  // original expert index of each retained head
  ExpanderFFN<S> expander;
  Norm<S> ln_out;

  Index n_experts() const { return static_cast<Index>(experts.size()); }

  void visit(const std::string& prefix, const ParamFn<S>& fn) {
    for (std::size_t i = 0; i < experts.size(); ++i)
      experts[i].visit(prefix + ".expert." + std::to_string(i), fn);
    expander.visit(prefix + ".expander", fn);
    ln_out.visit(prefix + ".ln_out", fn);
  }
};

// ---------------------------------------------------------------------------
// Routing

// Indices of the k largest entries, ties broken toward the lower index,
// returned best-first. Plain argmax for k=1.
template <class S>
std::vector<Index> select_top_k(const S* scores, Index n, Index k) {
  if (k <= 0 || k > n)
    throw UsageError("select_top_k: k=" + std::to_string(k) + " with " +
                     std::to_string(n) + " experts");
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index(0));
  std::stable_sort(order.begin(), order.end(), [scores](Index a, Index b) {
    return scores[a] > scores[b];
  });
  order.resize(static_cast<std::size_t>(k));
  return order;
}

// Per-example expert choices for a batch of gate scores (B, N).
template <class S>
std::vector<std::vector<Index>> route_batch(const Tensor<S>& gate, Index k) {
  const Index B = gate.dim(0), N = gate.dim(1);
  std::vector<std::vector<Index>> picks(static_cast<std::size_t>(B));
  for (Index b = 0; b < B; ++b)
    picks[static_cast<std::size_t>(b)] =
        select_top_k(gate.data() + b * N, N, k);
  return picks;
}

// What the MoE forward reports back to the trainer: traced gate logits for
// the balance loss, and the per-example selections for usage statistics.
template <class S>
struct RoutingRecord {
  Index layer = -1;
  Value<S> gate_logits;                // (B, n_experts), traced when training
  std::vector<std::vector<Index>> selected;  // per example, best-first
};

// ---------------------------------------------------------------------------
// Forward passes

// Single-head attention in the expert's d_head-wide subspace.
template <class S>
Value<S> expert_attention(Tape<S>* tape, ExpertHead<S>& head, const Value<S>& x,
                          const Tensor<S>& key_bias) {
  const Index dh = head.q.w.value.dim(1);
  auto q = dense(tape, head.q, x);
  auto k = dense(tape, head.k, x);
  auto v = dense(tape, head.v, x);
  auto scores = scale(bmm_nt(q, k), S(1.0 / std::sqrt(double(dh))));
  auto probs = softmax_lastdim(add_key_bias(scores, key_bias));
  return matmul(probs, v);
}

template <class S>
Value<S> expander_forward(Tape<S>* tape, ExpanderFFN<S>& exp, const Value<S>& h,
                          double ln_eps) {
  return layer_norm(gelu(dense(tape, exp.proj, h)),
                    use(tape, exp.ln.gamma), use(tape, exp.ln.beta),
                    static_cast<S>(ln_eps));
}

namespace detail {

template <class S>
Tensor<S> take_rows(const Tensor<S>& x, const std::vector<Index>& rows) {
  Shape shape(x.shape());
  shape[0] = static_cast<Index>(rows.size());
  Tensor<S> out(shape);
  const Index rest = x.numel() / x.dim(0);
  for (std::size_t i = 0; i < rows.size(); ++i)
    VecMap<S>(out.data() + static_cast<Index>(i) * rest, rest) =
        ConstVecMap<S>(x.data() + rows[i] * rest, rest);
  return out;
}

}  // namespace detail

// Routed forward: gate on [CLS], run each selected expert on its sub-batch,
// average the k expander outputs per example, then LayerNorm(E + X).
template <class S>
Value<S> moe_forward(Tape<S>* tape, MoELayer<S>& layer, const Value<S>& x,
                     const Tensor<S>& key_bias, double ln_eps,
                     RoutingRecord<S>* record = nullptr) {
  const Index B = x.t().dim(0);
  const Index N = layer.n_experts();
  const S alpha = S(1) / S(layer.top_k);

  auto gate = dense(tape, layer.router, take_token(x, 0));  // (B, N)
  auto picks = route_batch(gate.t(), layer.top_k);

  std::vector<std::vector<Index>> rows_of(static_cast<std::size_t>(N));
  for (Index b = 0; b < B; ++b)
    for (Index e : picks[static_cast<std::size_t>(b)])
      rows_of[static_cast<std::size_t>(e)].push_back(b);

  Value<S> combined = constant(Tensor<S>(x.t().shape()));
  for (Index e = 0; e < N; ++e) {
    const auto& rows = rows_of[static_cast<std::size_t>(e)];
    if (rows.empty()) continue;
    if (static_cast<Index>(rows.size()) == B) {
      // Every example picked this expert: skip the gather/scatter.
      auto h = expert_attention(tape, layer.experts[static_cast<std::size_t>(e)],
                                x, key_bias);
      auto f = expander_forward(tape, layer.expander, h, ln_eps);
      combined = add(combined, scale(f, alpha));
    } else {
      auto xe = gather_rows(x, rows);
      auto be = detail::take_rows(key_bias, rows);
      auto h = expert_attention(tape, layer.experts[static_cast<std::size_t>(e)],
                                xe, be);
      auto f = expander_forward(tape, layer.expander, h, ln_eps);
      combined = add_rows(combined, f, rows, alpha);
    }
  }

  if (record) {
    record->gate_logits = gate;
    record->selected = std::move(picks);
  }
  return layer_norm(add(combined, x), use(tape, layer.ln_out.gamma),
                    use(tape, layer.ln_out.beta), static_cast<S>(ln_eps));
}

template <class S>
Value<S> deterministic_forward(Tape<S>* tape, DeterministicLayer<S>& layer,
                               const Value<S>& x, const Tensor<S>& key_bias,
                               double ln_eps) {
  const Index m = layer.n_experts();
  if (m == 0) throw UsageError("deterministic layer has no experts");
  const S alpha = S(1) / S(m);
  Value<S> combined = constant(Tensor<S>(x.t().shape()));
  for (auto& head : layer.experts) {
    auto h = expert_attention(tape, head, x, key_bias);
    auto f = expander_forward(tape, layer.expander, h, ln_eps);
    combined = add(combined, scale(f, alpha));
  }
  return layer_norm(add(combined, x), use(tape, layer.ln_out.gamma),
                    use(tape, layer.ln_out.beta), static_cast<S>(ln_eps));
}

// ---------------------------------------------------------------------------
// Conversion from a trained standard layer

// Expert i inherits head i's slice of the attention projections: columns
// [i*dh, (i+1)*dh) of W_q/W_k/W_v and the matching bias entries. The output
// projection and the big FFN are dropped; expander, router, and the output
// LayerNorm start fresh.
template <class S>
MoELayer<S> convert_layer(const StandardLayer<S>& src, Index top_k, Rng& rng,
                          double init_std) {
  const Index d = src.q.w.value.dim(0);
  const Index h = src.n_heads;
  const Index dh = d / h;
  MoELayer<S> moe(d, dh, h, top_k);
  for (Index i = 0; i < h; ++i) {
    auto slice_into = [&](const Dense<S>& from, Dense<S>& to) {
      for (Index r = 0; r < d; ++r)
        for (Index c = 0; c < dh; ++c)
          to.w.value.at({r, c}) = from.w.value.at({r, i * dh + c});
      for (Index c = 0; c < dh; ++c)
        to.b.value[c] = from.b.value[i * dh + c];
    };
    ExpertHead<S>& ex = moe.experts[static_cast<std::size_t>(i)];
    slice_into(src.q, ex.q);
    slice_into(src.k, ex.k);
    slice_into(src.v, ex.v);
  }
  moe.expander.proj.init(rng, init_std);
  moe.router.init(rng, init_std);
  return moe;
}

// Keeps the given experts (already chosen by usage), drops the router.
template <class S>
DeterministicLayer<S> prune_layer(const MoELayer<S>& src,
                                  const std::vector<Index>& retained) {
  if (retained.empty())
    throw UsageError("prune_layer: must retain at least one expert");
  DeterministicLayer<S> out;
  for (Index e : retained) {
    if (e < 0 || e >= src.n_experts())
      throw IndexError("prune_layer: expert " + std::to_string(e) +
                       " out of range");
    out.experts.push_back(src.experts[static_cast<std::size_t>(e)]);
    out.source.push_back(e);
  }
  out.expander = src.expander;
  out.ln_out = src.ln_out;
  return out;
}

}  // namespace xattn
