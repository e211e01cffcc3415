#pragma once

// Transformer encoder for sequence classification: learned token+position
// embeddings with LayerNorm, post-LN encoder layers (multi-head attention,
// GELU feed-forward), a [CLS] readout with an optional tanh pooler, and a
// linear classifier head. Single segment, so no token-type embeddings.

#include <cmath>
#include <functional>
#include <string>

#include "xattn/ops.hpp"
#include "xattn/random.hpp"
#include "xattn/tape.hpp"

namespace xattn {

struct EncoderConfig {
  Index vocab_size = 0;
  Index max_len = 0;
  Index d_model = 0;
  Index n_heads = 0;
  Index n_layers = 0;
  Index d_ff = 0;
  Index n_classes = 0;
  bool use_pooler = false;
  double ln_eps = 1e-5;
  double init_std = 0.02;

  Index d_head() const { return n_heads > 0 ? d_model / n_heads : 0; }

  void validate() const {
    if (vocab_size < 4) throw ConfigError("vocab_size must be at least 4");
    if (max_len < 2) throw ConfigError("max_len must be at least 2");
    if (d_model <= 0 || n_heads <= 0 || n_layers <= 0 || d_ff <= 0)
      throw ConfigError("d_model, n_heads, n_layers, d_ff must be positive");
    if (d_model % n_heads != 0)
      throw ConfigError("d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    if (n_classes < 2) throw ConfigError("n_classes must be at least 2");
    if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
    if (!(init_std > 0.0)) throw ConfigError("init_std must be positive");
  }
};

// ---------------------------------------------------------------------------
// Weight containers. Parameters are visited in a fixed order; checkpoint
// layout and optimizer state both key off the visited names.

template <class S>
using ParamFn = std::function<void(const std::string&, Parameter<S>&)>;

template <class S>
struct Dense {
  Parameter<S> w;  // (in, out)
  Parameter<S> b;  // (out)

  Dense() = default;
  Dense(Index in, Index out)
      : w(Tensor<S>({in, out})), b(Tensor<S>({out})) {}

  void init(Rng& rng, double std) { fill_truncated_normal(w.value, rng, std); }

  void visit(const std::string& prefix, const ParamFn<S>& fn) {
    fn(prefix + ".w", w);
    fn(prefix + ".b", b);
  }
};

template <class S>
struct Norm {
  Parameter<S> gamma;
  Parameter<S> beta;

  Norm() = default;
  explicit Norm(Index d)
      : gamma(Tensor<S>::full({d}, S(1))), beta(Tensor<S>({d})) {}

  void visit(const std::string& prefix, const ParamFn<S>& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

template <class S>
struct Embedding {
  Parameter<S> token;     // (vocab, d)
  Parameter<S> position;  // (max_len, d)
  Norm<S> ln;

  Embedding() = default;
  Embedding(Index vocab, Index max_len, Index d)
      : token(Tensor<S>({vocab, d})),
        position(Tensor<S>({max_len, d})),
        ln(d) {}

  void init(Rng& rng, double std) {
    fill_truncated_normal(token.value, rng, std);
    fill_truncated_normal(position.value, rng, std);
  }

  void visit(const std::string& prefix, const ParamFn<S>& fn) {
    fn(prefix + ".token", token);
    fn(prefix + ".position", position);
    ln.visit(prefix + ".ln", fn);
  }
};

template <class S>
struct StandardLayer {
  Dense<S> q, k, v, out;  // each (d, d)
  Dense<S> ff_in;         // (d, d_ff)
  Dense<S> ff_out;        // (d_ff, d)
  Norm<S> ln_attn, ln_ffn;
  Index n_heads = 0;

  StandardLayer() = default;
  StandardLayer(Index d, Index heads, Index d_ff)
      : q(d, d), k(d, d), v(d, d), out(d, d), ff_in(d, d_ff), ff_out(d_ff, d),
        ln_attn(d), ln_ffn(d), n_heads(heads) {}

  void init(Rng& rng, double std) {
    q.init(rng, std);
    k.init(rng, std);
    v.init(rng, std);
    out.init(rng, std);
    ff_in.init(rng, std);
    ff_out.init(rng, std);
  }

  void visit(const std::string& prefix, const ParamFn<S>& fn) {
    q.visit(prefix + ".attn.q", fn);
    k.visit(prefix + ".attn.k", fn);
    v.visit(prefix + ".attn.v", fn);
    out.visit(prefix + ".attn.out", fn);
    ff_in.visit(prefix + ".ffn.in", fn);
    ff_out.visit(prefix + ".ffn.out", fn);
    ln_attn.visit(prefix + ".ln_attn", fn);
    ln_ffn.visit(prefix + ".ln_ffn", fn);
  }
};

// ---------------------------------------------------------------------------
// Forward pieces

template <class S>
Value<S> use(Tape<S>* tape, Parameter<S>& p) {
  return tape ? tape->use(p) : borrow(p.value);
}

template <class S>
Value<S> dense(Tape<S>* tape, Dense<S>& layer, const Value<S>& x) {
  return add_rowvec(matmul(x, use(tape, layer.w)), use(tape, layer.b));
}

// Attention-mask bias: 0 where the key is real, -1e9 where padded. Added to
// scores before the softmax so padded keys get ~zero probability.
template <class S>
Tensor<S> make_key_bias(const Tensor<std::int32_t>& mask) {
  Tensor<S> bias(mask.shape());
  for (Index i = 0; i < mask.numel(); ++i)
    bias[i] = mask[i] != 0 ? S(0) : S(-1e9);
  return bias;
}

template <class S>
Value<S> embed_forward(Tape<S>* tape, Embedding<S>& emb,
                       const Tensor<std::int32_t>& ids, double ln_eps) {
  auto x = embedding_rows(use(tape, emb.token), ids);
  x = add_position(x, use(tape, emb.position));
  return layer_norm(x, use(tape, emb.ln.gamma), use(tape, emb.ln.beta),
                    static_cast<S>(ln_eps));
}

template <class S>
Value<S> mha_forward(Tape<S>* tape, StandardLayer<S>& layer, const Value<S>& x,
                     const Tensor<S>& key_bias) {
  const Index h = layer.n_heads;
  const Index dh = x.t().last_dim() / h;
  auto qh = split_heads(dense(tape, layer.q, x), h);
  auto kh = split_heads(dense(tape, layer.k, x), h);
  auto vh = split_heads(dense(tape, layer.v, x), h);
  auto scores = scale(bmm_nt(qh, kh), S(1.0 / std::sqrt(double(dh))));
  auto probs = softmax_lastdim(add_key_bias(scores, key_bias));
  auto ctx = merge_heads(matmul(probs, vh), h);
  return dense(tape, layer.out, ctx);
}

// Post-LN residual block: LN(x + MHA(x)), then LN(x + FFN(x)).
template <class S>
Value<S> standard_layer_forward(Tape<S>* tape, StandardLayer<S>& layer,
                                const Value<S>& x, const Tensor<S>& key_bias,
                                double ln_eps) {
  const S eps = static_cast<S>(ln_eps);
  auto a = mha_forward(tape, layer, x, key_bias);
  auto x1 = layer_norm(add(a, x), use(tape, layer.ln_attn.gamma),
                       use(tape, layer.ln_attn.beta), eps);
  auto f = dense(tape, layer.ff_out, gelu(dense(tape, layer.ff_in, x1)));
  return layer_norm(add(f, x1), use(tape, layer.ln_ffn.gamma),
                    use(tape, layer.ln_ffn.beta), eps);
}

}  // namespace xattn
