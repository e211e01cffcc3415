#pragma once

// Differentiable ops over Value<S>. Each op validates shapes, computes the
// result eagerly through Eigen, and (when an input is traced) records a
// closure that scatters the output gradient back into the input nodes.
// Backward rules are checked against central finite differences in
// tests/test_autograd.cpp; treat that suite as the contract when touching
// anything here.

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "xattn/tape.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

namespace detail {

template <class S>
Tape<S>* tape_of(std::initializer_list<const Value<S>*> vs) {
  Tape<S>* t = nullptr;
  for (const Value<S>* v : vs) {
    if (!v->tape) continue;
    if (t && t != v->tape)
      throw UsageError("op inputs recorded on different tapes");
    t = v->tape;
  }
  return t;
}

template <class S>
Value<S> finish(Tape<S>* t, Tensor<S> out, typename Tape<S>::BackwardFn bw) {
  auto sp = std::make_shared<const Tensor<S>>(std::move(out));
  if (!t) return Value<S>{std::move(sp), nullptr, -1};
  return t->record(std::move(sp), std::move(bw));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// a @ b. Accepts (m,k)x(k,n), (B,L,k)x(k,n) with the leading axes kept, and
// batched (B,m,k)x(B,k,n).
template <class S>
Value<S> matmul(const Value<S>& a, const Value<S>& b) {
  const Tensor<S>& A = a.t();
  const Tensor<S>& B = b.t();
  Tape<S>* tp = detail::tape_of<S>({&a, &b});

  if (B.rank() == 2 && A.rank() >= 2) {
    const Index k = A.last_dim(), n = B.dim(1);
    if (B.dim(0) != k)
      throw ShapeError("matmul: inner dims disagree, " + shape_str(A.shape()) +
                       " @ " + shape_str(B.shape()));
    Shape out_shape(A.shape());
    out_shape.back() = n;
    Tensor<S> out(out_shape);
    out.mat().noalias() = A.mat() * B.mat();

    const Index an = a.node, bn = b.node;
    auto ad = a.data, bd = b.data;
    return detail::finish<S>(
        tp, std::move(out), [an, bn, ad, bd](Tape<S>& t, const Tensor<S>& g) {
          const Index rows = ad->lead_rows();
          ConstMatMap<S> G(g.data(), rows, bd->dim(1));
          if (an >= 0)
            t.grad_at(an).mat().noalias() += G * bd->mat().transpose();
          if (bn >= 0)
            t.grad_at(bn).mat().noalias() += ad->mat().transpose() * G;
        });
  }

  if (A.rank() == 3 && B.rank() == 3) {
    const Index nb = A.dim(0), m = A.dim(1), k = A.dim(2), n = B.dim(2);
    if (B.dim(0) != nb || B.dim(1) != k)
      throw ShapeError("matmul: batched shapes disagree, " +
                       shape_str(A.shape()) + " @ " + shape_str(B.shape()));
    Tensor<S> out({nb, m, n});
    for (Index i = 0; i < nb; ++i) {
      ConstMatMap<S> Ai(A.data() + i * m * k, m, k);
      ConstMatMap<S> Bi(B.data() + i * k * n, k, n);
      MatMap<S> Oi(out.data() + i * m * n, m, n);
      Oi.noalias() = Ai * Bi;
    }
    const Index an = a.node, bn = b.node;
    auto ad = a.data, bd = b.data;
    return detail::finish<S>(
        tp, std::move(out),
        [an, bn, ad, bd, nb, m, k, n](Tape<S>& t, const Tensor<S>& g) {
          for (Index i = 0; i < nb; ++i) {
            ConstMatMap<S> Gi(g.data() + i * m * n, m, n);
            if (an >= 0) {
              ConstMatMap<S> Bi(bd->data() + i * k * n, k, n);
              MatMap<S> dA(t.grad_at(an).data() + i * m * k, m, k);
              dA.noalias() += Gi * Bi.transpose();
            }
            if (bn >= 0) {
              ConstMatMap<S> Ai(ad->data() + i * m * k, m, k);
              MatMap<S> dB(t.grad_at(bn).data() + i * k * n, k, n);
              dB.noalias() += Ai.transpose() * Gi;
            }
          }
        });
  }

  throw ShapeError("matmul: unsupported ranks " + shape_str(A.shape()) +
                   " @ " + shape_str(B.shape()));
}

// Batched a @ b^T: (B,m,k) x (B,n,k) -> (B,m,n). Attention scores.
template <class S>
Value<S> bmm_nt(const Value<S>& a, const Value<S>& b) {
  const Tensor<S>& A = a.t();
  const Tensor<S>& B = b.t();
  if (A.rank() != 3 || B.rank() != 3 || A.dim(0) != B.dim(0) ||
      A.dim(2) != B.dim(2))
    throw ShapeError("bmm_nt: want (B,m,k)x(B,n,k), got " +
                     shape_str(A.shape()) + " and " + shape_str(B.shape()));
  const Index nb = A.dim(0), m = A.dim(1), k = A.dim(2), n = B.dim(1);
  Tape<S>* tp = detail::tape_of<S>({&a, &b});

  Tensor<S> out({nb, m, n});
  for (Index i = 0; i < nb; ++i) {
    ConstMatMap<S> Ai(A.data() + i * m * k, m, k);
    ConstMatMap<S> Bi(B.data() + i * n * k, n, k);
    MatMap<S> Oi(out.data() + i * m * n, m, n);
    Oi.noalias() = Ai * Bi.transpose();
  }
  const Index an = a.node, bn = b.node;
  auto ad = a.data, bd = b.data;
  return detail::finish<S>(
      tp, std::move(out),
      [an, bn, ad, bd, nb, m, k, n](Tape<S>& t, const Tensor<S>& g) {
        for (Index i = 0; i < nb; ++i) {
          ConstMatMap<S> Gi(g.data() + i * m * n, m, n);
          if (an >= 0) {
            ConstMatMap<S> Bi(bd->data() + i * n * k, n, k);
            MatMap<S> dA(t.grad_at(an).data() + i * m * k, m, k);
            dA.noalias() += Gi * Bi;
          }
          if (bn >= 0) {
            ConstMatMap<S> Ai(ad->data() + i * m * k, m, k);
            MatMap<S> dB(t.grad_at(bn).data() + i * n * k, n, k);
            dB.noalias() += Gi.transpose() * Ai;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pointwise and broadcast arithmetic

template <class S>
Value<S> add(const Value<S>& a, const Value<S>& b) {
  if (!a.t().same_shape(b.t()))
    throw ShapeError("add: shape mismatch " + shape_str(a.t().shape()) +
                     " vs " + shape_str(b.t().shape()));
  Tape<S>* tp = detail::tape_of<S>({&a, &b});
  Tensor<S> out(a.t().shape());
  out.flat() = a.t().flat() + b.t().flat();
  const Index an = a.node, bn = b.node;
  return detail::finish<S>(tp, std::move(out),
                           [an, bn](Tape<S>& t, const Tensor<S>& g) {
                             if (an >= 0) t.grad_at(an).flat() += g.flat();
                             if (bn >= 0) t.grad_at(bn).flat() += g.flat();
                           });
}

// x (...,d) + v (d), v broadcast across rows. Bias add.
template <class S>
Value<S> add_rowvec(const Value<S>& x, const Value<S>& v) {
  if (v.t().rank() != 1 || v.t().dim(0) != x.t().last_dim())
    throw ShapeError("add_rowvec: vector " + shape_str(v.t().shape()) +
                     " does not match rows of " + shape_str(x.t().shape()));
  Tape<S>* tp = detail::tape_of<S>({&x, &v});
  Tensor<S> out(x.t().shape());
  out.mat() = x.t().mat().rowwise() + v.t().flat().transpose();
  const Index xn = x.node, vn = v.node;
  const Index rows = x.t().lead_rows(), d = x.t().last_dim();
  return detail::finish<S>(
      tp, std::move(out), [xn, vn, rows, d](Tape<S>& t, const Tensor<S>& g) {
        ConstMatMap<S> G(g.data(), rows, d);
        if (xn >= 0) t.grad_at(xn).flat() += g.flat();
        if (vn >= 0) t.grad_at(vn).flat() += G.colwise().sum().transpose();
      });
}

// scores (G,Lq,Lk) + bias (B,Lk), where the leading axis groups G/B score
// blocks per batch element. The bias is a constant (attention mask), so no
// gradient flows into it.
template <class S>
Value<S> add_key_bias(const Value<S>& scores, const Tensor<S>& bias) {
  const Tensor<S>& X = scores.t();
  if (X.rank() != 3 || bias.rank() != 2 || bias.dim(1) != X.dim(2) ||
      bias.dim(0) == 0 || X.dim(0) % bias.dim(0) != 0)
    throw ShapeError("add_key_bias: scores " + shape_str(X.shape()) +
                     " incompatible with bias " + shape_str(bias.shape()));
  const Index G = X.dim(0), Lq = X.dim(1), Lk = X.dim(2);
  const Index group = G / bias.dim(0);
  Tensor<S> out(X.shape());
  for (Index gidx = 0; gidx < G; ++gidx) {
    const Index b = gidx / group;
    ConstMatMap<S> Xi(X.data() + gidx * Lq * Lk, Lq, Lk);
    ConstVecMap<S> Bv(bias.data() + b * Lk, Lk);
    MatMap<S> Oi(out.data() + gidx * Lq * Lk, Lq, Lk);
    Oi = Xi.rowwise() + Bv.transpose();
  }
  const Index sn = scores.node;
  return detail::finish<S>(scores.tape, std::move(out),
                           [sn](Tape<S>& t, const Tensor<S>& g) {
                             if (sn >= 0) t.grad_at(sn).flat() += g.flat();
                           });
}

template <class S>
Value<S> scale(const Value<S>& x, S c) {
  Tensor<S> out(x.t().shape());
  out.flat() = x.t().flat() * c;
  const Index xn = x.node;
  return detail::finish<S>(x.tape, std::move(out),
                           [xn, c](Tape<S>& t, const Tensor<S>& g) {
                             if (xn >= 0) t.grad_at(xn).flat() += g.flat() * c;
                           });
}

template <class S>
Value<S> add_const(const Value<S>& x, S c) {
  Tensor<S> out(x.t().shape());
  out.flat() = x.t().flat().array() + c;
  const Index xn = x.node;
  return detail::finish<S>(x.tape, std::move(out),
                           [xn](Tape<S>& t, const Tensor<S>& g) {
                             if (xn >= 0) t.grad_at(xn).flat() += g.flat();
                           });
}

template <class S>
Value<S> mul(const Value<S>& a, const Value<S>& b) {
  if (!a.t().same_shape(b.t()))
    throw ShapeError("mul: shape mismatch " + shape_str(a.t().shape()) +
                     " vs " + shape_str(b.t().shape()));
  Tape<S>* tp = detail::tape_of<S>({&a, &b});
  Tensor<S> out(a.t().shape());
  out.flat() = a.t().flat().cwiseProduct(b.t().flat());
  const Index an = a.node, bn = b.node;
  auto ad = a.data, bd = b.data;
  return detail::finish<S>(
      tp, std::move(out), [an, bn, ad, bd](Tape<S>& t, const Tensor<S>& g) {
        if (an >= 0)
          t.grad_at(an).flat() += g.flat().cwiseProduct(bd->flat());
        if (bn >= 0)
          t.grad_at(bn).flat() += g.flat().cwiseProduct(ad->flat());
      });
}

// Natural log. Inputs must be strictly positive; the call sites add an
// epsilon first, and a NaN/-inf here would poison training silently.
template <class S>
Value<S> vlog(const Value<S>& x) {
  Tensor<S> out(x.t().shape());
  for (Index i = 0; i < x.t().numel(); ++i) {
    const S v = x.t()[i];
    if (!(v > S(0)))
      throw DomainError("vlog: non-positive input " + std::to_string(v));
    out[i] = std::log(v);
  }
  const Index xn = x.node;
  auto xd = x.data;
  return detail::finish<S>(x.tape, std::move(out),
                           [xn, xd](Tape<S>& t, const Tensor<S>& g) {
                             if (xn >= 0)
                               t.grad_at(xn).flat() +=
                                   g.flat().cwiseQuotient(xd->flat());
                           });
}

template <class S>
Value<S> vtanh(const Value<S>& x) {
  Tensor<S> out(x.t().shape());
  out.flat() = x.t().flat().array().tanh();
  const Index xn = x.node;
  auto sp = std::make_shared<const Tensor<S>>(std::move(out));
  if (!x.tape) return Value<S>{sp, nullptr, -1};
  return x.tape->record(sp, [xn, sp](Tape<S>& t, const Tensor<S>& g) {
    if (xn >= 0)
      t.grad_at(xn).flat().array() +=
          g.flat().array() * (S(1) - sp->flat().array().square());
  });
}

// Exact GELU, x * Phi(x). Derivative Phi(x) + x * phi(x).
template <class S>
Value<S> gelu(const Value<S>& x) {
  Tensor<S> out(x.t().shape());
  for (Index i = 0; i < x.t().numel(); ++i) {
    const double v = static_cast<double>(x.t()[i]);
    out[i] = static_cast<S>(v * 0.5 * (1.0 + std::erf(v * M_SQRT1_2)));
  }
  const Index xn = x.node;
  auto xd = x.data;
  return detail::finish<S>(
      x.tape, std::move(out), [xn, xd](Tape<S>& t, const Tensor<S>& g) {
        if (xn < 0) return;
        Tensor<S>& dst = t.grad_at(xn);
        for (Index i = 0; i < xd->numel(); ++i) {
          const double v = static_cast<double>((*xd)[i]);
          const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
          const double pdf = std::exp(-0.5 * v * v) * 0.3989422804014327;
          dst[i] += g[i] * static_cast<S>(cdf + v * pdf);
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and attention nonlinearities

// Softmax over the trailing axis, max-subtracted.
template <class S>
Value<S> softmax_lastdim(const Value<S>& x) {
  const Index rows = x.t().lead_rows(), d = x.t().last_dim();
  Tensor<S> out(x.t().shape());
  ConstMatMap<S> X(x.t().data(), rows, d);
  MatMap<S> Y(out.data(), rows, d);
  for (Index r = 0; r < rows; ++r) {
    const S m = X.row(r).maxCoeff();
    Y.row(r) = (X.row(r).array() - m).exp();
    Y.row(r) /= Y.row(r).sum();
  }
  const Index xn = x.node;
  auto sp = std::make_shared<const Tensor<S>>(std::move(out));
  if (!x.tape) return Value<S>{sp, nullptr, -1};
  return x.tape->record(sp, [xn, sp, rows, d](Tape<S>& t, const Tensor<S>& g) {
    if (xn < 0) return;
    ConstMatMap<S> Yv(sp->data(), rows, d);
    ConstMatMap<S> G(g.data(), rows, d);
    MatMap<S> dX(t.grad_at(xn).data(), rows, d);
    for (Index r = 0; r < rows; ++r) {
      const S s = G.row(r).dot(Yv.row(r));
      dX.row(r).array() +=
          (G.row(r).array() - s) * Yv.row(r).array();
    }
  });
}

// LayerNorm over the trailing axis with learned gain/shift. Population
// variance, epsilon inside the square root.
template <class S>
Value<S> layer_norm(const Value<S>& x, const Value<S>& gamma,
                    const Value<S>& beta, S eps) {
  const Index d = x.t().last_dim(), rows = x.t().lead_rows();
  if (gamma.t().shape() != Shape{d} || beta.t().shape() != Shape{d})
    throw ShapeError("layer_norm: gain/shift must be (" + std::to_string(d) +
                     "), got " + shape_str(gamma.t().shape()) + " and " +
                     shape_str(beta.t().shape()));
  Tape<S>* tp = detail::tape_of<S>({&x, &gamma, &beta});

  Tensor<S> out(x.t().shape());
  auto xhat = std::make_shared<Tensor<S>>(x.t().shape());
  auto inv_std = std::make_shared<Tensor<S>>(Shape{rows});
  ConstMatMap<S> X(x.t().data(), rows, d);
  MatMap<S> Y(out.data(), rows, d);
  MatMap<S> H(xhat->data(), rows, d);
  for (Index r = 0; r < rows; ++r) {
    const S mean = X.row(r).mean();
    const S var = (X.row(r).array() - mean).square().sum() / S(d);
    const S is = S(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    H.row(r) = (X.row(r).array() - mean) * is;
    Y.row(r) = H.row(r).cwiseProduct(gamma.t().flat().transpose()) +
               beta.t().flat().transpose();
  }
  const Index xn = x.node, gn = gamma.node, bn = beta.node;
  auto gd = gamma.data;
  return detail::finish<S>(
      tp, std::move(out),
      [xn, gn, bn, gd, xhat, inv_std, rows, d](Tape<S>& t, const Tensor<S>& g) {
        ConstMatMap<S> G(g.data(), rows, d);
        ConstMatMap<S> H(xhat->data(), rows, d);
        if (gn >= 0)
          t.grad_at(gn).flat() +=
              G.cwiseProduct(H).colwise().sum().transpose();
        if (bn >= 0) t.grad_at(bn).flat() += G.colwise().sum().transpose();
        if (xn >= 0) {
          MatMap<S> dX(t.grad_at(xn).data(), rows, d);
          for (Index r = 0; r < rows; ++r) {
            Eigen::Array<S, 1, Eigen::Dynamic> dyg =
                G.row(r).array() * gd->flat().transpose().array();
            const S m1 = dyg.mean();
            const S m2 = (dyg * H.row(r).array()).mean();
            dX.row(r).array() +=
                (dyg - m1 - H.row(r).array() * m2) * (*inv_std)[r];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Losses and reductions

// Mean cross entropy of logits (B,C) against integer labels, computed via
// log-sum-exp. Gradient is (softmax - onehot)/B.
template <class S>
Value<S> cross_entropy_mean(const Value<S>& logits,
                            const std::vector<int>& labels) {
  const Tensor<S>& L = logits.t();
  if (L.rank() != 2)
    throw ShapeError("cross_entropy_mean: want (B,C) logits, got " +
                     shape_str(L.shape()));
  const Index B = L.dim(0), C = L.dim(1);
  if (static_cast<Index>(labels.size()) != B)
    throw ShapeError("cross_entropy_mean: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(B));
  for (int y : labels)
    if (y < 0 || y >= C)
      throw IndexError("cross_entropy_mean: label " + std::to_string(y) +
                       " out of range [0," + std::to_string(C) + ")");

  ConstMatMap<S> X(L.data(), B, C);
  double total = 0.0;
  for (Index b = 0; b < B; ++b) {
    const S m = X.row(b).maxCoeff();
    const double lse =
        std::log((X.row(b).array() - m).exp().sum()) + static_cast<double>(m);
    total += lse - static_cast<double>(X(b, labels[static_cast<std::size_t>(b)]));
  }
  Tensor<S> out = Tensor<S>::scalar(static_cast<S>(total / double(B)));

  const Index ln = logits.node;
  auto ld = logits.data;
  return detail::finish<S>(
      logits.tape, std::move(out),
      [ln, ld, labels, B, C](Tape<S>& t, const Tensor<S>& g) {
        if (ln < 0) return;
        const S go = g[0] / S(B);
        ConstMatMap<S> X(ld->data(), B, C);
        MatMap<S> dX(t.grad_at(ln).data(), B, C);
        for (Index b = 0; b < B; ++b) {
          const S m = X.row(b).maxCoeff();
          Eigen::Array<S, 1, Eigen::Dynamic> p = (X.row(b).array() - m).exp();
          p /= p.sum();
          dX.row(b).array() += p * go;
          dX(b, labels[static_cast<std::size_t>(b)]) -= go;
        }
      });
}

// Mean over the leading axis: (B,N) -> (N).
template <class S>
Value<S> mean_rows(const Value<S>& x) {
  if (x.t().rank() != 2)
    throw ShapeError("mean_rows: want rank-2, got " + shape_str(x.t().shape()));
  const Index B = x.t().dim(0), N = x.t().dim(1);
  Tensor<S> out({N});
  out.flat() = x.t().mat().colwise().mean().transpose();
  const Index xn = x.node;
  return detail::finish<S>(x.tape, std::move(out),
                           [xn, B, N](Tape<S>& t, const Tensor<S>& g) {
                             if (xn < 0) return;
                             MatMap<S> dX(t.grad_at(xn).data(), B, N);
                             dX.rowwise() += g.flat().transpose() / S(B);
                           });
}

template <class S>
Value<S> sum_all(const Value<S>& x) {
  Tensor<S> out = Tensor<S>::scalar(x.t().flat().sum());
  const Index xn = x.node;
  return detail::finish<S>(x.tape, std::move(out),
                           [xn](Tape<S>& t, const Tensor<S>& g) {
                             if (xn >= 0)
                               t.grad_at(xn).flat().array() += g[0];
                           });
}

template <class S>
Value<S> dot(const Value<S>& a, const Value<S>& b) {
  if (!a.t().same_shape(b.t()) || a.t().rank() != 1)
    throw ShapeError("dot: want equal rank-1 shapes, got " +
                     shape_str(a.t().shape()) + " and " +
                     shape_str(b.t().shape()));
  Tensor<S> out = Tensor<S>::scalar(a.t().flat().dot(b.t().flat()));
  Tape<S>* tp = detail::tape_of<S>({&a, &b});
  const Index an = a.node, bn = b.node;
  auto ad = a.data, bd = b.data;
  return detail::finish<S>(tp, std::move(out),
                           [an, bn, ad, bd](Tape<S>& t, const Tensor<S>& g) {
                             if (an >= 0)
                               t.grad_at(an).flat() += g[0] * bd->flat();
                             if (bn >= 0)
                               t.grad_at(bn).flat() += g[0] * ad->flat();
                           });
}

// ---------------------------------------------------------------------------
// Embedding and structural ops

// Row lookup: table (V,d), ids (B,L) -> (B,L,d). Backward scatter-adds.
template <class S>
Value<S> embedding_rows(const Value<S>& table, const Tensor<std::int32_t>& ids) {
  const Tensor<S>& T = table.t();
  if (T.rank() != 2 || ids.rank() != 2)
    throw ShapeError("embedding_rows: want table (V,d) and ids (B,L)");
  const Index V = T.dim(0), d = T.dim(1);
  const Index B = ids.dim(0), L = ids.dim(1);
  for (Index i = 0; i < ids.numel(); ++i)
    if (ids[i] < 0 || ids[i] >= V)
      throw IndexError("embedding_rows: id " + std::to_string(ids[i]) +
                       " outside vocabulary of " + std::to_string(V));
  Tensor<S> out({B, L, d});
  ConstMatMap<S> Tm(T.data(), V, d);
  MatMap<S> O(out.data(), B * L, d);
  for (Index i = 0; i < B * L; ++i) O.row(i) = Tm.row(ids[i]);

  const Index tn = table.node;
  auto idc = std::make_shared<Tensor<std::int32_t>>(ids);
  return detail::finish<S>(
      table.tape, std::move(out),
      [tn, idc, V, d, B, L](Tape<S>& t, const Tensor<S>& g) {
        if (tn < 0) return;
        MatMap<S> dT(t.grad_at(tn).data(), V, d);
        ConstMatMap<S> G(g.data(), B * L, d);
        for (Index i = 0; i < B * L; ++i) dT.row((*idc)[i]) += G.row(i);
      });
}

// x (B,L,d) + table rows [0,L): learned position embeddings.
template <class S>
Value<S> add_position(const Value<S>& x, const Value<S>& table) {
  const Tensor<S>& X = x.t();
  const Tensor<S>& T = table.t();
  if (X.rank() != 3 || T.rank() != 2 || T.dim(1) != X.dim(2) ||
      T.dim(0) < X.dim(1))
    throw ShapeError("add_position: x " + shape_str(X.shape()) +
                     " incompatible with table " + shape_str(T.shape()));
  const Index B = X.dim(0), L = X.dim(1), d = X.dim(2);
  Tensor<S> out(X.shape());
  ConstMatMap<S> Tm(T.data(), T.dim(0), d);
  for (Index b = 0; b < B; ++b) {
    MatMap<S> Ob(out.data() + b * L * d, L, d);
    ConstMatMap<S> Xb(X.data() + b * L * d, L, d);
    Ob = Xb + Tm.topRows(L);
  }
  Tape<S>* tp = detail::tape_of<S>({&x, &table});
  const Index xn = x.node, tn = table.node;
  return detail::finish<S>(
      tp, std::move(out), [xn, tn, B, L, d](Tape<S>& t, const Tensor<S>& g) {
        if (xn >= 0) t.grad_at(xn).flat() += g.flat();
        if (tn >= 0) {
          MatMap<S> dT(t.grad_at(tn).data(), t.grad_at(tn).dim(0), d);
          for (Index b = 0; b < B; ++b) {
            ConstMatMap<S> Gb(g.data() + b * L * d, L, d);
            dT.topRows(L) += Gb;
          }
        }
      });
}

// Picks one sequence position: x (B,L,d) -> (B,d).
template <class S>
Value<S> take_token(const Value<S>& x, Index pos) {
  const Tensor<S>& X = x.t();
  if (X.rank() != 3)
    throw ShapeError("take_token: want (B,L,d), got " + shape_str(X.shape()));
  const Index B = X.dim(0), L = X.dim(1), d = X.dim(2);
  if (pos < 0 || pos >= L)
    throw IndexError("take_token: position " + std::to_string(pos) +
                     " outside sequence of " + std::to_string(L));
  Tensor<S> out({B, d});
  for (Index b = 0; b < B; ++b)
    VecMap<S>(out.data() + b * d, d) =
        ConstVecMap<S>(X.data() + (b * L + pos) * d, d);
  const Index xn = x.node;
  return detail::finish<S>(
      x.tape, std::move(out), [xn, B, L, d, pos](Tape<S>& t, const Tensor<S>& g) {
        if (xn < 0) return;
        Tensor<S>& dX = t.grad_at(xn);
        for (Index b = 0; b < B; ++b)
          VecMap<S>(dX.data() + (b * L + pos) * d, d) +=
              ConstVecMap<S>(g.data() + b * d, d);
      });
}

// (B,L,h*dh) -> (B*h,L,dh): prepares per-head batched attention.
template <class S>
Value<S> split_heads(const Value<S>& x, Index h) {
  const Tensor<S>& X = x.t();
  if (X.rank() != 3 || h <= 0 || X.dim(2) % h != 0)
    throw ShapeError("split_heads: cannot split " + shape_str(X.shape()) +
                     " into " + std::to_string(h) + " heads");
  const Index B = X.dim(0), L = X.dim(1), dh = X.dim(2) / h;
  Tensor<S> out({B * h, L, dh});
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < h; ++i)
      for (Index l = 0; l < L; ++l)
        VecMap<S>(out.data() + (((b * h + i) * L) + l) * dh, dh) =
            ConstVecMap<S>(X.data() + ((b * L + l) * h + i) * dh, dh);
  const Index xn = x.node;
  return detail::finish<S>(
      x.tape, std::move(out), [xn, B, L, h, dh](Tape<S>& t, const Tensor<S>& g) {
        if (xn < 0) return;
        Tensor<S>& dX = t.grad_at(xn);
        for (Index b = 0; b < B; ++b)
          for (Index i = 0; i < h; ++i)
            for (Index l = 0; l < L; ++l)
              VecMap<S>(dX.data() + ((b * L + l) * h + i) * dh, dh) +=
                  ConstVecMap<S>(g.data() + (((b * h + i) * L) + l) * dh, dh);
      });
}

// Inverse of split_heads: (B*h,L,dh) -> (B,L,h*dh).
template <class S>
Value<S> merge_heads(const Value<S>& x, Index h) {
  const Tensor<S>& X = x.t();
  if (X.rank() != 3 || h <= 0 || X.dim(0) % h != 0)
    throw ShapeError("merge_heads: cannot merge " + shape_str(X.shape()) +
                     " from " + std::to_string(h) + " heads");
  const Index B = X.dim(0) / h, L = X.dim(1), dh = X.dim(2);
  Tensor<S> out({B, L, h * dh});
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < h; ++i)
      for (Index l = 0; l < L; ++l)
        VecMap<S>(out.data() + ((b * L + l) * h + i) * dh, dh) =
            ConstVecMap<S>(X.data() + (((b * h + i) * L) + l) * dh, dh);
  const Index xn = x.node;
  return detail::finish<S>(
      x.tape, std::move(out), [xn, B, L, h, dh](Tape<S>& t, const Tensor<S>& g) {
        if (xn < 0) return;
        Tensor<S>& dX = t.grad_at(xn);
        for (Index b = 0; b < B; ++b)
          for (Index i = 0; i < h; ++i)
            for (Index l = 0; l < L; ++l)
              VecMap<S>(dX.data() + (((b * h + i) * L) + l) * dh, dh) +=
                  ConstVecMap<S>(g.data() + ((b * L + l) * h + i) * dh, dh);
      });
}

// Sub-batch selection along the leading axis: x (B,rest) -> (R,rest).
// Routing uses this to hand each expert only its assigned examples.
template <class S>
Value<S> gather_rows(const Value<S>& x, const std::vector<Index>& rows) {
  const Tensor<S>& X = x.t();
  if (X.rank() < 2)
    throw ShapeError("gather_rows: want rank>=2, got " + shape_str(X.shape()));
  const Index B = X.dim(0);
  const Index rest = X.numel() / std::max<Index>(B, 1);
  for (Index r : rows)
    if (r < 0 || r >= B)
      throw IndexError("gather_rows: row " + std::to_string(r) +
                       " outside batch of " + std::to_string(B));
  Shape out_shape(X.shape());
  out_shape[0] = static_cast<Index>(rows.size());
  Tensor<S> out(out_shape);
  for (std::size_t i = 0; i < rows.size(); ++i)
    VecMap<S>(out.data() + static_cast<Index>(i) * rest, rest) =
        ConstVecMap<S>(X.data() + rows[i] * rest, rest);
  const Index xn = x.node;
  return detail::finish<S>(
      x.tape, std::move(out), [xn, rows, rest](Tape<S>& t, const Tensor<S>& g) {
        if (xn < 0) return;
        Tensor<S>& dX = t.grad_at(xn);
        for (std::size_t i = 0; i < rows.size(); ++i)
          VecMap<S>(dX.data() + rows[i] * rest, rest) +=
              ConstVecMap<S>(g.data() + static_cast<Index>(i) * rest, rest);
      });
}

// out = base; out[rows[i]] += alpha * piece[i]. Scatters expert outputs
// back into the full batch; alpha carries the 1/k combination weight.
template <class S>
Value<S> add_rows(const Value<S>& base, const Value<S>& piece,
                  const std::vector<Index>& rows, S alpha) {
  const Tensor<S>& X = base.t();
  const Tensor<S>& P = piece.t();
  if (X.rank() < 2 || P.rank() != X.rank() ||
      !std::equal(X.shape().begin() + 1, X.shape().end(),
                  P.shape().begin() + 1) ||
      P.dim(0) != static_cast<Index>(rows.size()))
    throw ShapeError("add_rows: base " + shape_str(X.shape()) +
                     ", piece " + shape_str(P.shape()) + ", " +
                     std::to_string(rows.size()) + " rows");
  const Index B = X.dim(0);
  const Index rest = X.numel() / std::max<Index>(B, 1);
  for (Index r : rows)
    if (r < 0 || r >= B)
      throw IndexError("add_rows: row " + std::to_string(r) +
                       " outside batch of " + std::to_string(B));
  Tensor<S> out(X.shape(), X.vec());
  for (std::size_t i = 0; i < rows.size(); ++i)
    VecMap<S>(out.data() + rows[i] * rest, rest) +=
        alpha * ConstVecMap<S>(P.data() + static_cast<Index>(i) * rest, rest);
  Tape<S>* tp = detail::tape_of<S>({&base, &piece});
  const Index bn = base.node, pn = piece.node;
  return detail::finish<S>(
      tp, std::move(out),
      [bn, pn, rows, rest, alpha](Tape<S>& t, const Tensor<S>& g) {
        if (bn >= 0) t.grad_at(bn).flat() += g.flat();
        if (pn >= 0) {
          Tensor<S>& dP = t.grad_at(pn);
          for (std::size_t i = 0; i < rows.size(); ++i)
            VecMap<S>(dP.data() + static_cast<Index>(i) * rest, rest) +=
                alpha * ConstVecMap<S>(g.data() + rows[i] * rest, rest);
        }
      });
}

}  // namespace xattn
