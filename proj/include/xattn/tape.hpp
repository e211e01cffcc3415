#pragma once

// Reverse-mode autodiff on an explicit tape.
//
// A Value is a handle to an immutable tensor plus, when it was produced
// under a Tape, the index of its node on that tape. Ops (see ops.hpp)
// compute the forward result eagerly and record a closure that later pulls
// the node's output gradient back into its inputs' gradient buffers.
// Values with a null tape are constants: the same layer code runs traced
// for training and untraced for inference, where recording is skipped and
// no gradient buffers are allocated.
//
// Parameters are the trainable leaves. Tape::use() hands out one node per
// parameter per tape (memoized), so gradients from every use site
// accumulate in one buffer; backward() then flushes node gradients into
// Parameter::grad, which the optimizer consumes.

#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "xattn/errors.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

template <class S>
struct Parameter {
  Tensor<S> value;
  Tensor<S> grad;

  Parameter() = default;
  explicit Parameter(Tensor<S> v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { std::fill(grad.vec().begin(), grad.vec().end(), S(0)); }
  Index numel() const { return value.numel(); }
};

template <class S>
class Tape;

template <class S>
struct Value {
  std::shared_ptr<const Tensor<S>> data;
  Tape<S>* tape = nullptr;
  Index node = -1;

  const Tensor<S>& t() const { return *data; }
  bool traced() const { return tape != nullptr; }
};

// Wraps a tensor the caller keeps alive for the duration of the forward
// pass. No copy, no ownership (aliasing shared_ptr with empty control
// block). This is how untraced code borrows parameter values.
template <class S>
Value<S> borrow(const Tensor<S>& t) {
  return Value<S>{std::shared_ptr<const Tensor<S>>(std::shared_ptr<void>(), &t),
                  nullptr, -1};
}

template <class S>
Value<S> constant(Tensor<S> t) {
  return Value<S>{std::make_shared<const Tensor<S>>(std::move(t)), nullptr, -1};
}

template <class S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<S>&)>;

  struct Node {
    std::shared_ptr<const Tensor<S>> value;
    Tensor<S> grad;
    BackwardFn backward;       // empty for leaves
    Parameter<S>* param = nullptr;  // set for parameter leaves
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf node for a trainable parameter; one node per parameter per tape.
  Value<S> use(Parameter<S>& p) {
    check_open();
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end())
      return Value<S>{borrow(p.value).data, this, it->second};
    const Index id = static_cast<Index>(nodes_.size());
    nodes_.push_back(Node{borrow(p.value).data, Tensor<S>(p.value.shape()),
                          BackwardFn{}, &p});
    param_nodes_.emplace(&p, id);
    return Value<S>{nodes_.back().value, this, id};
  }

  // Interior node produced by an op.
  Value<S> record(std::shared_ptr<const Tensor<S>> out, BackwardFn bw) {
    check_open();
    const Index id = static_cast<Index>(nodes_.size());
    Tensor<S> g(out->shape());
    nodes_.push_back(Node{std::move(out), std::move(g), std::move(bw), nullptr});
    return Value<S>{nodes_.back().value, this, id};
  }

  Tensor<S>& grad_at(Index i) { return nodes_[static_cast<std::size_t>(i)].grad; }
  const Tensor<S>& value_at(Index i) const {
    return *nodes_[static_cast<std::size_t>(i)].value;
  }
  Index size() const { return static_cast<Index>(nodes_.size()); }

  // Reverse sweep from `loss` (a traced scalar) back to the leaves, then
  // flushes accumulated leaf gradients into Parameter::grad. Single-shot:
  // a tape is consumed by its backward pass.
  void backward(const Value<S>& loss) {
    check_open();
    if (loss.tape != this)
      throw UsageError("backward: loss was not recorded on this tape");
    if (loss.t().numel() != 1)
      throw UsageError("backward: loss must be scalar, got shape " +
                       shape_str(loss.t().shape()));
    consumed_ = true;
    grad_at(loss.node)[0] = S(1);
    for (Index i = loss.node; i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (n.backward) n.backward(*this, n.grad);
    }
    for (auto& [param, id] : param_nodes_) {
      const Tensor<S>& g = grad_at(id);
      param->grad.flat() += g.flat();
    }
  }

 private:
  void check_open() const {
    if (consumed_) throw UsageError("tape already consumed by backward()");
  }

  std::vector<Node> nodes_;
  std::unordered_map<Parameter<S>*, Index> param_nodes_;
  bool consumed_ = false;
};

}  // namespace xattn
