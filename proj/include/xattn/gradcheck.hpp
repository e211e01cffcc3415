#pragma once

// Finite-difference verification of the tape's analytic gradients.
//
// Run in double precision: central differences with h around 1e-5 leave
// ~1e-10 truncation error, so a comfortable margin remains under the
// default tolerances. Each coordinate passes if
//   |analytic - numeric| <= atol + rtol * max(|analytic|, |numeric|)
// which keeps near-zero gradients (where relative error is meaningless
// finite-difference noise) from masking real defects in the large ones.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "xattn/tape.hpp"
#include "xattn/tensor.hpp"

namespace xattn {

struct GradCheckReport {
  // Worst |a-n| / (atol + rtol*max(|a|,|n|)); at most 1 means all pass.
  double max_violation = 0.0;
  double max_abs_err = 0.0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::string worst;  // "param_idx[flat_idx]" of the worst coordinate

  bool ok() const { return max_violation <= 1.0; }
};

// `build` runs the forward pass under the given tape using the current
// parameter values and returns the scalar objective. It is called once
// traced (for analytic gradients) and 2*numel times untraced per checked
// parameter (for central differences).
template <class S>
GradCheckReport grad_check(const std::function<Value<S>(Tape<S>*)>& build,
                           const std::vector<Parameter<S>*>& params,
                           double h = 1e-5, double rtol = 1e-5,
                           double atol = 1e-7) {
  for (Parameter<S>* p : params) p->zero_grad();
  {
    Tape<S> tape;
    Value<S> loss = build(&tape);
    tape.backward(loss);
  }

  auto eval = [&build]() -> double {
    return static_cast<double>(build(nullptr).t()[0]);
  };

  GradCheckReport rep;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Parameter<S>& p = *params[pi];
    for (Index i = 0; i < p.numel(); ++i) {
      const S keep = p.value[i];
      p.value[i] = keep + static_cast<S>(h);
      const double up = eval();
      p.value[i] = keep - static_cast<S>(h);
      const double down = eval();
      p.value[i] = keep;

      const double numeric = (up - down) / (2.0 * h);
      const double analytic = static_cast<double>(p.grad[i]);
      const double abs_err = std::abs(analytic - numeric);
      const double allowed =
          atol + rtol * std::max(std::abs(analytic), std::abs(numeric));
      const double violation = abs_err / allowed;
      rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
      if (violation > rep.max_violation) {
        rep.max_violation = violation;
        rep.analytic_at_worst = analytic;
        rep.numeric_at_worst = numeric;
        rep.worst = std::to_string(pi) + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

}  // namespace xattn
