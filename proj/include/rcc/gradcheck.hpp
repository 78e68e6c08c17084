#pragma once

#include <functional>
#include <vector>

#include "rcc/tensor.hpp"

namespace rcc {

struct GradCheckReport {
  bool ok = false;
  double max_rel_err = 0.0;
  size_t worst_param = 0;
  int64_t worst_elem = -1;
  double analytic = 0.0;   // at the worst element
  double numeric = 0.0;
  int64_t checked = 0;
};

struct GradCheckOpts {
  double step = 1e-5;
  double tol = 1e-6;
  // When >= 0, only this many randomly chosen elements (across all params)
  // are compared against finite differences; analytic grads are still full.
  int64_t max_samples = -1;
  uint64_t sample_seed = 0;
  // Relative-error denominator floor. Raise it when the objective is large
  // and some directions have exactly-zero true gradient (a batch norm right
  // after a bias, say): there the finite difference is pure cancellation
  // noise scaled by |f|, and a floor sized for O(1) gradients misreads that
  // noise as error.
  double denom_floor = 1e-8;
};

// Compares reverse-mode gradients of the scalar f(params) against central
// finite differences. Relative error per element is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
// Non-finite values of f or of either gradient throw, naming the element.
GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> params, const GradCheckOpts& opts);

GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> params, double step, double tol);

}  // namespace rcc
