#pragma once

#include "rcc/data.hpp"
#include "rcc/ops.hpp"

namespace rcc {

// Training objective: L = L_C + lambda1 * L_OT + lambda2 * L_TV.
struct LossConfig {
  double lambda1 = 0.1;
  double lambda2 = 0.01;
  double sinkhorn_reg = 10.0;
  int sinkhorn_iters = 100;
};

// Bins dot annotations into stride-8 cells: grid[y/8][x/8] += 1 per dot.
// Returns [H/8, W/8]; the grid sums to the dot count exactly.
Tensor bin_dots(const DotAnnotation& ann, int64_t height, int64_t width);

// |sum(pred) - sum(gt)|.
Tensor counting_loss(const Tensor& pred, const Tensor& gt);

// 0.5 * || pred/sum(pred) - gt/sum(gt) ||_1 * sum(gt).
Tensor tv_loss(const Tensor& pred, const Tensor& gt);

// Entropic-OT value <f, a> + <g, b> after `iters` alternating log-domain
// scaling updates on the squared cell-center-distance cost (cell units).
// a and b must be probability measures on the same 2-D grid. Gradients for
// both marginals are computed by unrolling every iteration; entries with
// zero mass receive zero gradient (they are outside the support).
Tensor sinkhorn_value(const Tensor& a, const Tensor& b, double reg,
                      int iters);

// The transport plan implied by the final potentials, scattered to the full
// [N, N] cell-pair matrix (N = grid cells). Diagnostic; not differentiable.
Tensor sinkhorn_plan(const Tensor& a, const Tensor& b, double reg, int iters);

// Debiased transport cost between the normalized grids:
//   max(0, V(a,b) - V(a,a)/2 - V(b,b)/2)
// so identical grids score exactly zero despite the entropic smoothing.
Tensor sinkhorn_ot_loss(const Tensor& pred, const Tensor& gt,
                        const LossConfig& cfg = {});

// L_C always; the OT and TV terms only when the ground truth has mass
// (negative samples train on the count alone).
Tensor composite_loss(const Tensor& pred, const Tensor& gt,
                      const LossConfig& cfg = {});

}  // namespace rcc
