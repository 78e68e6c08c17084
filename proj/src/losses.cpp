#include <cmath>
#include <string>

#include "rcc/losses.hpp"
#include "rcc/ops.hpp"

namespace rcc {

namespace {

double plain_sum(const Tensor& t) {
  double total = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) total += t.data()[i];
  return total;
}

void check_grid_pair(const Tensor& pred, const Tensor& gt, const char* who) {
  check(pred.ndim() == 2 && pred.shape() == gt.shape(),
        std::string(who) + ": want two density grids of one 2-D shape, got " +
            shape_str(pred.shape()) + " and " + shape_str(gt.shape()));
}

}  // namespace

Tensor bin_dots(const DotAnnotation& ann, int64_t height, int64_t width) {
  check(height >= 8 && width >= 8 && height % 8 == 0 && width % 8 == 0,
        "bin_dots: image size " + std::to_string(height) + "x" +
            std::to_string(width) + " must be a positive multiple of 8");
  Tensor grid = Tensor::zeros({height / 8, width / 8});
  const int64_t cols = width / 8;
  for (size_t n = 0; n < ann.dots.size(); ++n) {
    const Dot& d = ann.dots[n];
    check(std::isfinite(d.x) && std::isfinite(d.y) && d.x >= 0.0 &&
              d.x < static_cast<double>(width) && d.y >= 0.0 &&
              d.y < static_cast<double>(height),
          "bin_dots: dot " + std::to_string(n) + " at (" + std::to_string(d.x) +
              ", " + std::to_string(d.y) + ") falls outside the " +
              std::to_string(height) + "x" + std::to_string(width) + " image");
    const auto r = static_cast<int64_t>(std::floor(d.y / 8.0));
    const auto c = static_cast<int64_t>(std::floor(d.x / 8.0));
    grid.data()[r * cols + c] += 1.0;
  }
  return grid;
}

Tensor counting_loss(const Tensor& pred, const Tensor& gt) {
  check(pred.shape() == gt.shape(),
        "counting loss: shapes differ, " + shape_str(pred.shape()) + " vs " +
            shape_str(gt.shape()));
  return abs(sub(sum(pred), sum(gt)));
}

Tensor tv_loss(const Tensor& pred, const Tensor& gt) {
  check_grid_pair(pred, gt, "tv loss");
  Tensor sp = sum(pred);
  Tensor sg = sum(gt);
  check(sp.data()[0] > 0.0, "tv loss: prediction has zero total mass");
  check(sg.data()[0] > 0.0, "tv loss: ground truth has zero total mass");
  Tensor diff = sub(div(pred, sp), div(gt, sg));
  return mul(mul(sum(abs(diff)), 0.5), sg);
}

Tensor sinkhorn_ot_loss(const Tensor& pred, const Tensor& gt,
                        const LossConfig& cfg) {
  check_grid_pair(pred, gt, "ot loss");
  Tensor sp = sum(pred);
  Tensor sg = sum(gt);
  check(sp.data()[0] > 0.0, "ot loss: prediction has zero total mass");
  check(sg.data()[0] > 0.0, "ot loss: ground truth has zero total mass");
  Tensor a = div(pred, sp);
  Tensor b = div(gt, sg);
  Tensor v_ab = sinkhorn_value(a, b, cfg.sinkhorn_reg, cfg.sinkhorn_iters);
  Tensor v_aa = sinkhorn_value(a, a, cfg.sinkhorn_reg, cfg.sinkhorn_iters);
  Tensor v_bb = sinkhorn_value(b, b, cfg.sinkhorn_reg, cfg.sinkhorn_iters);
  return relu(sub(sub(v_ab, mul(v_aa, 0.5)), mul(v_bb, 0.5)));
}

Tensor composite_loss(const Tensor& pred, const Tensor& gt,
                      const LossConfig& cfg) {
  check_grid_pair(pred, gt, "composite loss");
  Tensor lc = counting_loss(pred, gt);
  if (plain_sum(gt) == 0.0) return lc;
  return add(lc, add(mul(sinkhorn_ot_loss(pred, gt, cfg), cfg.lambda1),
                     mul(tv_loss(pred, gt), cfg.lambda2)));
}

}  // namespace rcc
