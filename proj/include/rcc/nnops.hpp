#pragma once

#include <string>
#include <vector>

#include "rcc/ops.hpp"

namespace rcc {

// Parameter registry entry. Non-trainable entries (BN running stats) ride
// along in checkpoints but are skipped by the optimizer.
struct NamedTensor {
  std::string name;
  Tensor value;
  bool trainable = true;
};
using ParamList = std::vector<NamedTensor>;

struct Conv2dSpec {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int groups = 1;
};

// x: [B, Cin, H, W], w: [Cout, Cin/groups, kh, kw], b: [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              const Conv2dSpec& spec = {});

int64_t conv2d_out_dim(int64_t in, int64_t k, int stride, int padding,
                       int dilation);

// x: [B, C, H, W], coords: [B, S, 2] as (x, y) in pixel units with integer
// coordinates at pixel centers. Out-of-range taps read as zero. Returns
// [B, C, S]; differentiable in both x and coords.
Tensor bilinear_sample(const Tensor& x, const Tensor& coords);

// Integer-factor bilinear upsampling, half-pixel source mapping with edge
// clamping. [B, C, H, W] -> [B, C, H*scale, W*scale].
Tensor upsample_bilinear(const Tensor& x, int scale);

// Normalizes the last axis. gamma/beta: [C].
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor softmax(const Tensor& x, int axis);

// [B, C, H, W] -> [B, C]
Tensor global_avg_pool(const Tensor& x);

// x: [..., In], w: [In, Out], b: [Out] or undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// ---- Parameterized layers ----

struct Conv2d {
  Tensor w, b;
  Conv2dSpec spec;

  static Conv2d make(Rng& rng, int64_t cin, int64_t cout, int k,
                     const Conv2dSpec& spec = {}, bool bias = true);
  Tensor forward(const Tensor& x) const { return conv2d(x, w, b, spec); }
  void collect(const std::string& prefix, ParamList& out);
};

struct Linear {
  Tensor w, b;

  static Linear make(Rng& rng, int64_t in, int64_t out, bool bias = true);
  Tensor forward(const Tensor& x) const { return linear(x, w, b); }
  void collect(const std::string& prefix, ParamList& out);
};

struct LayerNorm {
  Tensor gamma, beta;
  double eps = 1e-5;

  static LayerNorm make(int64_t c);
  Tensor forward(const Tensor& x) const {
    return layer_norm(x, gamma, beta, eps);
  }
  void collect(const std::string& prefix, ParamList& out);
};

// Channel batch norm over [B, C, H, W]. Training mode normalizes with biased
// batch statistics and folds them into the running estimates; eval mode uses
// the running estimates, which start at (0, 1) so a fresh network is
// evaluable before its first training batch.
struct BatchNorm2d {
  Tensor gamma, beta;
  Tensor running_mean, running_var;
  Tensor batches_seen;  // scalar counter, persisted with the stats
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNorm2d make(int64_t c);
  Tensor forward(const Tensor& x, bool training);
  void collect(const std::string& prefix, ParamList& out);
};

}  // namespace rcc
