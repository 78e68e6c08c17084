#pragma once

#include "rcc/backbone.hpp"

namespace rcc {

// Fusion strategies for the three unified maps. kMffm is the full module:
// concat branch as queries, add branch as keys/values, fused by
// cross-attention. The others are the simpler rows of the fusion ablation.
enum class FuseMode {
  kAdd,              // F2' + F3' + F4'
  kConcat,           // Linear(Concat(F2', F3', F4'))
  kConcatAddAdd,     // concat branch + add branch
  kConcatAddConcat,  // Linear(Concat(concat branch, add branch))
  kMffm,             // CrossAttn(concat branch, add branch, add branch)
};

FuseMode fuse_mode_from_string(const std::string& s);
std::string to_string(FuseMode m);

// Multi-level feature fusion: project each tap to a common width, upsample
// everything to stride 8, then fuse. Parameters are created only for the
// pieces the constructed mode uses.
struct Mffm {
  int64_t c_f = 128;
  FuseMode mode = FuseMode::kMffm;
  Linear proj2, proj3, proj4;  // per-stage channel projections
  Linear concat_fc;            // 3*C_f -> C_f (any mode with a concat branch)
  Linear pair_fc;              // 2*C_f -> C_f (kConcatAddConcat only)
  CrossAttention cross;        // kMffm only

  static Mffm make(Rng& rng, const std::array<int64_t, 3>& in_channels,
                   int64_t c_f = 128, int64_t heads = 4,
                   FuseMode mode = FuseMode::kMffm);
  // {F2, F3, F4} -> three maps, each [B, C_f, H8, W8] at F2's resolution.
  std::array<Tensor, 3> unify(const FeaturePyramid& p) const;
  // Full-module fusion (requires kMffm construction).
  Tensor fuse(const Tensor& u2, const Tensor& u3, const Tensor& u4) const;
  // Fusion by any mode whose parameters exist on this instance.
  Tensor fuse_ablation(const Tensor& u2, const Tensor& u3, const Tensor& u4,
                       FuseMode m) const;
  Tensor forward(const FeaturePyramid& p) const;
  void collect(const std::string& prefix, ParamList& out);
};

}  // namespace rcc
