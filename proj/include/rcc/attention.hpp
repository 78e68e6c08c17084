#pragma once

#include "rcc/nnops.hpp"

namespace rcc {

// [B, N, C] <-> [B, C, H, W] with N = H*W.
Tensor tokens_to_spatial(const Tensor& x, int64_t H, int64_t W);
Tensor spatial_to_tokens(const Tensor& x);

enum class AttentionMode { kGsa, kGsaLocalConv, kDea };

AttentionMode attention_mode_from_string(const std::string& s);
std::string to_string(AttentionMode m);

// Multi-head token attention with an optional convolutional local branch.
//  - kGsa: plain global self-attention.
//  - kGsaLocalConv: global + local branch, combined with a fixed unit weight.
//  - kDea: global + local branch scaled by a learnable shared scalar.
// An sr_ratio > 1 shrinks the K/V token map with a strided conv before the
// projections (keeps early high-resolution stages affordable).
struct DeaAttention {
  int64_t dim = 0;
  int64_t heads = 1;
  int sr_ratio = 1;
  AttentionMode mode = AttentionMode::kGsa;

  Linear wq, wk, wv, wp;  // projection weights, no biases
  Conv2d sr;              // only when sr_ratio > 1
  LayerNorm sr_norm;
  Conv2d local_in, local_dw, local_out;  // only when the local branch exists
  Tensor alpha;                          // only in kDea mode

  static DeaAttention make(Rng& rng, int64_t dim, int64_t heads,
                           AttentionMode mode, int sr_ratio = 1,
                           int local_kernel = 5, double alpha_init = 0.6);
  // x: [B, N, C] tokens laid out on an H x W grid.
  Tensor forward(const Tensor& x, int64_t H, int64_t W) const;
  void collect(const std::string& prefix, ParamList& out);

  bool has_local() const { return mode != AttentionMode::kGsa; }
};

// Bare multi-head cross-attention: queries from one token map, keys/values
// from another. No positional encoding, no residual, no feed-forward.
struct CrossAttention {
  int64_t dim = 0;
  int64_t heads = 1;
  Linear wq, wk, wv, wp;

  static CrossAttention make(Rng& rng, int64_t dim, int64_t heads);
  // q: [B, Nq, C], kv: [B, Nkv, C] -> [B, Nq, C]
  Tensor forward(const Tensor& q, const Tensor& kv) const;
  void collect(const std::string& prefix, ParamList& out);
};

// Transformer block: x' = attn(LN(x)) + x; out = cffn(LN(x')) + x'.
// The feed-forward is convolutional: 1x1 expand, 3x3 depthwise, GELU,
// 1x1 project.
struct Deab {
  LayerNorm norm1, norm2;
  DeaAttention attn;
  Conv2d ffn_in, ffn_dw, ffn_out;

  static Deab make(Rng& rng, int64_t dim, int64_t heads, AttentionMode mode,
                   int sr_ratio = 1, int ffn_ratio = 4, int local_kernel = 5,
                   double alpha_init = 0.6);
  Tensor forward(const Tensor& x, int64_t H, int64_t W) const;
  void collect(const std::string& prefix, ParamList& out);
};

}  // namespace rcc
