#include "rcc/attention.hpp"

#include <cmath>

namespace rcc {

Tensor tokens_to_spatial(const Tensor& x, int64_t H, int64_t W) {
  check(x.ndim() == 3, "tokens_to_spatial: expected [B,N,C], got " +
                           shape_str(x.shape()));
  check(x.dim(1) == H * W, "tokens_to_spatial: " + shape_str(x.shape()) +
                               " does not tile " + std::to_string(H) + "x" +
                               std::to_string(W));
  Tensor g = reshape(x, {x.dim(0), H, W, x.dim(2)});
  return transpose(g, {0, 3, 1, 2});
}

Tensor spatial_to_tokens(const Tensor& x) {
  check(x.ndim() == 4, "spatial_to_tokens: expected [B,C,H,W], got " +
                           shape_str(x.shape()));
  Tensor t = transpose(x, {0, 2, 3, 1});
  return reshape(t, {x.dim(0), x.dim(2) * x.dim(3), x.dim(1)});
}

AttentionMode attention_mode_from_string(const std::string& s) {
  if (s == "gsa") return AttentionMode::kGsa;
  if (s == "gsa_local_conv") return AttentionMode::kGsaLocalConv;
  if (s == "dea") return AttentionMode::kDea;
  throw std::invalid_argument("unknown attention mode: " + s);
}

std::string to_string(AttentionMode m) {
  switch (m) {
    case AttentionMode::kGsa: return "gsa";
    case AttentionMode::kGsaLocalConv: return "gsa_local_conv";
    case AttentionMode::kDea: return "dea";
  }
  return "?";
}

namespace {

// [B, N, C] -> [B, heads, N, C/heads]
Tensor split_heads(const Tensor& x, int64_t heads) {
  const int64_t B = x.dim(0), N = x.dim(1), C = x.dim(2);
  Tensor r = reshape(x, {B, N, heads, C / heads});
  return transpose(r, {0, 2, 1, 3});
}

// [B, heads, N, d] -> [B, N, heads*d]
Tensor merge_heads(const Tensor& x) {
  Tensor t = transpose(x, {0, 2, 1, 3});
  return reshape(t, {x.dim(0), x.dim(2), x.dim(1) * x.dim(3)});
}

// softmax(Q Kᵀ / sqrt(d)) V over per-head token matrices.
Tensor scaled_dot_attention(const Tensor& qh, const Tensor& kh,
                            const Tensor& vh) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(qh.dim(3)));
  Tensor scores = mul(matmul(qh, transpose(kh, {0, 1, 3, 2})), scale);
  return matmul(softmax(scores, -1), vh);
}

}  // namespace

DeaAttention DeaAttention::make(Rng& rng, int64_t dim, int64_t heads,
                                AttentionMode mode, int sr_ratio,
                                int local_kernel, double alpha_init) {
  check(dim >= 1 && heads >= 1 && dim % heads == 0,
        "attention: dim " + std::to_string(dim) +
            " must be divisible by heads " + std::to_string(heads));
  check(sr_ratio >= 1, "attention: sr_ratio must be >= 1");
  check(local_kernel >= 1 && local_kernel % 2 == 1,
        "attention: local_kernel must be odd, got " +
            std::to_string(local_kernel));
  DeaAttention a;
  a.dim = dim;
  a.heads = heads;
  a.sr_ratio = sr_ratio;
  a.mode = mode;
  Rng r = rng.derive("attn");
  a.wq = Linear::make(r, dim, dim, false);
  a.wk = Linear::make(r, dim, dim, false);
  a.wv = Linear::make(r, dim, dim, false);
  a.wp = Linear::make(r, dim, dim, false);
  if (sr_ratio > 1) {
    Conv2dSpec sp;
    sp.stride = sr_ratio;
    a.sr = Conv2d::make(r, dim, dim, sr_ratio, sp, true);
    a.sr_norm = LayerNorm::make(dim);
  }
  if (a.has_local()) {
    Conv2dSpec dw;
    dw.padding = local_kernel / 2;
    dw.groups = static_cast<int>(dim);
    a.local_in = Conv2d::make(r, dim, dim, 1, {}, true);
    a.local_dw = Conv2d::make(r, dim, dim, local_kernel, dw, true);
    a.local_out = Conv2d::make(r, dim, dim, 1, {}, true);
  }
  if (mode == AttentionMode::kDea) {
    a.alpha = Tensor::full({}, alpha_init);
    a.alpha.set_requires_grad(true);
  }
  return a;
}

Tensor DeaAttention::forward(const Tensor& x, int64_t H, int64_t W) const {
  check(x.ndim() == 3 && x.dim(2) == dim,
        "attention: expected [B,N," + std::to_string(dim) + "], got " +
            shape_str(x.shape()));
  check(x.dim(1) == H * W, "attention: tokens " + shape_str(x.shape()) +
                               " do not tile " + std::to_string(H) + "x" +
                               std::to_string(W));
  Tensor q = wq.forward(x);

  Tensor kv_tokens = x;
  if (sr_ratio > 1) {
    check(H % sr_ratio == 0 && W % sr_ratio == 0,
          "attention: grid " + std::to_string(H) + "x" + std::to_string(W) +
              " not divisible by sr_ratio " + std::to_string(sr_ratio));
    Tensor sp = tokens_to_spatial(x, H, W);
    kv_tokens = sr_norm.forward(spatial_to_tokens(sr.forward(sp)));
  }
  Tensor k = wk.forward(kv_tokens);
  Tensor v = wv.forward(kv_tokens);

  Tensor qh = split_heads(q, heads);
  Tensor kh = split_heads(k, heads);
  Tensor vh = split_heads(v, heads);
  Tensor attn = scaled_dot_attention(qh, kh, vh);

  if (has_local()) {
    check(sr_ratio == 1,
          "attention: the local branch requires full-resolution K/V");
    Tensor sp = tokens_to_spatial(x, H, W);
    Tensor lm = local_out.forward(local_dw.forward(local_in.forward(sp)));
    Tensor lh = split_heads(spatial_to_tokens(lm), heads);
    Tensor local = mul(lh, vh);  // unnormalized map gates the values
    if (mode == AttentionMode::kDea) {
      attn = add(attn, mul(local, alpha));
    } else {
      attn = add(attn, local);
    }
  }
  return wp.forward(merge_heads(attn));
}

void DeaAttention::collect(const std::string& prefix, ParamList& out) {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wp.collect(prefix + ".wp", out);
  if (sr_ratio > 1) {
    sr.collect(prefix + ".sr", out);
    sr_norm.collect(prefix + ".sr_norm", out);
  }
  if (has_local()) {
    local_in.collect(prefix + ".local_in", out);
    local_dw.collect(prefix + ".local_dw", out);
    local_out.collect(prefix + ".local_out", out);
  }
  if (mode == AttentionMode::kDea)
    out.push_back({prefix + ".alpha", alpha, true});
}

CrossAttention CrossAttention::make(Rng& rng, int64_t dim, int64_t heads) {
  check(dim >= 1 && heads >= 1 && dim % heads == 0,
        "cross_attention: dim " + std::to_string(dim) +
            " must be divisible by heads " + std::to_string(heads));
  CrossAttention c;
  c.dim = dim;
  c.heads = heads;
  Rng r = rng.derive("cross_attn");
  c.wq = Linear::make(r, dim, dim, false);
  c.wk = Linear::make(r, dim, dim, false);
  c.wv = Linear::make(r, dim, dim, false);
  c.wp = Linear::make(r, dim, dim, false);
  return c;
}

Tensor CrossAttention::forward(const Tensor& q_tokens,
                               const Tensor& kv_tokens) const {
  check(q_tokens.ndim() == 3 && kv_tokens.ndim() == 3 &&
            q_tokens.dim(2) == dim && kv_tokens.dim(2) == dim &&
            q_tokens.dim(0) == kv_tokens.dim(0),
        "cross_attention: incompatible token maps " +
            shape_str(q_tokens.shape()) + " and " +
            shape_str(kv_tokens.shape()));
  Tensor qh = split_heads(wq.forward(q_tokens), heads);
  Tensor kh = split_heads(wk.forward(kv_tokens), heads);
  Tensor vh = split_heads(wv.forward(kv_tokens), heads);
  return wp.forward(merge_heads(scaled_dot_attention(qh, kh, vh)));
}

void CrossAttention::collect(const std::string& prefix, ParamList& out) {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  wp.collect(prefix + ".wp", out);
}

Deab Deab::make(Rng& rng, int64_t dim, int64_t heads, AttentionMode mode,
                int sr_ratio, int ffn_ratio, int local_kernel,
                double alpha_init) {
  Deab d;
  d.norm1 = LayerNorm::make(dim);
  d.norm2 = LayerNorm::make(dim);
  d.attn = DeaAttention::make(rng, dim, heads, mode, sr_ratio, local_kernel,
                              alpha_init);
  const int64_t hidden = dim * ffn_ratio;
  Rng r = rng.derive("ffn");
  Conv2dSpec dw;
  dw.padding = 1;
  dw.groups = static_cast<int>(hidden);
  d.ffn_in = Conv2d::make(r, dim, hidden, 1, {}, true);
  d.ffn_dw = Conv2d::make(r, hidden, hidden, 3, dw, true);
  d.ffn_out = Conv2d::make(r, hidden, dim, 1, {}, true);
  return d;
}

Tensor Deab::forward(const Tensor& x, int64_t H, int64_t W) const {
  Tensor xh = add(attn.forward(norm1.forward(x), H, W), x);
  Tensor sp = tokens_to_spatial(norm2.forward(xh), H, W);
  Tensor ff = ffn_out.forward(gelu(ffn_dw.forward(ffn_in.forward(sp))));
  return add(spatial_to_tokens(ff), xh);
}

void Deab::collect(const std::string& prefix, ParamList& out) {
  norm1.collect(prefix + ".norm1", out);
  attn.collect(prefix + ".attn", out);
  norm2.collect(prefix + ".norm2", out);
  ffn_in.collect(prefix + ".ffn_in", out);
  ffn_dw.collect(prefix + ".ffn_dw", out);
  ffn_out.collect(prefix + ".ffn_out", out);
}

}  // namespace rcc
