#include "rcc/mffm.hpp"

namespace rcc {

namespace {

bool needs_concat_fc(FuseMode m) { return m != FuseMode::kAdd; }

// Channel-wise linear on a spatial map.
Tensor project(const Linear& fc, const Tensor& x) {
  const int64_t H = x.dim(2), W = x.dim(3);
  return tokens_to_spatial(fc.forward(spatial_to_tokens(x)), H, W);
}

}  // namespace

FuseMode fuse_mode_from_string(const std::string& s) {
  if (s == "add") return FuseMode::kAdd;
  if (s == "concat") return FuseMode::kConcat;
  if (s == "concat_add_add") return FuseMode::kConcatAddAdd;
  if (s == "concat_add_concat") return FuseMode::kConcatAddConcat;
  if (s == "mffm") return FuseMode::kMffm;
  check(false, "fuse mode: unknown '" + s +
                   "' (want add|concat|concat_add_add|concat_add_concat|"
                   "mffm)");
  return FuseMode::kMffm;
}

std::string to_string(FuseMode m) {
  switch (m) {
    case FuseMode::kAdd: return "add";
    case FuseMode::kConcat: return "concat";
    case FuseMode::kConcatAddAdd: return "concat_add_add";
    case FuseMode::kConcatAddConcat: return "concat_add_concat";
    case FuseMode::kMffm: return "mffm";
  }
  return "?";
}

Mffm Mffm::make(Rng& rng, const std::array<int64_t, 3>& in_channels,
                int64_t c_f, int64_t heads, FuseMode mode) {
  check(c_f >= 1, "mffm: c_f must be positive");
  Mffm m;
  m.c_f = c_f;
  m.mode = mode;
  Rng r = rng.derive("mffm");
  m.proj2 = Linear::make(r, in_channels[0], c_f);
  m.proj3 = Linear::make(r, in_channels[1], c_f);
  m.proj4 = Linear::make(r, in_channels[2], c_f);
  if (needs_concat_fc(mode)) m.concat_fc = Linear::make(r, 3 * c_f, c_f);
  if (mode == FuseMode::kConcatAddConcat)
    m.pair_fc = Linear::make(r, 2 * c_f, c_f);
  if (mode == FuseMode::kMffm) m.cross = CrossAttention::make(r, c_f, heads);
  return m;
}

std::array<Tensor, 3> Mffm::unify(const FeaturePyramid& p) const {
  check(p.f2.ndim() == 4 && p.f3.ndim() == 4 && p.f4.ndim() == 4,
        "unify: pyramid taps must be [B,C,H,W]");
  check(p.f2.dim(2) == 2 * p.f3.dim(2) && p.f3.dim(2) == 2 * p.f4.dim(2),
        "unify: tap resolutions must halve per stage, got " +
            shape_str(p.f2.shape()) + ", " + shape_str(p.f3.shape()) + ", " +
            shape_str(p.f4.shape()));
  return {upsample_bilinear(project(proj2, p.f2), 1),
          upsample_bilinear(project(proj3, p.f3), 2),
          upsample_bilinear(project(proj4, p.f4), 4)};
}

Tensor Mffm::fuse(const Tensor& u2, const Tensor& u3, const Tensor& u4) const {
  return fuse_ablation(u2, u3, u4, FuseMode::kMffm);
}

Tensor Mffm::fuse_ablation(const Tensor& u2, const Tensor& u3,
                           const Tensor& u4, FuseMode m) const {
  const bool runnable =
      m == FuseMode::kAdd ||
      (needs_concat_fc(mode) &&
       (m == FuseMode::kConcat || m == FuseMode::kConcatAddAdd)) ||
      m == mode;
  check(runnable, "fuse: built for mode '" + to_string(mode) +
                      "', asked for '" + to_string(m) + "'");
  const int64_t H = u2.dim(2), W = u2.dim(3);
  Tensor fa = add(add(u2, u3), u4);
  if (m == FuseMode::kAdd) return fa;
  Tensor fc = project(concat_fc, concat({u2, u3, u4}, 1));
  switch (m) {
    case FuseMode::kConcat: return fc;
    case FuseMode::kConcatAddAdd: return add(fc, fa);
    case FuseMode::kConcatAddConcat:
      return project(pair_fc, concat({fc, fa}, 1));
    case FuseMode::kMffm: {
      Tensor out = cross.forward(spatial_to_tokens(fc), spatial_to_tokens(fa));
      return tokens_to_spatial(out, H, W);
    }
    default: break;
  }
  check(false, "fuse: unreachable mode");
  return fa;
}

Tensor Mffm::forward(const FeaturePyramid& p) const {
  std::array<Tensor, 3> u = unify(p);
  return fuse_ablation(u[0], u[1], u[2], mode);
}

void Mffm::collect(const std::string& prefix, ParamList& out) {
  proj2.collect(prefix + ".proj2", out);
  proj3.collect(prefix + ".proj3", out);
  proj4.collect(prefix + ".proj4", out);
  if (needs_concat_fc(mode)) concat_fc.collect(prefix + ".concat_fc", out);
  if (mode == FuseMode::kConcatAddConcat)
    pair_fc.collect(prefix + ".pair_fc", out);
  if (mode == FuseMode::kMffm) cross.collect(prefix + ".cross", out);
}

}  // namespace rcc
