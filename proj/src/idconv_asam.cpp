#include "rcc/idconv_asam.hpp"

#include <cmath>

namespace rcc {

ConvMode conv_mode_from_string(const std::string& s) {
  if (s == "vanilla") return ConvMode::kVanilla;
  if (s == "deformable") return ConvMode::kDeformable;
  if (s == "idconv") return ConvMode::kIdconv;
  check(false,
        "conv mode: unknown '" + s + "' (want vanilla|deformable|idconv)");
  return ConvMode::kIdconv;
}

std::string to_string(ConvMode m) {
  switch (m) {
    case ConvMode::kVanilla: return "vanilla";
    case ConvMode::kDeformable: return "deformable";
    case ConvMode::kIdconv: return "idconv";
  }
  return "?";
}

Tensor deform_sample(const Tensor& x, const Tensor& offsets, int dilation) {
  check(x.ndim() == 4, "deform_sample: input must be [B,C,H,W], got " +
                           shape_str(x.shape()));
  const int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
  check(offsets.ndim() == 4 && offsets.dim(0) == B && offsets.dim(1) == 18 &&
            offsets.dim(2) == H && offsets.dim(3) == W,
        "deform_sample: offsets must be [" + std::to_string(B) + ", 18, " +
            std::to_string(H) + ", " + std::to_string(W) + "], got " +
            shape_str(offsets.shape()));
  check(dilation >= 1, "deform_sample: dilation must be >= 1");

  const int64_t S = H * W;
  std::vector<double> bx(static_cast<size_t>(S)), by(static_cast<size_t>(S));
  for (int64_t p = 0; p < S; ++p) {
    bx[static_cast<size_t>(p)] = static_cast<double>(p % W);
    by[static_cast<size_t>(p)] = static_cast<double>(p / W);
  }
  const Tensor base_x = Tensor::from_data({1, S}, bx);
  const Tensor base_y = Tensor::from_data({1, S}, by);

  std::vector<Tensor> taps;
  taps.reserve(9);
  for (int n = 0; n < 9; ++n) {
    const double dy = static_cast<double>((n / 3 - 1) * dilation);
    const double dx = static_cast<double>((n % 3 - 1) * dilation);
    Tensor oy = reshape(slice(offsets, 1, 2 * n, 1), {B, S});
    Tensor ox = reshape(slice(offsets, 1, 2 * n + 1, 1), {B, S});
    Tensor cy = reshape(add(add(oy, base_y), dy), {B, S, 1});
    Tensor cx = reshape(add(add(ox, base_x), dx), {B, S, 1});
    taps.push_back(bilinear_sample(x, concat({cx, cy}, 2)));
  }
  return reshape(concat(taps, 1), {B, 9 * x.dim(1), H, W});
}

IdConv IdConv::make(Rng& rng, int64_t channels, int dilation, ConvMode mode) {
  check(channels >= 1, "idconv: channels must be positive");
  check(dilation >= 1, "idconv: dilation must be >= 1");
  IdConv c;
  c.channels = channels;
  c.dilation = dilation;
  c.mode = mode;
  Rng r = rng.derive("idconv");
  if (mode != ConvMode::kVanilla) {
    Conv2dSpec sp;
    sp.padding = 1;
    c.offset_conv = Conv2d::make(r, channels, 18, 3, sp, true);
    // Start at the regular grid; deformation is learned from zero.
    for (int64_t i = 0; i < c.offset_conv.w.numel(); ++i)
      c.offset_conv.w.data()[i] = 0.0;
    for (int64_t i = 0; i < c.offset_conv.b.numel(); ++i)
      c.offset_conv.b.data()[i] = 0.0;
  }
  if (mode != ConvMode::kIdconv) {
    c.kernel = Tensor::randn({9, channels}, r, std::sqrt(2.0 / 9.0));
    c.kernel.set_requires_grad(true);
  } else {
    c.wb_in = Conv2d::make(r, 9 * channels, channels, 1, {}, true);
    c.wb_bn = BatchNorm2d::make(channels);
    c.wb_out = Conv2d::make(r, channels, 9 * channels, 1, {}, true);
  }
  c.mix = Conv2d::make(r, channels, channels, 1, {}, true);
  return c;
}

Tensor IdConv::offsets_for(const Tensor& x) const {
  const int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
  if (mode == ConvMode::kVanilla) return Tensor::zeros({B, 18, H, W});
  Tensor off = offset_conv.forward(x);
  for (int64_t i = 0; i < off.numel(); ++i)
    if (!std::isfinite(off.data()[i]))
      check(false, "idconv: non-finite offset at flat index " +
                       std::to_string(i) + " (value " +
                       std::to_string(off.data()[i]) + ")");
  return off;
}

Tensor IdConv::dynamic_weights(const Tensor& x, bool training) {
  const int64_t B = x.dim(0);
  if (mode != ConvMode::kIdconv)
    return broadcast_to(reshape(kernel, {1, 9, channels}), {B, 9, channels});
  Tensor deformed = deform_sample(x, offsets_for(x), dilation);
  Tensor v = reshape(global_avg_pool(deformed), {B, 9 * channels, 1, 1});
  v = wb_out.forward(relu(wb_bn.forward(wb_in.forward(v), training)));
  return reshape(v, {B, 9, channels});
}

Tensor IdConv::forward(const Tensor& x, bool training) {
  check(x.ndim() == 4 && x.dim(1) == channels,
        "idconv: expected [B," + std::to_string(channels) + ",H,W], got " +
            shape_str(x.shape()));
  const int64_t B = x.dim(0), H = x.dim(2), W = x.dim(3);
  Tensor deformed = deform_sample(x, offsets_for(x), dilation);

  Tensor w;  // [B, 9, C]
  if (mode == ConvMode::kIdconv) {
    Tensor v = reshape(global_avg_pool(deformed), {B, 9 * channels, 1, 1});
    v = wb_out.forward(relu(wb_bn.forward(wb_in.forward(v), training)));
    w = reshape(v, {B, 9, channels});
  } else {
    w = broadcast_to(reshape(kernel, {1, 9, channels}), {B, 9, channels});
  }

  Tensor taps = reshape(deformed, {B, 9, channels, H * W});
  Tensor y = sum(mul(taps, reshape(w, {B, 9, channels, 1})), {1});
  return mix.forward(reshape(y, {B, channels, H, W}));
}

void IdConv::collect(const std::string& prefix, ParamList& out) {
  if (mode != ConvMode::kVanilla)
    offset_conv.collect(prefix + ".offset_conv", out);
  if (mode != ConvMode::kIdconv) {
    out.push_back({prefix + ".kernel", kernel, true});
  } else {
    wb_in.collect(prefix + ".wb_in", out);
    wb_bn.collect(prefix + ".wb_bn", out);
    wb_out.collect(prefix + ".wb_out", out);
  }
  mix.collect(prefix + ".mix", out);
}

Asam Asam::make(Rng& rng, int64_t channels, ConvMode mode) {
  check(channels >= 2 && channels % 2 == 0,
        "asam: channels " + std::to_string(channels) +
            " must be even for the halving stage");
  Asam a;
  a.channels = channels;
  a.mode = mode;
  Rng r = rng.derive("asam");
  const int64_t half = channels / 2;
  Rng re = r.derive("entry");
  a.entry_idconv = IdConv::make(re, channels, 1, mode);
  a.entry_bn = BatchNorm2d::make(channels);
  a.entry_conv = Conv2d::make(re, channels, half, 1, {}, true);
  for (int d = 1; d <= 3; ++d) {
    Rng rb = r.derive("branch" + std::to_string(d));
    a.branches.push_back(IdConv::make(rb, half, d, mode));
  }
  Rng rx = r.derive("exit");
  a.exit_bn = BatchNorm2d::make(3 * half);
  a.exit_conv = Conv2d::make(rx, 3 * half, channels, 1, {}, true);
  return a;
}

Tensor Asam::branches_concat(const Tensor& fm, bool training) {
  std::vector<Tensor> outs;
  outs.reserve(3);
  for (IdConv& b : branches) outs.push_back(b.forward(fm, training));
  return concat(outs, 1);
}

Tensor Asam::forward(const Tensor& x, bool training) {
  check(x.ndim() == 4 && x.dim(1) == channels,
        "asam: expected [B," + std::to_string(channels) + ",H,W], got " +
            shape_str(x.shape()));
  Tensor fm = entry_conv.forward(
      relu(entry_bn.forward(entry_idconv.forward(x, training), training)));
  Tensor fc = branches_concat(fm, training);
  return exit_conv.forward(relu(exit_bn.forward(fc, training)));
}

void Asam::collect(const std::string& prefix, ParamList& out) {
  entry_idconv.collect(prefix + ".entry_idconv", out);
  entry_bn.collect(prefix + ".entry_bn", out);
  entry_conv.collect(prefix + ".entry_conv", out);
  for (size_t i = 0; i < branches.size(); ++i)
    branches[i].collect(prefix + ".branches." + std::to_string(i), out);
  exit_bn.collect(prefix + ".exit_bn", out);
  exit_conv.collect(prefix + ".exit_conv", out);
}

}  // namespace rcc
