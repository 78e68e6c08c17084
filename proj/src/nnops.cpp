#include "rcc/nnops.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <sstream>

namespace rcc {

namespace {

using RowMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

bool tracked(const std::shared_ptr<TensorImpl>& t) {
  return t->is_node_output || t->requires_grad;
}

std::shared_ptr<TensorImpl> fresh(const Shape& s) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = s;
  impl->data.assign(static_cast<size_t>(shape_numel(s)), 0.0);
  return impl;
}

struct ConvDims {
  int64_t B, Cin, H, W;
  int64_t Cout, Cing, kh, kw;
  int64_t Ho, Wo;
  int64_t groups, Coutg;
  int64_t K;  // im2col rows: Cing * kh * kw
  int64_t P;  // im2col cols: Ho * Wo
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b,
                   const Conv2dSpec& sp) {
  check(x.ndim() == 4, "conv2d: input must be [B,C,H,W], got " +
                           shape_str(x.shape()));
  check(w.ndim() == 4, "conv2d: weight must be [Cout,Cin/g,kh,kw], got " +
                           shape_str(w.shape()));
  check(sp.stride >= 1 && sp.dilation >= 1 && sp.padding >= 0 &&
            sp.groups >= 1,
        "conv2d: bad spec (stride " + std::to_string(sp.stride) +
            ", padding " + std::to_string(sp.padding) + ", dilation " +
            std::to_string(sp.dilation) + ", groups " +
            std::to_string(sp.groups) + ")");
  ConvDims d;
  d.B = x.dim(0);
  d.Cin = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.Cout = w.dim(0);
  d.Cing = w.dim(1);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.groups = sp.groups;
  check(d.Cin % d.groups == 0 && d.Cout % d.groups == 0,
        "conv2d: groups " + std::to_string(sp.groups) +
            " must divide channels: " + shape_str(x.shape()) + ", " +
            shape_str(w.shape()));
  check(d.Cing == d.Cin / d.groups,
        "conv2d: weight " + shape_str(w.shape()) + " inconsistent with input " +
            shape_str(x.shape()) + " at groups " + std::to_string(sp.groups));
  if (b.defined())
    check(b.ndim() == 1 && b.dim(0) == d.Cout,
          "conv2d: bias " + shape_str(b.shape()) + " must be [" +
              std::to_string(d.Cout) + "]");
  d.Ho = conv2d_out_dim(d.H, d.kh, sp.stride, sp.padding, sp.dilation);
  d.Wo = conv2d_out_dim(d.W, d.kw, sp.stride, sp.padding, sp.dilation);
  check(d.Ho >= 1 && d.Wo >= 1,
        "conv2d: kernel does not fit: input " + shape_str(x.shape()) +
            " weight " + shape_str(w.shape()));
  d.Coutg = d.Cout / d.groups;
  d.K = d.Cing * d.kh * d.kw;
  d.P = d.Ho * d.Wo;
  return d;
}

void im2col(const double* src, const ConvDims& d, const Conv2dSpec& sp,
            double* col) {
  int64_t r = 0;
  for (int64_t ci = 0; ci < d.Cing; ++ci) {
    const double* chan = src + ci * d.H * d.W;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx, ++r) {
        double* row = col + r * d.P;
        for (int64_t oy = 0; oy < d.Ho; ++oy) {
          const int64_t iy = oy * sp.stride - sp.padding + ky * sp.dilation;
          if (iy < 0 || iy >= d.H) {
            for (int64_t ox = 0; ox < d.Wo; ++ox) row[oy * d.Wo + ox] = 0.0;
            continue;
          }
          const double* line = chan + iy * d.W;
          for (int64_t ox = 0; ox < d.Wo; ++ox) {
            const int64_t ix = ox * sp.stride - sp.padding + kx * sp.dilation;
            row[oy * d.Wo + ox] =
                (ix >= 0 && ix < d.W) ? line[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvDims& d, const Conv2dSpec& sp,
                double* dst) {
  int64_t r = 0;
  for (int64_t ci = 0; ci < d.Cing; ++ci) {
    double* chan = dst + ci * d.H * d.W;
    for (int64_t ky = 0; ky < d.kh; ++ky) {
      for (int64_t kx = 0; kx < d.kw; ++kx, ++r) {
        const double* row = col + r * d.P;
        for (int64_t oy = 0; oy < d.Ho; ++oy) {
          const int64_t iy = oy * sp.stride - sp.padding + ky * sp.dilation;
          if (iy < 0 || iy >= d.H) continue;
          double* line = chan + iy * d.W;
          for (int64_t ox = 0; ox < d.Wo; ++ox) {
            const int64_t ix = ox * sp.stride - sp.padding + kx * sp.dilation;
            if (ix >= 0 && ix < d.W) line[ix] += row[oy * d.Wo + ox];
          }
        }
      }
    }
  }
}

}  // namespace

int64_t conv2d_out_dim(int64_t in, int64_t k, int stride, int padding,
                       int dilation) {
  return (in + 2 * padding - dilation * (k - 1) - 1) / stride + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b,
              const Conv2dSpec& sp) {
  const ConvDims d = conv_dims(x, w, b, sp);
  auto out = fresh({d.B, d.Cout, d.Ho, d.Wo});

  const auto xi = x.impl();
  const auto wi = w.impl();
  const auto bi = b.defined() ? b.impl() : nullptr;

  thread_local std::vector<double> col;
  col.resize(static_cast<size_t>(d.K * d.P));

  const double* xd = xi->data.data();
  const double* wd = wi->data.data();
  double* od = out->data.data();
  for (int64_t bb = 0; bb < d.B; ++bb) {
    for (int64_t g = 0; g < d.groups; ++g) {
      im2col(xd + (bb * d.Cin + g * d.Cing) * d.H * d.W, d, sp, col.data());
      CMapMat W(wd + g * d.Coutg * d.K, d.Coutg, d.K);
      CMapMat Col(col.data(), d.K, d.P);
      MapMat Out(od + (bb * d.Cout + g * d.Coutg) * d.P, d.Coutg, d.P);
      Out.noalias() = W * Col;
    }
  }
  if (bi) {
    const double* bd = bi->data.data();
    for (int64_t bb = 0; bb < d.B; ++bb)
      for (int64_t co = 0; co < d.Cout; ++co) {
        double* row = od + (bb * d.Cout + co) * d.P;
        const double bv = bd[co];
        for (int64_t p = 0; p < d.P; ++p) row[p] += bv;
      }
  }

  Tape* tape = Tape::active();
  if (tape && (tracked(xi) || tracked(wi) || (bi && tracked(b.impl())))) {
    const Conv2dSpec sp_c = sp;
    const ConvDims d_c = d;
    tape->record(out, [=]() {
      double* gx = Tape::grad_sink(xi);
      double* gw = Tape::grad_sink(wi);
      double* gb = bi ? Tape::grad_sink(bi) : nullptr;
      if (!gx && !gw && !gb) return;
      const double* go = Tape::node_adj(out.get());
      const double* xd2 = xi->data.data();
      const double* wd2 = wi->data.data();
      thread_local std::vector<double> col2, dcol;
      if (gw) col2.resize(static_cast<size_t>(d_c.K * d_c.P));
      if (gx) dcol.resize(static_cast<size_t>(d_c.K * d_c.P));
      for (int64_t bb = 0; bb < d_c.B; ++bb) {
        for (int64_t g = 0; g < d_c.groups; ++g) {
          CMapMat GY(go + (bb * d_c.Cout + g * d_c.Coutg) * d_c.P, d_c.Coutg,
                     d_c.P);
          if (gw) {
            im2col(xd2 + (bb * d_c.Cin + g * d_c.Cing) * d_c.H * d_c.W, d_c,
                   sp_c, col2.data());
            CMapMat Col(col2.data(), d_c.K, d_c.P);
            MapMat GW(gw + g * d_c.Coutg * d_c.K, d_c.Coutg, d_c.K);
            GW.noalias() += GY * Col.transpose();
          }
          if (gx) {
            CMapMat W(wd2 + g * d_c.Coutg * d_c.K, d_c.Coutg, d_c.K);
            MapMat DCol(dcol.data(), d_c.K, d_c.P);
            DCol.noalias() = W.transpose() * GY;
            col2im_add(dcol.data(), d_c, sp_c,
                       gx + (bb * d_c.Cin + g * d_c.Cing) * d_c.H * d_c.W);
          }
        }
        if (gb) {
          for (int64_t co = 0; co < d_c.Cout; ++co) {
            const double* row = go + (bb * d_c.Cout + co) * d_c.P;
            double acc = 0.0;
            for (int64_t p = 0; p < d_c.P; ++p) acc += row[p];
            gb[co] += acc;
          }
        }
      }
    });
  }
  return Tensor(out);
}

Tensor bilinear_sample(const Tensor& x, const Tensor& coords) {
  check(x.ndim() == 4, "bilinear_sample: input must be [B,C,H,W], got " +
                           shape_str(x.shape()));
  check(coords.ndim() == 3 && coords.dim(2) == 2,
        "bilinear_sample: coords must be [B,S,2], got " +
            shape_str(coords.shape()));
  check(coords.dim(0) == x.dim(0),
        "bilinear_sample: batch mismatch: " + shape_str(x.shape()) + " vs " +
            shape_str(coords.shape()));
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t S = coords.dim(1);
  {
    const double* cd = coords.data();
    for (int64_t i = 0; i < coords.numel(); ++i)
      if (!std::isfinite(cd[i])) {
        std::ostringstream os;
        os << "bilinear_sample: non-finite coordinate at flat index " << i
           << " (value " << cd[i] << ")";
        throw std::invalid_argument(os.str());
      }
  }
  auto out = fresh({B, C, S});
  const auto xi = x.impl();
  const auto ci = coords.impl();
  const double* xd = xi->data.data();
  const double* cd = ci->data.data();
  double* od = out->data.data();

  const int64_t chan = H * W;
  for (int64_t b = 0; b < B; ++b) {
    const double* xb = xd + b * C * chan;
    for (int64_t s = 0; s < S; ++s) {
      const double cx = cd[(b * S + s) * 2 + 0];
      const double cy = cd[(b * S + s) * 2 + 1];
      const int64_t x0 = static_cast<int64_t>(std::floor(cx));
      const int64_t y0 = static_cast<int64_t>(std::floor(cy));
      const double wx = cx - static_cast<double>(x0);
      const double wy = cy - static_cast<double>(y0);
      if (wx == 0.0 && wy == 0.0) {
        // Exact integer tap: bit-identical to a direct read.
        if (x0 >= 0 && x0 < W && y0 >= 0 && y0 < H) {
          const int64_t off = y0 * W + x0;
          for (int64_t c = 0; c < C; ++c)
            od[(b * C + c) * S + s] = xb[c * chan + off];
        }
        continue;
      }
      const bool in00 = y0 >= 0 && y0 < H && x0 >= 0 && x0 < W;
      const bool in01 = y0 >= 0 && y0 < H && x0 + 1 >= 0 && x0 + 1 < W;
      const bool in10 = y0 + 1 >= 0 && y0 + 1 < H && x0 >= 0 && x0 < W;
      const bool in11 = y0 + 1 >= 0 && y0 + 1 < H && x0 + 1 >= 0 && x0 + 1 < W;
      const double w00 = (1.0 - wy) * (1.0 - wx);
      const double w01 = (1.0 - wy) * wx;
      const double w10 = wy * (1.0 - wx);
      const double w11 = wy * wx;
      for (int64_t c = 0; c < C; ++c) {
        const double* pc = xb + c * chan;
        double v = 0.0;
        if (in00) v += w00 * pc[y0 * W + x0];
        if (in01) v += w01 * pc[y0 * W + x0 + 1];
        if (in10) v += w10 * pc[(y0 + 1) * W + x0];
        if (in11) v += w11 * pc[(y0 + 1) * W + x0 + 1];
        od[(b * C + c) * S + s] = v;
      }
    }
  }

  Tape* tape = Tape::active();
  if (tape && (tracked(xi) || tracked(ci))) {
    tape->record(out, [=]() {
      double* gx = Tape::grad_sink(xi);
      double* gc = Tape::grad_sink(ci);
      if (!gx && !gc) return;
      const double* go = Tape::node_adj(out.get());
      const double* xv = xi->data.data();
      const double* cv = ci->data.data();
      for (int64_t b = 0; b < B; ++b) {
        const double* xb = xv + b * C * chan;
        double* gxb = gx ? gx + b * C * chan : nullptr;
        for (int64_t s = 0; s < S; ++s) {
          const double cx = cv[(b * S + s) * 2 + 0];
          const double cy = cv[(b * S + s) * 2 + 1];
          const int64_t x0 = static_cast<int64_t>(std::floor(cx));
          const int64_t y0 = static_cast<int64_t>(std::floor(cy));
          const double wx = cx - static_cast<double>(x0);
          const double wy = cy - static_cast<double>(y0);
          const bool in00 = y0 >= 0 && y0 < H && x0 >= 0 && x0 < W;
          const bool in01 = y0 >= 0 && y0 < H && x0 + 1 < W && x0 + 1 >= 0;
          const bool in10 = y0 + 1 < H && y0 + 1 >= 0 && x0 >= 0 && x0 < W;
          const bool in11 = y0 + 1 < H && y0 + 1 >= 0 && x0 + 1 < W && x0 + 1 >= 0;
          const double w00 = (1.0 - wy) * (1.0 - wx);
          const double w01 = (1.0 - wy) * wx;
          const double w10 = wy * (1.0 - wx);
          const double w11 = wy * wx;
          double dvx = 0.0, dvy = 0.0;
          for (int64_t c = 0; c < C; ++c) {
            const double g = go[(b * C + c) * S + s];
            if (g == 0.0) continue;
            const double* pc = xb + c * chan;
            const double v00 = in00 ? pc[y0 * W + x0] : 0.0;
            const double v01 = in01 ? pc[y0 * W + x0 + 1] : 0.0;
            const double v10 = in10 ? pc[(y0 + 1) * W + x0] : 0.0;
            const double v11 = in11 ? pc[(y0 + 1) * W + x0 + 1] : 0.0;
            if (gxb) {
              double* gpc = gxb + c * chan;
              if (in00) gpc[y0 * W + x0] += g * w00;
              if (in01) gpc[y0 * W + x0 + 1] += g * w01;
              if (in10) gpc[(y0 + 1) * W + x0] += g * w10;
              if (in11) gpc[(y0 + 1) * W + x0 + 1] += g * w11;
            }
            if (gc) {
              dvx += g * ((1.0 - wy) * (v01 - v00) + wy * (v11 - v10));
              dvy += g * ((1.0 - wx) * (v10 - v00) + wx * (v11 - v01));
            }
          }
          if (gc) {
            gc[(b * S + s) * 2 + 0] += dvx;
            gc[(b * S + s) * 2 + 1] += dvy;
          }
        }
      }
    });
  }
  return Tensor(out);
}

Tensor upsample_bilinear(const Tensor& x, int scale) {
  check(x.ndim() == 4, "upsample_bilinear: input must be [B,C,H,W], got " +
                           shape_str(x.shape()));
  check(scale >= 1, "upsample_bilinear: scale must be >= 1, got " +
                        std::to_string(scale));
  const int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Ho = H * scale, Wo = W * scale;
  Tensor coords = Tensor::zeros({B, Ho * Wo, 2});
  double* cd = coords.data();
  const double inv = 1.0 / static_cast<double>(scale);
  for (int64_t oy = 0; oy < Ho; ++oy) {
    double sy = (static_cast<double>(oy) + 0.5) * inv - 0.5;
    sy = std::min(std::max(sy, 0.0), static_cast<double>(H - 1));
    for (int64_t ox = 0; ox < Wo; ++ox) {
      double sx = (static_cast<double>(ox) + 0.5) * inv - 0.5;
      sx = std::min(std::max(sx, 0.0), static_cast<double>(W - 1));
      cd[(oy * Wo + ox) * 2 + 0] = sx;
      cd[(oy * Wo + ox) * 2 + 1] = sy;
    }
  }
  for (int64_t b = 1; b < B; ++b)
    std::copy(cd, cd + Ho * Wo * 2, cd + b * Ho * Wo * 2);
  Tensor flat = bilinear_sample(x, coords);
  return reshape(flat, {B, C, Ho, Wo});
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const int64_t C = x.dim(-1);
  check(gamma.ndim() == 1 && gamma.dim(0) == C && beta.ndim() == 1 &&
            beta.dim(0) == C,
        "layer_norm: gamma " + shape_str(gamma.shape()) + " / beta " +
            shape_str(beta.shape()) + " must be [" + std::to_string(C) +
            "] for input " + shape_str(x.shape()));
  Tensor mu = mean(x, {-1}, true);
  Tensor xc = sub(x, mu);
  Tensor var = mean(mul(xc, xc), {-1}, true);
  Tensor xn = div(xc, sqrt(add(var, eps)));
  return add(mul(xn, gamma), beta);
}

Tensor softmax(const Tensor& x, int axis) {
  Tensor m = max(x, {axis}, true).detach();
  Tensor e = exp(sub(x, m));
  return div(e, sum(e, {axis}, true));
}

Tensor global_avg_pool(const Tensor& x) {
  check(x.ndim() == 4, "global_avg_pool: input must be [B,C,H,W], got " +
                           shape_str(x.shape()));
  return mean(x, {2, 3});
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check(w.ndim() == 2, "linear: weight must be [In,Out], got " +
                           shape_str(w.shape()));
  check(x.dim(-1) == w.dim(0), "linear: input " + shape_str(x.shape()) +
                                   " does not match weight " +
                                   shape_str(w.shape()));
  if (b.defined())
    check(b.ndim() == 1 && b.dim(0) == w.dim(1),
          "linear: bias " + shape_str(b.shape()) + " must be [" +
              std::to_string(w.dim(1)) + "]");
  Tensor h = x;
  const bool was_1d = x.ndim() == 1;
  if (was_1d) h = reshape(x, {1, x.dim(0)});
  Tensor y = matmul(h, w);
  if (b.defined()) y = add(y, b);
  if (was_1d) y = reshape(y, {w.dim(1)});
  return y;
}

Conv2d Conv2d::make(Rng& rng, int64_t cin, int64_t cout, int k,
                    const Conv2dSpec& spec, bool bias) {
  Conv2d c;
  c.spec = spec;
  const int64_t fan_in = (cin / spec.groups) * k * k;
  c.w = Tensor::randn({cout, cin / spec.groups, k, k}, rng,
                      std::sqrt(2.0 / static_cast<double>(fan_in)));
  c.w.set_requires_grad(true);
  if (bias) {
    c.b = Tensor::zeros({cout});
    c.b.set_requires_grad(true);
  }
  return c;
}

void Conv2d::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", w, true});
  if (b.defined()) out.push_back({prefix + ".bias", b, true});
}

Linear Linear::make(Rng& rng, int64_t in, int64_t out, bool bias) {
  Linear l;
  l.w = Tensor::randn({in, out}, rng, 0.02);
  l.w.set_requires_grad(true);
  if (bias) {
    l.b = Tensor::zeros({out});
    l.b.set_requires_grad(true);
  }
  return l;
}

void Linear::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".weight", w, true});
  if (b.defined()) out.push_back({prefix + ".bias", b, true});
}

LayerNorm LayerNorm::make(int64_t c) {
  LayerNorm ln;
  ln.gamma = Tensor::ones({c});
  ln.gamma.set_requires_grad(true);
  ln.beta = Tensor::zeros({c});
  ln.beta.set_requires_grad(true);
  return ln;
}

void LayerNorm::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".gamma", gamma, true});
  out.push_back({prefix + ".beta", beta, true});
}

BatchNorm2d BatchNorm2d::make(int64_t c) {
  BatchNorm2d bn;
  bn.gamma = Tensor::ones({c});
  bn.gamma.set_requires_grad(true);
  bn.beta = Tensor::zeros({c});
  bn.beta.set_requires_grad(true);
  bn.running_mean = Tensor::zeros({c});
  bn.running_var = Tensor::ones({c});
  bn.batches_seen = Tensor::zeros({});
  return bn;
}

Tensor BatchNorm2d::forward(const Tensor& x, bool training) {
  check(x.ndim() == 4, "batch_norm: input must be [B,C,H,W], got " +
                           shape_str(x.shape()));
  const int64_t C = gamma.dim(0);
  check(x.dim(1) == C, "batch_norm: input " + shape_str(x.shape()) +
                           " does not match " + std::to_string(C) +
                           " channels");
  Tensor xn;
  if (training) {
    Tensor mu = mean(x, {0, 2, 3}, true);
    Tensor xc = sub(x, mu);
    Tensor var = mean(mul(xc, xc), {0, 2, 3}, true);  // biased
    xn = div(xc, sqrt(add(var, eps)));
    // Fold batch stats into the running estimates; this bookkeeping is not
    // part of the differentiable graph.
    double* rm = running_mean.data();
    double* rv = running_var.data();
    const double* mv = mu.data();
    const double* vv = var.data();
    for (int64_t c = 0; c < C; ++c) {
      rm[c] = (1.0 - momentum) * rm[c] + momentum * mv[c];
      rv[c] = (1.0 - momentum) * rv[c] + momentum * vv[c];
    }
    batches_seen.data()[0] += 1.0;
  } else {
    // Before the first training batch the running stats are still their
    // (0, 1) initialization, so an untrained network is evaluable and just
    // passes activations through the affine part.
    Tensor mu = reshape(running_mean.detach(), {1, C, 1, 1});
    Tensor var = reshape(running_var.detach(), {1, C, 1, 1});
    xn = div(sub(x, mu), sqrt(add(var, eps)));
  }
  Tensor g4 = reshape(gamma, {1, C, 1, 1});
  Tensor b4 = reshape(beta, {1, C, 1, 1});
  return add(mul(xn, g4), b4);
}

void BatchNorm2d::collect(const std::string& prefix, ParamList& out) {
  out.push_back({prefix + ".gamma", gamma, true});
  out.push_back({prefix + ".beta", beta, true});
  out.push_back({prefix + ".running_mean", running_mean, false});
  out.push_back({prefix + ".running_var", running_var, false});
  out.push_back({prefix + ".batches_seen", batches_seen, false});
}

}  // namespace rcc
