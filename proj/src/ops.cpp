#include "rcc/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace rcc {

namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

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

// Strides of `s` aligned to a broadcast result of rank `out_rank`; broadcast
// axes (missing or size-1) get stride 0 so the odometer revisits them.
std::vector<int64_t> aligned_strides(const Shape& s, size_t out_rank,
                                     const Shape& out) {
  auto st = strides_of(s);
  std::vector<int64_t> r(out_rank, 0);
  const size_t off = out_rank - s.size();
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] != 1 || out[off + i] == 1) r[off + i] = st[i];
  }
  return r;
}

// Walk every element of `out`, tracking the corresponding offsets into two
// broadcast operands. body(out_index, a_offset, b_offset).
template <class F>
void bcast_loop(const Shape& out, const std::vector<int64_t>& sa,
                const std::vector<int64_t>& sb, F&& body) {
  const int r = static_cast<int>(out.size());
  const int64_t n = shape_numel(out);
  if (n == 0) return;
  if (r == 0) {
    body(0, 0, 0);
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t ai = 0, bi = 0;
  for (int64_t oi = 0;;) {
    body(oi, ai, bi);
    if (++oi == n) break;
    for (int ax = r - 1; ax >= 0; --ax) {
      ai += sa[ax];
      bi += sb[ax];
      if (++idx[ax] < out[ax]) break;
      ai -= sa[ax] * out[ax];
      bi -= sb[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

// Single-operand variant: body(out_index, a_offset).
template <class F>
void map_loop(const Shape& out, const std::vector<int64_t>& sa, F&& body) {
  const int r = static_cast<int>(out.size());
  const int64_t n = shape_numel(out);
  if (n == 0) return;
  if (r == 0) {
    body(0, 0);
    return;
  }
  std::vector<int64_t> idx(r, 0);
  int64_t ai = 0;
  for (int64_t oi = 0;;) {
    body(oi, ai);
    if (++oi == n) break;
    for (int ax = r - 1; ax >= 0; --ax) {
      ai += sa[ax];
      if (++idx[ax] < out[ax]) break;
      ai -= sa[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

// Elementwise binary op with broadcasting. fwd(a, b) -> out; da/db give the
// partials as functions of (out_adj, a, b, out).
template <class Fwd, class Da, class Db>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                 Da da, Db db) {
  const Shape os = broadcast_shapes(a.shape(), b.shape(), name);
  auto out = fresh(os);
  const auto ai = a.impl();
  const auto bi = b.impl();
  const double* ad = ai->data.data();
  const double* bd = bi->data.data();
  double* od = out->data.data();

  const bool same = ai->shape == bi->shape;
  if (same) {
    const int64_t n = out->numel();
    for (int64_t i = 0; i < n; ++i) od[i] = fwd(ad[i], bd[i]);
  } else {
    const auto sa = aligned_strides(ai->shape, os.size(), os);
    const auto sb = aligned_strides(bi->shape, os.size(), os);
    bcast_loop(os, sa, sb, [&](int64_t oi, int64_t ao, int64_t bo) {
      od[oi] = fwd(ad[ao], bd[bo]);
    });
  }

  Tape* tape = Tape::active();
  if (tape && (tracked(ai) || tracked(bi))) {
    Shape os2 = os;
    tape->record(out, [=]() {
      double* ga = Tape::grad_sink(ai);
      double* gb = Tape::grad_sink(bi);
      if (!ga && !gb) return;
      const double* go = Tape::node_adj(out.get());
      const double* av = ai->data.data();
      const double* bv = bi->data.data();
      const double* ov = out->data.data();
      if (same) {
        const int64_t n = out->numel();
        for (int64_t i = 0; i < n; ++i) {
          if (ga) ga[i] += da(go[i], av[i], bv[i], ov[i]);
          if (gb) gb[i] += db(go[i], av[i], bv[i], ov[i]);
        }
      } else {
        const auto sa = aligned_strides(ai->shape, os2.size(), os2);
        const auto sb = aligned_strides(bi->shape, os2.size(), os2);
        bcast_loop(os2, sa, sb, [&](int64_t oi, int64_t ao, int64_t bo) {
          if (ga) ga[ao] += da(go[oi], av[ao], bv[bo], ov[oi]);
          if (gb) gb[bo] += db(go[oi], av[ao], bv[bo], ov[oi]);
        });
      }
    });
  }
  return Tensor(out);
}

// Elementwise unary op. d(out_adj, x, y) is the input partial.
template <class Fwd, class D>
Tensor unary_op(const Tensor& a, Fwd fwd, D d) {
  auto out = fresh(a.shape());
  const auto ai = a.impl();
  const double* ad = ai->data.data();
  double* od = out->data.data();
  const int64_t n = out->numel();
  for (int64_t i = 0; i < n; ++i) od[i] = fwd(ad[i]);

  Tape* tape = Tape::active();
  if (tape && tracked(ai)) {
    tape->record(out, [=]() {
      double* ga = Tape::grad_sink(ai);
      if (!ga) return;
      const double* go = Tape::node_adj(out.get());
      const double* av = ai->data.data();
      const double* ov = out->data.data();
      const int64_t m = out->numel();
      for (int64_t i = 0; i < m; ++i) ga[i] += d(go[i], av[i], ov[i]);
    });
  }
  return Tensor(out);
}

void reject_element(const Tensor& a, const char* op, const char* what,
                    bool (*bad)(double)) {
  const double* d = a.data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) {
    if (bad(d[i])) {
      std::ostringstream os;
      os << op << ": " << what << " at flat index " << i << " (value " << d[i]
         << ")";
      throw std::invalid_argument(os.str());
    }
  }
}

std::vector<int> normalize_axes(std::vector<int> axes, int ndim,
                                const char* op) {
  if (axes.empty()) {
    axes.resize(static_cast<size_t>(ndim));
    for (int i = 0; i < ndim; ++i) axes[static_cast<size_t>(i)] = i;
    return axes;
  }
  for (auto& ax : axes) {
    if (ax < 0) ax += ndim;
    check(ax >= 0 && ax < ndim,
          std::string(op) + ": axis out of range for rank " +
              std::to_string(ndim));
  }
  std::sort(axes.begin(), axes.end());
  check(std::adjacent_find(axes.begin(), axes.end()) == axes.end(),
        std::string(op) + ": duplicate axis");
  return axes;
}

struct ReducePlan {
  Shape out_shape;               // respects keepdims
  std::vector<int64_t> ostride;  // per input axis: stride into out (0 if reduced)
  int64_t count = 1;             // elements folded into each out cell
};

ReducePlan reduce_plan(const Shape& in, const std::vector<int>& axes,
                       bool keepdims) {
  const int r = static_cast<int>(in.size());
  std::vector<bool> reduced(static_cast<size_t>(r), false);
  ReducePlan p;
  for (int ax : axes) {
    reduced[static_cast<size_t>(ax)] = true;
    p.count *= in[static_cast<size_t>(ax)];
  }
  Shape kept;  // out shape with reduced dims as 1 (strides computed on this)
  for (int i = 0; i < r; ++i)
    kept.push_back(reduced[static_cast<size_t>(i)] ? 1 : in[static_cast<size_t>(i)]);
  const auto kst = strides_of(kept);
  p.ostride.assign(static_cast<size_t>(r), 0);
  for (int i = 0; i < r; ++i)
    if (!reduced[static_cast<size_t>(i)]) p.ostride[static_cast<size_t>(i)] = kst[static_cast<size_t>(i)];
  if (keepdims) {
    p.out_shape = kept;
  } else {
    for (int i = 0; i < r; ++i)
      if (!reduced[static_cast<size_t>(i)]) p.out_shape.push_back(in[static_cast<size_t>(i)]);
  }
  return p;
}

}  // namespace

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* opname) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    const int64_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const int64_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da == db || da == 1 || db == 1) {
      out[i] = std::max(da, db);
    } else {
      throw std::invalid_argument(std::string(opname) +
                                  ": shapes not broadcastable: " +
                                  shape_str(a) + " vs " + shape_str(b));
    }
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double, double) { return g; },
      [](double g, double, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double, double) { return g; },
      [](double g, double, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y, double) { return g * y; },
      [](double g, double x, double, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  reject_element(b, "div", "zero denominator",
                 [](double v) { return v == 0.0; });
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double g, double, double y, double) { return g / y; },
      [](double g, double, double y, double o) { return -g * o / y; });
}

namespace {

// Scalar right-hand sides get dedicated nodes; no broadcast machinery needed.
template <class Fwd, class D>
Tensor scalar_op(const Tensor& a, Fwd fwd, D d) {
  return unary_op(a, fwd, d);
}

}  // namespace

Tensor add(const Tensor& a, double s) {
  return scalar_op(
      a, [s](double x) { return x + s; },
      [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, double s) { return add(a, -s); }

Tensor sub(double s, const Tensor& a) {
  return scalar_op(
      a, [s](double x) { return s - x; },
      [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, double s) {
  return scalar_op(
      a, [s](double x) { return x * s; },
      [s](double g, double, double) { return g * s; });
}

Tensor div(const Tensor& a, double s) {
  check(s != 0.0, "div: zero scalar denominator");
  return mul(a, 1.0 / s);
}

Tensor div(double s, const Tensor& a) {
  reject_element(a, "div", "zero denominator",
                 [](double v) { return v == 0.0; });
  return scalar_op(
      a, [s](double x) { return s / x; },
      [](double g, double x, double o) { return -g * o / x; });
}

Tensor neg(const Tensor& a) {
  return scalar_op(
      a, [](double x) { return -x; },
      [](double g, double, double) { return -g; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check(a.ndim() >= 2 && b.ndim() >= 2,
        "matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
            " and " + shape_str(b.shape()));
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const int64_t M = as[as.size() - 2];
  const int64_t K = as[as.size() - 1];
  const int64_t Kb = bs[bs.size() - 2];
  const int64_t N = bs[bs.size() - 1];
  check(K == Kb, "matmul: inner dims disagree: " + shape_str(as) + " x " +
                     shape_str(bs));
  const Shape abatch(as.begin(), as.end() - 2);
  const Shape bbatch(bs.begin(), bs.end() - 2);
  const Shape batch = broadcast_shapes(abatch, bbatch, "matmul");
  Shape os = batch;
  os.push_back(M);
  os.push_back(N);

  auto out = fresh(os);
  const auto ai = a.impl();
  const auto bi = b.impl();

  // Per-batch-axis element strides into a and b (0 on broadcast axes).
  std::vector<int64_t> sa(batch.size(), 0), sb(batch.size(), 0);
  {
    const auto full_sa = strides_of(as);
    const auto full_sb = strides_of(bs);
    const size_t aoff = batch.size() - abatch.size();
    const size_t boff = batch.size() - bbatch.size();
    for (size_t i = 0; i < abatch.size(); ++i)
      if (abatch[i] != 1 || batch[aoff + i] == 1) sa[aoff + i] = full_sa[i];
    for (size_t i = 0; i < bbatch.size(); ++i)
      if (bbatch[i] != 1 || batch[boff + i] == 1) sb[boff + i] = full_sb[i];
  }

  const int64_t panel_o = M * N;
  double* od = out->data.data();
  const double* ad = ai->data.data();
  const double* bd = bi->data.data();
  bcast_loop(batch, sa, sb, [&](int64_t oi, int64_t ao, int64_t bo) {
    CMapMat A(ad + ao, M, K);
    CMapMat B(bd + bo, K, N);
    MapMat C(od + oi * panel_o, M, N);
    C.noalias() = A * B;
  });

  Tape* tape = Tape::active();
  if (tape && (tracked(ai) || tracked(bi))) {
    const Shape batch_c = batch;
    const auto sa_c = sa;
    const auto sb_c = sb;
    tape->record(out, [=]() {
      double* ga = Tape::grad_sink(ai);
      double* gb = Tape::grad_sink(bi);
      if (!ga && !gb) return;
      const double* go = Tape::node_adj(out.get());
      const double* av = ai->data.data();
      const double* bv = bi->data.data();
      bcast_loop(batch_c, sa_c, sb_c, [&](int64_t oi, int64_t ao, int64_t bo) {
        CMapMat A(av + ao, M, K);
        CMapMat B(bv + bo, K, N);
        CMapMat GY(go + oi * panel_o, M, N);
        if (ga) {
          MapMat GA(ga + ao, M, K);
          GA.noalias() += GY * B.transpose();
        }
        if (gb) {
          MapMat GB(gb + bo, K, N);
          GB.noalias() += A.transpose() * GY;
        }
      });
    });
  }
  return Tensor(out);
}

Tensor transpose(const Tensor& a, const std::vector<int>& perm) {
  const int r = a.ndim();
  check(static_cast<int>(perm.size()) == r,
        "transpose: perm rank " + std::to_string(perm.size()) +
            " does not match tensor " + shape_str(a.shape()));
  std::vector<bool> seen(static_cast<size_t>(r), false);
  Shape os(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int p = perm[static_cast<size_t>(i)];
    check(p >= 0 && p < r && !seen[static_cast<size_t>(p)],
          "transpose: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
    os[static_cast<size_t>(i)] = a.shape()[static_cast<size_t>(p)];
  }
  auto out = fresh(os);
  const auto ai = a.impl();
  const auto in_st = strides_of(ai->shape);
  std::vector<int64_t> sa(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i)
    sa[static_cast<size_t>(i)] = in_st[static_cast<size_t>(perm[static_cast<size_t>(i)])];

  const double* ad = ai->data.data();
  double* od = out->data.data();
  map_loop(os, sa, [&](int64_t oi, int64_t ao) { od[oi] = ad[ao]; });

  Tape* tape = Tape::active();
  if (tape && tracked(ai)) {
    const Shape os_c = os;
    const auto sa_c = sa;
    tape->record(out, [=]() {
      double* ga = Tape::grad_sink(ai);
      if (!ga) return;
      const double* go = Tape::node_adj(out.get());
      map_loop(os_c, sa_c, [&](int64_t oi, int64_t ao) { ga[ao] += go[oi]; });
    });
  }
  return Tensor(out);
}

Tensor reshape(const Tensor& a, Shape new_shape) {
  int64_t known = 1;
  int infer = -1;
  for (size_t i = 0; i < new_shape.size(); ++i) {
    if (new_shape[i] == -1) {
      check(infer < 0, "reshape: more than one -1 in " + shape_str(new_shape));
      infer = static_cast<int>(i);
    } else {
      check(new_shape[i] >= 0, "reshape: bad dim in " + shape_str(new_shape));
      known *= new_shape[i];
    }
  }
  if (infer >= 0) {
    check(known > 0 && a.numel() % known == 0,
          "reshape: cannot infer -1 mapping " + shape_str(a.shape()) +
              " to " + shape_str(new_shape));
    new_shape[static_cast<size_t>(infer)] = a.numel() / known;
    known *= new_shape[static_cast<size_t>(infer)];
  }
  check(known == a.numel(), "reshape: element count mismatch: " +
                                shape_str(a.shape()) + " to " +
                                shape_str(new_shape));
  auto out = fresh(new_shape);
  const auto ai = a.impl();
  out->data = ai->data;

  Tape* tape = Tape::active();
  if (tape && tracked(ai)) {
    tape->record(out, [=]() {
      double* ga = Tape::grad_sink(ai);
      if (!ga) return;
      const double* go = Tape::node_adj(out.get());
      const int64_t n = out->numel();
      for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
    });
  }
  return Tensor(out);
}

Tensor broadcast_to(const Tensor& a, const Shape& target) {
  const Shape got = broadcast_shapes(a.shape(), target, "broadcast_to");
  check(got == target, "broadcast_to: cannot broadcast " +
                           shape_str(a.shape()) + " to " + shape_str(target));
  auto out = fresh(target);
  const auto ai = a.impl();
  const auto sa = aligned_strides(ai->shape, target.size(), target);
  const double* ad = ai->data.data();
  double* od = out->data.data();
  map_loop(target, sa, [&](int64_t oi, int64_t ao) { od[oi] = ad[ao]; });

  Tape* tape = Tape::active();
  if (tape && tracked(ai)) {
    const Shape t_c = target;
    const auto sa_c = sa;
    tape->record(out, [=]() {
      double* ga = Tape::grad_sink(ai);
      if (!ga) return;
      const double* go = Tape::node_adj(out.get());
      map_loop(t_c, sa_c, [&](int64_t oi, int64_t ao) { ga[ao] += go[oi]; });
    });
  }
  return Tensor(out);
}

namespace {

int normalize_axis(int axis, int ndim, const char* op) {
  if (axis < 0) axis += ndim;
  check(axis >= 0 && axis < ndim,
        std::string(op) + ": axis out of range for rank " +
            std::to_string(ndim));
  return axis;
}

}  // namespace

Tensor slice(const Tensor& a, int axis, int64_t start, int64_t len) {
  const int ax = normalize_axis(axis, a.ndim(), "slice");
  const auto& as = a.shape();
  check(start >= 0 && len >= 0 && start + len <= as[static_cast<size_t>(ax)],
        "slice: range [" + std::to_string(start) + ", " +
            std::to_string(start + len) + ") out of bounds for " +
            shape_str(as));
  Shape os = as;
  os[static_cast<size_t>(ax)] = len;
  auto out = fresh(os);
  const auto ai = a.impl();

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= as[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(ax) + 1; i < as.size(); ++i) inner *= as[i];
  const int64_t in_ax = as[static_cast<size_t>(ax)];

  const double* ad = ai->data.data();
  double* od = out->data.data();
  for (int64_t o = 0; o < outer; ++o) {
    const double* src = ad + (o * in_ax + start) * inner;
    std::memcpy(od + o * len * inner, src,
                static_cast<size_t>(len * inner) * sizeof(double));
  }

  Tape* tape = Tape::active();
  if (tape && tracked(ai)) {
    tape->record(out, [=]() {
      double* ga = Tape::grad_sink(ai);
      if (!ga) return;
      const double* go = Tape::node_adj(out.get());
      for (int64_t o = 0; o < outer; ++o) {
        double* dst = ga + (o * in_ax + start) * inner;
        const double* src = go + o * len * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return Tensor(out);
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  check(!parts.empty(), "concat: no inputs");
  const int ax = normalize_axis(axis, parts[0].ndim(), "concat");
  Shape os = parts[0].shape();
  int64_t total = 0;
  for (const auto& p : parts) {
    check(p.ndim() == parts[0].ndim(),
          "concat: rank mismatch: " + shape_str(parts[0].shape()) + " vs " +
              shape_str(p.shape()));
    for (int i = 0; i < p.ndim(); ++i) {
      if (i == ax) continue;
      check(p.shape()[static_cast<size_t>(i)] == os[static_cast<size_t>(i)],
            "concat: shape mismatch off axis: " + shape_str(parts[0].shape()) +
                " vs " + shape_str(p.shape()));
    }
    total += p.shape()[static_cast<size_t>(ax)];
  }
  os[static_cast<size_t>(ax)] = total;
  auto out = fresh(os);

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= os[static_cast<size_t>(i)];
  for (size_t i = static_cast<size_t>(ax) + 1; i < os.size(); ++i) inner *= os[i];

  double* od = out->data.data();
  int64_t off = 0;
  std::vector<std::shared_ptr<TensorImpl>> impls;
  std::vector<int64_t> offs;
  bool any_tracked = false;
  for (const auto& p : parts) {
    const int64_t paxis = p.shape()[static_cast<size_t>(ax)];
    const double* pd = p.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(od + (o * total + off) * inner, pd + o * paxis * inner,
                  static_cast<size_t>(paxis * inner) * sizeof(double));
    }
    impls.push_back(p.impl());
    offs.push_back(off);
    any_tracked = any_tracked || tracked(p.impl());
    off += paxis;
  }

  Tape* tape = Tape::active();
  if (tape && any_tracked) {
    tape->record(out, [=]() {
      const double* go = Tape::node_adj(out.get());
      for (size_t k = 0; k < impls.size(); ++k) {
        double* ga = Tape::grad_sink(impls[k]);
        if (!ga) continue;
        const int64_t paxis = impls[k]->shape[static_cast<size_t>(ax)];
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = go + (o * total + offs[k]) * inner;
          double* dst = ga + o * paxis * inner;
          for (int64_t i = 0; i < paxis * inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return Tensor(out);
}

std::vector<Tensor> split(const Tensor& a, int axis,
                          const std::vector<int64_t>& sizes) {
  const int ax = normalize_axis(axis, a.ndim(), "split");
  int64_t total = 0;
  for (int64_t s : sizes) {
    check(s >= 0, "split: negative size");
    total += s;
  }
  check(total == a.shape()[static_cast<size_t>(ax)],
        "split: sizes sum to " + std::to_string(total) + " but axis has " +
            std::to_string(a.shape()[static_cast<size_t>(ax)]) + " in " +
            shape_str(a.shape()));
  std::vector<Tensor> out;
  int64_t start = 0;
  for (int64_t s : sizes) {
    out.push_back(slice(a, ax, start, s));
    start += s;
  }
  return out;
}

Tensor exp(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::exp(x); },
      [](double g, double, double y) { return g * y; });
}

Tensor log(const Tensor& a) {
  reject_element(a, "log", "non-positive input",
                 [](double v) { return !(v > 0.0); });
  return unary_op(
      a, [](double x) { return std::log(x); },
      [](double g, double x, double) { return g / x; });
}

Tensor sqrt(const Tensor& a) {
  reject_element(a, "sqrt", "negative input",
                 [](double v) { return v < 0.0; });
  return unary_op(
      a, [](double x) { return std::sqrt(x); },
      [](double g, double, double y) { return 0.5 * g / y; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::abs(x); },
      [](double g, double x, double) {
        return x > 0.0 ? g : (x < 0.0 ? -g : 0.0);
      });
}

Tensor tanh(const Tensor& a) {
  return unary_op(
      a, [](double x) { return std::tanh(x); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}

Tensor relu(const Tensor& a) {
  return unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double g, double x, double) { return x > 0.0 ? g : 0.0; });
}

Tensor gelu(const Tensor& a) {
  return unary_op(
      a,
      [](double x) {
        const double u = kGeluC * (x + kGeluA * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(u));
      },
      [](double g, double x, double) {
        const double u = kGeluC * (x + kGeluA * x * x * x);
        const double t = std::tanh(u);
        const double du = kGeluC * (1.0 + 3.0 * kGeluA * x * x);
        return g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
      });
}

Tensor sum(const Tensor& a) { return sum(a, {}, false); }

Tensor sum(const Tensor& a, std::vector<int> axes, bool keepdims) {
  const auto ax = normalize_axes(std::move(axes), a.ndim(), "sum");
  const auto plan = reduce_plan(a.shape(), ax, keepdims);
  auto out = fresh(plan.out_shape);
  const auto ai = a.impl();
  const double* ad = ai->data.data();
  double* od = out->data.data();
  map_loop(ai->shape, plan.ostride,
           [&](int64_t ii, int64_t oo) { od[oo] += ad[ii]; });

  Tape* tape = Tape::active();
  if (tape && tracked(ai)) {
    const auto in_shape = ai->shape;
    const auto ostride = plan.ostride;
    tape->record(out, [=]() {
      double* ga = Tape::grad_sink(ai);
      if (!ga) return;
      const double* go = Tape::node_adj(out.get());
      map_loop(in_shape, ostride,
               [&](int64_t ii, int64_t oo) { ga[ii] += go[oo]; });
    });
  }
  return Tensor(out);
}

Tensor mean(const Tensor& a, std::vector<int> axes, bool keepdims) {
  const auto ax = normalize_axes(std::move(axes), a.ndim(), "mean");
  const auto plan = reduce_plan(a.shape(), ax, keepdims);
  check(plan.count > 0, "mean: empty reduction over " + shape_str(a.shape()));
  const double inv = 1.0 / static_cast<double>(plan.count);
  auto out = fresh(plan.out_shape);
  const auto ai = a.impl();
  const double* ad = ai->data.data();
  double* od = out->data.data();
  map_loop(ai->shape, plan.ostride,
           [&](int64_t ii, int64_t oo) { od[oo] += ad[ii]; });
  for (auto& v : out->data) v *= inv;

  Tape* tape = Tape::active();
  if (tape && tracked(ai)) {
    const auto in_shape = ai->shape;
    const auto ostride = plan.ostride;
    tape->record(out, [=]() {
      double* ga = Tape::grad_sink(ai);
      if (!ga) return;
      const double* go = Tape::node_adj(out.get());
      map_loop(in_shape, ostride,
               [&](int64_t ii, int64_t oo) { ga[ii] += go[oo] * inv; });
    });
  }
  return Tensor(out);
}

Tensor max(const Tensor& a, std::vector<int> axes, bool keepdims) {
  const auto ax = normalize_axes(std::move(axes), a.ndim(), "max");
  const auto plan = reduce_plan(a.shape(), ax, keepdims);
  check(plan.count > 0, "max: empty reduction over " + shape_str(a.shape()));
  auto out = fresh(plan.out_shape);
  std::fill(out->data.begin(), out->data.end(),
            -std::numeric_limits<double>::infinity());
  auto argmax = std::make_shared<std::vector<int64_t>>(out->data.size(), -1);
  const auto ai = a.impl();
  const double* ad = ai->data.data();
  double* od = out->data.data();
  map_loop(ai->shape, plan.ostride, [&](int64_t ii, int64_t oo) {
    if (ad[ii] > od[oo] || (*argmax)[static_cast<size_t>(oo)] < 0) {
      od[oo] = ad[ii];
      (*argmax)[static_cast<size_t>(oo)] = ii;
    }
  });

  Tape* tape = Tape::active();
  if (tape && tracked(ai)) {
    tape->record(out, [=]() {
      double* ga = Tape::grad_sink(ai);
      if (!ga) return;
      const double* go = Tape::node_adj(out.get());
      for (size_t o = 0; o < argmax->size(); ++o)
        ga[(*argmax)[o]] += go[static_cast<int64_t>(o)];
    });
  }
  return Tensor(out);
}

}  // namespace rcc
