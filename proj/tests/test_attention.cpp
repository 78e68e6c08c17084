#include <doctest.h>

#include <cmath>
#include <vector>

#include "rcc/attention.hpp"
#include "rcc/gradcheck.hpp"
#include "testutil.hpp"

using namespace rcc;
using testutil::max_abs_diff;

namespace {

// Dense reference: explicit per-head matrices, own softmax, no shared code
// with the production path.
Tensor mha_dense(const Tensor& xq, const Tensor& xkv, const Tensor& wq,
                 const Tensor& wk, const Tensor& wv, const Tensor& wp,
                 int64_t heads) {
  const int64_t B = xq.dim(0), Nq = xq.dim(1), C = xq.dim(2);
  const int64_t Nk = xkv.dim(1);
  const int64_t d = C / heads;
  auto proj = [&](const Tensor& t, const Tensor& w, int64_t N) {
    std::vector<double> r(static_cast<size_t>(B * N * C), 0.0);
    for (int64_t b = 0; b < B; ++b)
      for (int64_t n = 0; n < N; ++n)
        for (int64_t o = 0; o < C; ++o) {
          double acc = 0;
          for (int64_t i = 0; i < C; ++i)
            acc += t.at({b, n, i}) * w.at({i, o});
          r[static_cast<size_t>((b * N + n) * C + o)] = acc;
        }
    return r;
  };
  const auto Q = proj(xq, wq, Nq);
  const auto K = proj(xkv, wk, Nk);
  const auto V = proj(xkv, wv, Nk);
  std::vector<double> merged(static_cast<size_t>(B * Nq * C), 0.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t n = 0; n < Nq; ++n) {
        std::vector<double> row(static_cast<size_t>(Nk));
        double mx = -1e300;
        for (int64_t m = 0; m < Nk; ++m) {
          double s = 0;
          for (int64_t t = 0; t < d; ++t)
            s += Q[static_cast<size_t>((b * Nq + n) * C + h * d + t)] *
                 K[static_cast<size_t>((b * Nk + m) * C + h * d + t)];
          row[static_cast<size_t>(m)] = s * scale;
          mx = std::max(mx, row[static_cast<size_t>(m)]);
        }
        double z = 0;
        for (auto& v : row) {
          v = std::exp(v - mx);
          z += v;
        }
        for (auto& v : row) v /= z;
        for (int64_t t = 0; t < d; ++t) {
          double acc = 0;
          for (int64_t m = 0; m < Nk; ++m)
            acc += row[static_cast<size_t>(m)] *
                   V[static_cast<size_t>((b * Nk + m) * C + h * d + t)];
          merged[static_cast<size_t>((b * Nq + n) * C + h * d + t)] = acc;
        }
      }
  Tensor mt = Tensor::from_data({B, Nq, C}, merged);
  Tensor out = Tensor::zeros({B, Nq, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t n = 0; n < Nq; ++n)
      for (int64_t o = 0; o < C; ++o) {
        double acc = 0;
        for (int64_t i = 0; i < C; ++i)
          acc += mt.at({b, n, i}) * wp.at({i, o});
        out.data()[(b * Nq + n) * C + o] = acc;
      }
  return out;
}

}  // namespace

TEST_SUITE_BEGIN("attention");

TEST_CASE("token/spatial layout conversions round-trip exactly") {
  Rng rng(200);
  Tensor x = Tensor::randn({2, 12, 5}, rng);
  Tensor sp = tokens_to_spatial(x, 3, 4);
  CHECK(sp.shape() == Shape{2, 5, 3, 4});
  CHECK(sp.at({1, 2, 1, 3}) == x.at({1, 1 * 4 + 3, 2}));
  CHECK(max_abs_diff(spatial_to_tokens(sp), x) == 0.0);
  CHECK_THROWS(tokens_to_spatial(x, 3, 5));
}

TEST_CASE("global self-attention matches the dense reference") {
  Rng rng(201);
  DeaAttention a = DeaAttention::make(rng, 8, 2, AttentionMode::kGsa);
  Tensor x = Tensor::randn({2, 12, 8}, rng);
  Tensor got = a.forward(x, 3, 4);
  Tensor want = mha_dense(x, x, a.wq.w, a.wk.w, a.wv.w, a.wp.w, 2);
  CHECK(got.shape() == Shape{2, 12, 8});
  CHECK(max_abs_diff(got, want) < 1e-10);
}

TEST_CASE("single-head attention is the heads=1 special case") {
  Rng rng(202);
  DeaAttention a = DeaAttention::make(rng, 6, 1, AttentionMode::kGsa);
  Tensor x = Tensor::randn({1, 9, 6}, rng);
  Tensor want = mha_dense(x, x, a.wq.w, a.wk.w, a.wv.w, a.wp.w, 1);
  CHECK(max_abs_diff(a.forward(x, 3, 3), want) < 1e-10);
}

TEST_CASE("dea with alpha zeroed is bit-identical to plain gsa") {
  Rng rng(203);
  DeaAttention dea = DeaAttention::make(rng, 8, 2, AttentionMode::kDea);
  Rng rng2(999);
  DeaAttention gsa = DeaAttention::make(rng2, 8, 2, AttentionMode::kGsa);
  gsa.wq.w = dea.wq.w.detach();
  gsa.wk.w = dea.wk.w.detach();
  gsa.wv.w = dea.wv.w.detach();
  gsa.wp.w = dea.wp.w.detach();
  dea.alpha.data()[0] = 0.0;
  Tensor x = Tensor::randn({2, 16, 8}, rng);
  CHECK(max_abs_diff(dea.forward(x, 4, 4), gsa.forward(x, 4, 4)) == 0.0);
}

TEST_CASE("alpha starts at 0.6 and receives gradient") {
  Rng rng(204);
  DeaAttention dea = DeaAttention::make(rng, 8, 2, AttentionMode::kDea);
  CHECK(dea.alpha.item() == 0.6);
  Tensor x = Tensor::randn({1, 9, 8}, rng);
  Tape tape;
  Tensor y = dea.forward(x, 3, 3);
  tape.backward(sum(mul(y, y)));
  CHECK(dea.alpha.grad().item() != 0.0);
}

TEST_CASE("the local map is unnormalized and can dominate") {
  Rng rng(205);
  DeaAttention a = DeaAttention::make(rng, 4, 1, AttentionMode::kGsaLocalConv);
  Tensor x = Tensor::randn({1, 9, 4}, rng);
  Tensor base = a.forward(x, 3, 3);
  // A softmax-normalized map could never scale the branch 1000x via a bias.
  for (int64_t i = 0; i < a.local_out.b.numel(); ++i)
    a.local_out.b.data()[i] = 1000.0;
  Tensor boosted = a.forward(x, 3, 3);
  double base_mag = 0, boost_mag = 0;
  for (int64_t i = 0; i < base.numel(); ++i) {
    base_mag = std::max(base_mag, std::fabs(base.data()[i]));
    boost_mag = std::max(boost_mag, std::fabs(boosted.data()[i]));
  }
  // A softmax map is bounded by the value magnitudes; the raw map is not.
  CHECK(boost_mag > 50.0 * (base_mag + 1e-9));
}

TEST_CASE("outputs are batch-permutation equivariant") {
  Rng rng(206);
  DeaAttention a = DeaAttention::make(rng, 8, 2, AttentionMode::kDea);
  Tensor x = Tensor::randn({3, 16, 8}, rng);
  Tensor y = a.forward(x, 4, 4);
  // Swap batch entries 0 and 2.
  Tensor xp = Tensor::zeros({3, 16, 8});
  const int64_t stride = 16 * 8;
  std::copy(x.data() + 2 * stride, x.data() + 3 * stride, xp.data());
  std::copy(x.data() + stride, x.data() + 2 * stride, xp.data() + stride);
  std::copy(x.data(), x.data() + stride, xp.data() + 2 * stride);
  Tensor yp = a.forward(xp, 4, 4);
  for (int64_t i = 0; i < stride; ++i) {
    CHECK(yp.data()[i] == y.data()[2 * stride + i]);
    CHECK(yp.data()[2 * stride + i] == y.data()[i]);
  }
}

TEST_CASE("spatial reduction shrinks K/V but preserves query resolution") {
  Rng rng(207);
  DeaAttention a = DeaAttention::make(rng, 8, 2, AttentionMode::kGsa, 2);
  Tensor x = Tensor::randn({2, 16, 8}, rng);
  Tensor y = a.forward(x, 4, 4);
  CHECK(y.shape() == Shape{2, 16, 8});
  CHECK_THROWS(a.forward(Tensor::randn({2, 15, 8}, rng), 3, 5));
  auto f = [&a](const std::vector<Tensor>& p) {
    return sum(mul(a.forward(p[0], 4, 4), p[0]));
  };
  auto rep = grad_check(f, {x}, 1e-6, 1e-4);
  INFO("max rel err ", rep.max_rel_err);
  CHECK(rep.ok);
}

TEST_CASE("dea gradients agree with finite differences for every parameter") {
  Rng rng(208);
  DeaAttention a = DeaAttention::make(rng, 4, 2, AttentionMode::kDea);
  Tensor x = Tensor::randn({1, 9, 4}, rng);
  auto f = [&a, &x](const std::vector<Tensor>& p) {
    DeaAttention local = a;
    local.wq.w = p[0];
    local.wk.w = p[1];
    local.wv.w = p[2];
    local.wp.w = p[3];
    local.alpha = p[4];
    local.local_dw.w = p[5];
    local.local_out.b = p[6];
    Tensor y = local.forward(x, 3, 3);
    return sum(mul(y, y));
  };
  std::vector<Tensor> params = {
      a.wq.w.detach(),       a.wk.w.detach(),       a.wv.w.detach(),
      a.wp.w.detach(),       a.alpha.detach(),      a.local_dw.w.detach(),
      a.local_out.b.detach()};
  auto rep = grad_check(f, params, 1e-6, 1e-4);
  INFO("max rel err ", rep.max_rel_err);
  CHECK(rep.ok);

  auto fx = [&a](const std::vector<Tensor>& p) {
    Tensor y = a.forward(p[0], 3, 3);
    return sum(mul(y, y));
  };
  auto repx = grad_check(fx, {x}, 1e-6, 1e-4);
  INFO("max rel err ", repx.max_rel_err);
  CHECK(repx.ok);
}

TEST_CASE("cross-attention matches the dense reference") {
  Rng rng(209);
  CrossAttention c = CrossAttention::make(rng, 8, 4);
  Tensor q = Tensor::randn({2, 6, 8}, rng);
  Tensor kv = Tensor::randn({2, 10, 8}, rng);
  Tensor got = c.forward(q, kv);
  CHECK(got.shape() == Shape{2, 6, 8});
  Tensor want = mha_dense(q, kv, c.wq.w, c.wk.w, c.wv.w, c.wp.w, 4);
  CHECK(max_abs_diff(got, want) < 1e-10);
  CHECK_THROWS(c.forward(q, Tensor::randn({2, 10, 6}, rng)));
  CHECK_THROWS(c.forward(q, Tensor::randn({1, 10, 8}, rng)));
}

TEST_CASE("cross-attention gradients agree with finite differences") {
  Rng rng(210);
  CrossAttention c = CrossAttention::make(rng, 4, 2);
  Tensor q = Tensor::randn({1, 5, 4}, rng);
  Tensor kv = Tensor::randn({1, 7, 4}, rng);
  auto f = [&c](const std::vector<Tensor>& p) {
    Tensor y = c.forward(p[0], p[1]);
    return sum(mul(y, y));
  };
  auto rep = grad_check(f, {q, kv}, 1e-6, 1e-4);
  INFO("max rel err ", rep.max_rel_err);
  CHECK(rep.ok);
}

TEST_CASE("transformer block reduces to identity when branches are zeroed") {
  Rng rng(211);
  Deab blk = Deab::make(rng, 8, 2, AttentionMode::kDea);
  for (int64_t i = 0; i < blk.attn.wp.w.numel(); ++i)
    blk.attn.wp.w.data()[i] = 0.0;
  for (int64_t i = 0; i < blk.ffn_out.w.numel(); ++i)
    blk.ffn_out.w.data()[i] = 0.0;
  for (int64_t i = 0; i < blk.ffn_out.b.numel(); ++i)
    blk.ffn_out.b.data()[i] = 0.0;
  Tensor x = Tensor::randn({2, 16, 8}, rng);
  CHECK(max_abs_diff(blk.forward(x, 4, 4), x) == 0.0);
}

TEST_CASE("transformer block gradients agree with finite differences") {
  Rng rng(212);
  Deab blk = Deab::make(rng, 4, 2, AttentionMode::kDea, 1, 2);
  Tensor x = Tensor::randn({1, 9, 4}, rng);
  auto f = [&blk](const std::vector<Tensor>& p) {
    Tensor y = blk.forward(p[0], 3, 3);
    return sum(mul(y, y));
  };
  auto rep = grad_check(f, {x}, 1e-6, 1e-4);
  INFO("max rel err ", rep.max_rel_err);
  CHECK(rep.ok);
}

TEST_CASE("parameter registry names every mode-dependent tensor") {
  Rng rng(213);
  ParamList dea_params, gsa_params;
  DeaAttention::make(rng, 8, 2, AttentionMode::kDea).collect("a", dea_params);
  DeaAttention::make(rng, 8, 2, AttentionMode::kGsa).collect("a", gsa_params);
  auto has = [](const ParamList& l, const std::string& n) {
    for (const auto& p : l)
      if (p.name == n) return true;
    return false;
  };
  CHECK(has(dea_params, "a.alpha"));
  CHECK(has(dea_params, "a.local_dw.weight"));
  CHECK_FALSE(has(gsa_params, "a.alpha"));
  CHECK_FALSE(has(gsa_params, "a.local_dw.weight"));
  CHECK(has(gsa_params, "a.wq.weight"));
}

TEST_SUITE_END();
