#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <utility>

#include "rcc/losses.hpp"

namespace rcc {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;

bool tracked(const std::shared_ptr<TensorImpl>& t) {
  return t->is_node_output || t->requires_grad;
}

// Squared distances between cell centers of an H x W grid, in cell units,
// cached per shape.
std::shared_ptr<const std::vector<double>> cost_for_shape(int64_t H,
                                                          int64_t W) {
  static std::mutex mu;
  static std::map<std::pair<int64_t, int64_t>,
                  std::shared_ptr<const std::vector<double>>>
      cache;
  std::lock_guard<std::mutex> lock(mu);
  auto& entry = cache[{H, W}];
  if (!entry) {
    const int64_t n = H * W;
    auto c = std::make_shared<std::vector<double>>(
        static_cast<size_t>(n * n));
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < n; ++j) {
        const double dy = static_cast<double>(i / W - j / W);
        const double dx = static_cast<double>(i % W - j % W);
        (*c)[static_cast<size_t>(i * n + j)] = dy * dy + dx * dx;
      }
    entry = std::move(c);
  }
  return entry;
}

struct Side {
  std::vector<int64_t> idx;  // flat cell indices with positive mass
  VectorXd mass;             // the positive masses
  VectorXd log_mass;
};

Side support_of(const Tensor& t, const char* which) {
  Side s;
  double total = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double v = t.data()[i];
    check(std::isfinite(v) && v >= 0.0,
          std::string("sinkhorn: ") + which + " has a negative or non-finite "
              "entry at flat index " + std::to_string(i) + " (value " +
              std::to_string(v) + ")");
    total += v;
    if (v > 0.0) s.idx.push_back(i);
  }
  check(std::abs(total - 1.0) < 1e-6,
        std::string("sinkhorn: ") + which + " must be a probability measure, "
            "sums to " + std::to_string(total));
  s.mass.resize(static_cast<Eigen::Index>(s.idx.size()));
  s.log_mass.resize(static_cast<Eigen::Index>(s.idx.size()));
  for (size_t k = 0; k < s.idx.size(); ++k) {
    s.mass[static_cast<Eigen::Index>(k)] = t.data()[s.idx[k]];
    s.log_mass[static_cast<Eigen::Index>(k)] =
        std::log(t.data()[s.idx[k]]);
  }
  return s;
}

// State of one solved problem: supports, gathered cost, and the full
// potential history needed to unroll gradients.
struct Solved {
  Side a, b;
  MatrixXd cost;               // [n, m] over the supports
  std::vector<VectorXd> f;     // f[t], t = 1..T (index 0 unused)
  std::vector<VectorXd> g;     // g[t], t = 0..T; g[0] = 0
  double reg = 1.0;
  int iters = 0;
  double value = 0.0;
};

// exp((f_i + g_j - C_ij) / reg) with an overflow clamp. The clamp only
// engages for near-zero masses whose true contribution is negligible.
MatrixXd kernel_matrix(const Solved& s, const VectorXd& f, const VectorXd& g) {
  MatrixXd e = -s.cost;
  e.colwise() += f;
  e.rowwise() += g.transpose();
  e /= s.reg;
  return e.array().min(700.0).exp().matrix();
}

Solved solve(const Tensor& at, const Tensor& bt, double reg, int iters) {
  check(at.ndim() == 2 && at.shape() == bt.shape(),
        "sinkhorn: marginals must share one 2-D grid, got " +
            shape_str(at.shape()) + " and " + shape_str(bt.shape()));
  check(reg > 0.0, "sinkhorn: reg must be positive");
  check(iters >= 1, "sinkhorn: iters must be >= 1");

  Solved s;
  s.a = support_of(at, "a");
  s.b = support_of(bt, "b");
  s.reg = reg;
  s.iters = iters;
  const auto n = static_cast<Eigen::Index>(s.a.idx.size());
  const auto m = static_cast<Eigen::Index>(s.b.idx.size());

  auto full = cost_for_shape(at.dim(0), at.dim(1));
  const int64_t N = at.numel();
  s.cost.resize(n, m);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      s.cost(i, j) = (*full)[static_cast<size_t>(
          s.a.idx[static_cast<size_t>(i)] * N +
          s.b.idx[static_cast<size_t>(j)])];

  s.f.assign(static_cast<size_t>(iters) + 1, VectorXd());
  s.g.assign(static_cast<size_t>(iters) + 1, VectorXd());
  s.g[0] = VectorXd::Zero(m);
  for (int t = 1; t <= iters; ++t) {
    // f_i = -reg * LSE_j((g_j - C_ij)/reg + log b_j)
    MatrixXd e = -s.cost;
    e.rowwise() += (s.g[static_cast<size_t>(t - 1)] +
                    reg * s.b.log_mass).transpose();
    e /= reg;
    VectorXd rmax = e.rowwise().maxCoeff();
    e.colwise() -= rmax;
    VectorXd sumexp = e.array().exp().matrix().rowwise().sum();
    s.f[static_cast<size_t>(t)] =
        -reg * (rmax + sumexp.array().log().matrix());

    // g_j = -reg * LSE_i((f_i - C_ij)/reg + log a_i)
    MatrixXd e2 = -s.cost;
    e2.colwise() += s.f[static_cast<size_t>(t)] + reg * s.a.log_mass;
    e2 /= reg;
    Eigen::RowVectorXd cmax = e2.colwise().maxCoeff();
    e2.rowwise() -= cmax;
    Eigen::RowVectorXd sumexp2 = e2.array().exp().matrix().colwise().sum();
    s.g[static_cast<size_t>(t)] =
        (-reg * (cmax + sumexp2.array().log().matrix())).transpose();
  }
  s.value = s.f[static_cast<size_t>(iters)].dot(s.a.mass) +
            s.g[static_cast<size_t>(iters)].dot(s.b.mass);
  return s;
}

// Unrolled reverse sweep. Returns gradients over the two supports.
void unroll_gradients(const Solved& s, VectorXd& grad_a, VectorXd& grad_b) {
  const int T = s.iters;
  const double eps = s.reg;
  grad_a = s.f[static_cast<size_t>(T)];
  grad_b = s.g[static_cast<size_t>(T)];

  // rho[t] pairs f[t] with g[t]; sigma[t] pairs f[t] with g[t-1].
  MatrixXd rho = kernel_matrix(s, s.f[static_cast<size_t>(T)],
                               s.g[static_cast<size_t>(T)]);
  VectorXd G = s.b.mass;
  VectorXd F = (s.a.mass.array() -
                s.a.mass.array() * (rho * G).array()).matrix();
  for (int t = T; t >= 1; --t) {
    grad_a -= eps * (rho * G);
    MatrixXd sig = kernel_matrix(s, s.f[static_cast<size_t>(t)],
                                 s.g[static_cast<size_t>(t - 1)]);
    VectorXd u = sig.transpose() * F;
    grad_b -= eps * u;
    if (t > 1) {
      G = (-s.b.mass.array() * u.array()).matrix();
      rho = kernel_matrix(s, s.f[static_cast<size_t>(t - 1)],
                          s.g[static_cast<size_t>(t - 1)]);
      F = (-s.a.mass.array() * (rho * G).array()).matrix();
    }
  }
}

}  // namespace

Tensor sinkhorn_value(const Tensor& a, const Tensor& b, double reg,
                      int iters) {
  auto solved = std::make_shared<Solved>(solve(a, b, reg, iters));
  Tensor out = Tensor::scalar(solved->value);

  Tape* tape = Tape::active();
  const auto ai = a.impl();
  const auto bi = b.impl();
  if (tape && (tracked(ai) || tracked(bi))) {
    auto oi = out.impl();
    tape->record(oi, [=]() {
      double* ga = Tape::grad_sink(ai);
      double* gb = Tape::grad_sink(bi);
      if (!ga && !gb) return;
      const double go = Tape::node_adj(oi.get())[0];
      VectorXd grad_a, grad_b;
      unroll_gradients(*solved, grad_a, grad_b);
      if (ga)
        for (size_t k = 0; k < solved->a.idx.size(); ++k)
          ga[solved->a.idx[k]] += go * grad_a[static_cast<Eigen::Index>(k)];
      if (gb)
        for (size_t k = 0; k < solved->b.idx.size(); ++k)
          gb[solved->b.idx[k]] += go * grad_b[static_cast<Eigen::Index>(k)];
    });
  }
  return out;
}

Tensor sinkhorn_plan(const Tensor& a, const Tensor& b, double reg,
                     int iters) {
  Solved s = solve(a, b, reg, iters);
  MatrixXd rho = kernel_matrix(s, s.f[static_cast<size_t>(iters)],
                               s.g[static_cast<size_t>(iters)]);
  const int64_t N = a.numel();
  Tensor plan = Tensor::zeros({N, N});
  for (size_t i = 0; i < s.a.idx.size(); ++i)
    for (size_t j = 0; j < s.b.idx.size(); ++j)
      plan.data()[s.a.idx[i] * N + s.b.idx[j]] =
          s.a.mass[static_cast<Eigen::Index>(i)] *
          rho(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) *
          s.b.mass[static_cast<Eigen::Index>(j)];
  return plan;
}

}  // namespace rcc
