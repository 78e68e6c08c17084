#include "rcc/gradcheck.hpp"

#include <cmath>
#include <sstream>

namespace rcc {

namespace {

[[noreturn]] void reject(const char* what, size_t param, int64_t elem,
                         double value) {
  std::ostringstream os;
  os << "grad_check: non-finite " << what << " at param " << param
     << " element " << elem << " (value " << value << ")";
  throw std::invalid_argument(os.str());
}

}  // namespace

GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> params, const GradCheckOpts& opts) {
  check(opts.step > 0.0, "grad_check: step must be positive");

  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }

  std::vector<std::vector<double>> analytic;
  {
    Tape tape;
    Tensor y = f(params);
    check(y.numel() == 1, "grad_check: f must return a scalar, got " +
                              shape_str(y.shape()));
    if (!std::isfinite(y.item())) reject("objective", 0, -1, y.item());
    tape.backward(y);
  }
  analytic.reserve(params.size());
  for (auto& p : params) {
    const Tensor g = p.grad();
    analytic.emplace_back(g.data(), g.data() + g.numel());
  }

  // Enumerate (param, element) pairs, optionally subsampled.
  std::vector<std::pair<size_t, int64_t>> sites;
  for (size_t pi = 0; pi < params.size(); ++pi)
    for (int64_t e = 0; e < params[pi].numel(); ++e) sites.push_back({pi, e});
  if (opts.max_samples >= 0 &&
      opts.max_samples < static_cast<int64_t>(sites.size())) {
    Rng rng(opts.sample_seed);
    for (int64_t i = 0; i < opts.max_samples; ++i) {
      const int64_t j =
          rng.uniform_int(i, static_cast<int64_t>(sites.size()) - 1);
      std::swap(sites[static_cast<size_t>(i)], sites[static_cast<size_t>(j)]);
    }
    sites.resize(static_cast<size_t>(opts.max_samples));
  }

  GradCheckReport rep;
  rep.ok = true;
  for (const auto& [pi, e] : sites) {
    double* d = params[pi].data();
    const double saved = d[e];
    d[e] = saved + opts.step;
    const double fp = f(params).item();
    d[e] = saved - opts.step;
    const double fm = f(params).item();
    d[e] = saved;
    if (!std::isfinite(fp)) reject("objective at +step", pi, e, fp);
    if (!std::isfinite(fm)) reject("objective at -step", pi, e, fm);
    const double num = (fp - fm) / (2.0 * opts.step);
    const double ana = analytic[pi][static_cast<size_t>(e)];
    if (!std::isfinite(ana)) reject("analytic gradient", pi, e, ana);
    const double rel =
        std::fabs(ana - num) /
        std::max({std::fabs(ana), std::fabs(num), opts.denom_floor});
    ++rep.checked;
    if (rel > rep.max_rel_err) {
      rep.max_rel_err = rel;
      rep.worst_param = pi;
      rep.worst_elem = e;
      rep.analytic = ana;
      rep.numeric = num;
    }
  }
  rep.ok = rep.max_rel_err <= opts.tol;
  return rep;
}

GradCheckReport grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> params, double step, double tol) {
  GradCheckOpts o;
  o.step = step;
  o.tol = tol;
  return grad_check(f, std::move(params), o);
}

}  // namespace rcc
