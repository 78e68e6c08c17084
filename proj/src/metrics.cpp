#include <json.hpp>

#include <cmath>
#include <cstdio>

#include "rcc/metrics.hpp"
#include "rcc/tensor.hpp"

namespace rcc {

int density_level(double gt_count) {
  if (gt_count <= 0.0) return 0;
  if (gt_count <= 100.0) return 1;
  if (gt_count <= 500.0) return 2;
  if (gt_count <= 5000.0) return 3;
  return 4;
}

MetricSummary summarize(const std::vector<CountRecord>& records) {
  check(!records.empty(), "metrics: no records to summarize");
  MetricSummary s;
  s.images = static_cast<int64_t>(records.size());
  double abs_sum = 0.0, sq_sum = 0.0, rel_sum = 0.0;
  std::array<double, 5> level_abs{};
  for (const CountRecord& r : records) {
    check(std::isfinite(r.pred) && std::isfinite(r.gt) && r.gt >= 0.0,
          "metrics: record '" + r.id + "' has pred " + std::to_string(r.pred) +
              ", gt " + std::to_string(r.gt));
    const double err = std::abs(r.pred - r.gt);
    abs_sum += err;
    sq_sum += err * err;
    if (r.gt > 0.0) {
      rel_sum += err / r.gt;
      s.nae_images += 1;
    }
    const int level = density_level(r.gt);
    s.level_images[level] += 1;
    level_abs[level] += err;
  }
  check(s.nae_images > 0,
        "metrics: every image is empty; relative error is undefined");
  const double n = static_cast<double>(s.images);
  s.mae = abs_sum / n;
  s.mse = std::sqrt(sq_sum / n);
  s.nae = rel_sum / static_cast<double>(s.nae_images);
  for (int k = 0; k < 5; ++k)
    if (s.level_images[k] > 0)
      s.level_mae[k] = level_abs[k] / static_cast<double>(s.level_images[k]);
  return s;
}

std::string render_text(const MetricSummary& s) {
  char buf[128];
  std::string out;
  std::snprintf(buf, sizeof buf, "images  %lld\n",
                static_cast<long long>(s.images));
  out += buf;
  std::snprintf(buf, sizeof buf, "mae     %.4f\n", s.mae);
  out += buf;
  std::snprintf(buf, sizeof buf, "mse     %.4f\n", s.mse);
  out += buf;
  std::snprintf(buf, sizeof buf, "nae     %.4f  (over %lld non-empty)\n",
                s.nae, static_cast<long long>(s.nae_images));
  out += buf;
  for (int k = 0; k < 5; ++k) {
    if (s.level_images[k] > 0) {
      std::snprintf(buf, sizeof buf, "level S%d  n=%-4lld mae=%.4f\n", k,
                    static_cast<long long>(s.level_images[k]),
                    s.level_mae[k]);
    } else {
      std::snprintf(buf, sizeof buf, "level S%d  n=0    mae=-\n", k);
    }
    out += buf;
  }
  return out;
}

std::string render_jsonl(const std::vector<CountRecord>& records) {
  std::string out;
  for (const CountRecord& r : records) {
    nlohmann::json j;
    j["id"] = r.id;
    j["pred"] = r.pred;
    j["gt"] = r.gt;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace rcc
