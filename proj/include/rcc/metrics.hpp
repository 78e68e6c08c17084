#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace rcc {

// One evaluated image: predicted count against the annotated one.
// Predictions stay fractional; nothing is rounded.
struct CountRecord {
  std::string id;
  double pred = 0.0;
  double gt = 0.0;
};

// Density level by ground-truth count: S0 empty, S1 1-100, S2 101-500,
// S3 501-5000, S4 beyond.
int density_level(double gt_count);

struct MetricSummary {
  double mae = 0.0;
  double mse = 0.0;  // root of the mean squared count error
  // Mean |pred-gt|/gt over the images that contain people; empty scenes
  // carry no relative-error information and are excluded.
  double nae = 0.0;
  int64_t images = 0;
  int64_t nae_images = 0;
  std::array<int64_t, 5> level_images{};
  std::array<double, 5> level_mae{};  // 0 where a level has no images
};

// Rejects an empty record list, non-finite counts, negative ground truth,
// and lists where no image contains people (NAE would be undefined).
MetricSummary summarize(const std::vector<CountRecord>& records);

// Human-readable block, one metric per line plus a per-level breakdown.
std::string render_text(const MetricSummary& s);

// One compact JSON object per line: {"gt":..,"id":..,"pred":..}.
std::string render_jsonl(const std::vector<CountRecord>& records);

}  // namespace rcc
