#include "rcc/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rcc/png_io.hpp"

namespace fs = std::filesystem;

namespace rcc {

namespace {

void check_spec(const SceneSpec& spec) {
  check(spec.height > 0 && spec.width > 0,
        "synth: scene size must be positive, got " +
            std::to_string(spec.height) + "x" + std::to_string(spec.width));
  check(spec.people >= 0, "synth: people must be >= 0");
  check(spec.distractors >= 0, "synth: distractors must be >= 0");
  check(spec.min_separation >= 0.0, "synth: min_separation must be >= 0");
}

// Snaps a coordinate to the 1/64-pixel lattice. Every lattice point has at
// most six decimal digits after the point, so writing it with %.6f and
// parsing it back is lossless.
double snap64(double v) { return std::round(v * 64.0) / 64.0; }

// Adds an axis-aligned Gaussian splat to a [3, H, W] buffer. `gain[c]` is
// the peak amplitude per channel; negative gains darken.
void splat(std::vector<double>& buf, int64_t h, int64_t w, double cx,
           double cy, double sigma_x, double sigma_y, const double gain[3]) {
  const int64_t x_lo = std::max<int64_t>(0, (int64_t)std::floor(cx - 3 * sigma_x));
  const int64_t x_hi = std::min(w - 1, (int64_t)std::ceil(cx + 3 * sigma_x));
  const int64_t y_lo = std::max<int64_t>(0, (int64_t)std::floor(cy - 3 * sigma_y));
  const int64_t y_hi = std::min(h - 1, (int64_t)std::ceil(cy + 3 * sigma_y));
  for (int64_t y = y_lo; y <= y_hi; ++y) {
    const double dy = (y + 0.5 - cy) / sigma_y;
    for (int64_t x = x_lo; x <= x_hi; ++x) {
      const double dx = (x + 0.5 - cx) / sigma_x;
      const double fall = std::exp(-0.5 * (dx * dx + dy * dy));
      for (int64_t c = 0; c < 3; ++c) {
        buf[(c * h + y) * w + x] += gain[c] * fall;
      }
    }
  }
}

std::string annotation_path(const std::string& root, const std::string& id) {
  return root + "/annotations/" + id + ".txt";
}

std::string image_path(const std::string& root, const std::string& id) {
  return root + "/images/" + id + ".png";
}

}  // namespace

double head_radius(const SceneSpec& spec, double y) {
  // 1.5 px at the top row growing to 4 px at the bottom.
  return 1.5 + 2.5 * (y / static_cast<double>(spec.height));
}

Sample synth_scene(const SceneSpec& spec) {
  check_spec(spec);
  const int64_t h = spec.height;
  const int64_t w = spec.width;

  Rng root(spec.seed);
  Rng bg_rng = root.derive("background");
  Rng head_rng = root.derive("heads");
  Rng junk_rng = root.derive("distractors");

  // --- Background: per-channel base tone, a vertical gradient, two sine
  // washes at scene-specific frequencies, plus light pixel noise.
  double base[3], grad[3], amp[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = bg_rng.uniform(0.35, 0.6);
    grad[c] = bg_rng.uniform(0.05, 0.2);
    amp[c] = bg_rng.uniform(0.02, 0.07);
  }
  const double fx = bg_rng.uniform(1.0, 4.0);
  const double fy = bg_rng.uniform(1.0, 4.0);
  const double phase_x = bg_rng.uniform(0.0, 6.283185307179586);
  const double phase_y = bg_rng.uniform(0.0, 6.283185307179586);

  std::vector<double> buf(static_cast<size_t>(3) * h * w);
  for (int64_t y = 0; y < h; ++y) {
    const double v = static_cast<double>(y) / h;
    const double sy = std::sin(6.283185307179586 * fy * v + phase_y);
    for (int64_t x = 0; x < w; ++x) {
      const double u = static_cast<double>(x) / w;
      const double sx = std::sin(6.283185307179586 * fx * u + phase_x);
      const double wave = sx * sy;
      const double noise = bg_rng.uniform(-0.02, 0.02);
      for (int64_t c = 0; c < 3; ++c) {
        buf[(c * h + y) * w + x] = base[c] + grad[c] * v + amp[c] * wave + noise;
      }
    }
  }

  // --- Heads: rejection packing with a global attempt budget.
  std::vector<Dot> dots;
  dots.reserve(spec.people);
  const int64_t budget = 1000 + 200 * spec.people;
  int64_t attempts = 0;
  while (static_cast<int64_t>(dots.size()) < spec.people) {
    check(attempts < budget,
          "synth: placed " + std::to_string(dots.size()) + " of " +
              std::to_string(spec.people) +
              " people; min separation too tight for a " + std::to_string(h) +
              "x" + std::to_string(w) + " scene");
    ++attempts;
    Dot d;
    d.x = snap64(head_rng.uniform(1.0, w - 1.0));
    d.y = snap64(head_rng.uniform(1.0, h - 1.0));
    bool ok = true;
    for (const Dot& prev : dots) {
      const double ddx = d.x - prev.x;
      const double ddy = d.y - prev.y;
      if (ddx * ddx + ddy * ddy < spec.min_separation * spec.min_separation) {
        ok = false;
        break;
      }
    }
    if (ok) dots.push_back(d);
  }
  // Draw order must not depend on how many rejections happened, so the gains
  // are drawn only for accepted heads, after placement.
  for (const Dot& d : dots) {
    const double sigma = head_radius(spec, d.y) / 2.0;
    const double dark = -head_rng.uniform(0.25, 0.5);
    double gain[3];
    for (int c = 0; c < 3; ++c) {
      gain[c] = dark + head_rng.uniform(-0.04, 0.04);
    }
    splat(buf, h, w, d.x, d.y, sigma, sigma, gain);
  }

  // --- Distractors: brighter, wider-than-tall, never annotated.
  for (int64_t i = 0; i < spec.distractors; ++i) {
    const double cx = junk_rng.uniform(0.0, static_cast<double>(w));
    const double cy = junk_rng.uniform(0.0, static_cast<double>(h));
    const double sigma_y = junk_rng.uniform(1.0, 3.0);
    const double sigma_x = sigma_y * junk_rng.uniform(1.5, 3.0);
    const double bright = junk_rng.uniform(0.15, 0.35);
    double gain[3];
    for (int c = 0; c < 3; ++c) {
      gain[c] = bright + junk_rng.uniform(-0.05, 0.05);
    }
    splat(buf, h, w, cx, cy, sigma_x, sigma_y, gain);
  }

  Sample s;
  char id[32];
  std::snprintf(id, sizeof(id), "s%06llu",
                static_cast<unsigned long long>(spec.seed));
  s.id = id;
  s.image = Tensor::zeros({3, h, w});
  double* px = s.image.data();
  for (size_t i = 0; i < buf.size(); ++i) {
    px[i] = std::clamp(buf[i], 0.0, 1.0);
  }
  s.ann.dots = std::move(dots);
  return s;
}

void save_sample(const std::string& root, const Sample& sample) {
  check(sample.image.ndim() == 3 && sample.image.dim(0) == 3,
        "sample: image to save must be [3, H, W], got " +
            shape_str(sample.image.shape()));
  check(!sample.id.empty(), "sample: id must not be empty");
  const int64_t h = sample.image.dim(1);
  const int64_t w = sample.image.dim(2);

  fs::create_directories(fs::path(root) / "images");
  fs::create_directories(fs::path(root) / "annotations");

  ImageU8 img;
  img.height = h;
  img.width = w;
  img.rgb.resize(static_cast<size_t>(h) * w * 3);
  const double* px = sample.image.data();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        const double v = std::clamp(px[(c * h + y) * w + x], 0.0, 1.0);
        img.rgb[(y * w + x) * 3 + c] =
            static_cast<uint8_t>(std::lround(v * 255.0));
      }
    }
  }
  write_png(image_path(root, sample.id), img);

  std::ofstream ann(annotation_path(root, sample.id));
  check(ann.is_open(),
        "sample: cannot write annotations for '" + sample.id + "'");
  char line[80];
  for (const Dot& d : sample.ann.dots) {
    std::snprintf(line, sizeof(line), "%.6f %.6f\n", d.x, d.y);
    ann << line;
  }
  check(ann.good(),
        "sample: failed writing annotations for '" + sample.id + "'");
}

Sample load_sample(const std::string& root, const std::string& id) {
  Sample s;
  s.id = id;

  ImageU8 img = read_png(image_path(root, id));
  const int64_t h = img.height;
  const int64_t w = img.width;
  s.image = Tensor::zeros({3, h, w});
  double* px = s.image.data();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        px[(c * h + y) * w + x] = img.rgb[(y * w + x) * 3 + c] / 255.0;
      }
    }
  }

  std::ifstream ann(annotation_path(root, id));
  check(ann.is_open(), "sample: missing annotations for '" + id + "'");
  std::string line;
  int64_t lineno = 0;
  while (std::getline(ann, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream iss(line);
    Dot d;
    const bool parsed = static_cast<bool>(iss >> d.x >> d.y);
    std::string rest;
    const bool trailing = parsed && static_cast<bool>(iss >> rest);
    check(parsed && !trailing,
          "annotations for '" + id + "' line " + std::to_string(lineno) +
              ": want 'x y', got '" + line + "'");
    check(std::isfinite(d.x) && std::isfinite(d.y) && d.x >= 0.0 && d.x < w &&
              d.y >= 0.0 && d.y < h,
          "annotations for '" + id + "' line " + std::to_string(lineno) +
              ": dot (" + std::to_string(d.x) + ", " + std::to_string(d.y) +
              ") falls outside the " + std::to_string(h) + "x" +
              std::to_string(w) + " image");
    s.ann.dots.push_back(d);
  }
  return s;
}

void write_manifest(const std::string& root,
                    const std::vector<ManifestEntry>& entries) {
  fs::create_directories(root);
  std::ofstream out(fs::path(root) / "manifest.jsonl");
  check(out.is_open(), "manifest: cannot write under '" + root + "'");
  for (const ManifestEntry& e : entries) {
    nlohmann::json j;
    j["id"] = e.id;
    j["count"] = e.count;
    j["density_level"] = e.density_level;
    out << j.dump() << "\n";
  }
  check(out.good(), "manifest: failed writing under '" + root + "'");
}

std::vector<ManifestEntry> read_manifest(const std::string& root) {
  std::ifstream in(fs::path(root) / "manifest.jsonl");
  check(in.is_open(), "manifest: missing under '" + root + "'");
  std::vector<ManifestEntry> entries;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    check(!j.is_discarded() && j.is_object() && j.contains("id") &&
              j.contains("count") && j.contains("density_level"),
          "manifest: line " + std::to_string(lineno) +
              " is not a sample record");
    ManifestEntry e;
    e.id = j["id"].get<std::string>();
    e.count = j["count"].get<double>();
    e.density_level = j["density_level"].get<int>();
    entries.push_back(e);
  }
  return entries;
}

Sample crop_window(const Sample& sample, int64_t y0, int64_t x0, int64_t ch,
                   int64_t cw) {
  check(sample.image.ndim() == 3, "crop: image must be [C, H, W], got " +
                                      shape_str(sample.image.shape()));
  const int64_t c = sample.image.dim(0);
  const int64_t h = sample.image.dim(1);
  const int64_t w = sample.image.dim(2);
  check(ch > 0 && cw > 0 && y0 >= 0 && x0 >= 0 && y0 + ch <= h && x0 + cw <= w,
        "crop: window " + std::to_string(ch) + "x" + std::to_string(cw) +
            " at (" + std::to_string(y0) + ", " + std::to_string(x0) +
            ") does not fit a " + std::to_string(h) + "x" + std::to_string(w) +
            " image");

  Sample out;
  out.id = sample.id;
  out.image = Tensor::zeros({c, ch, cw});
  const double* src = sample.image.data();
  double* dst = out.image.data();
  for (int64_t k = 0; k < c; ++k) {
    for (int64_t y = 0; y < ch; ++y) {
      for (int64_t x = 0; x < cw; ++x) {
        dst[(k * ch + y) * cw + x] = src[(k * h + y0 + y) * w + x0 + x];
      }
    }
  }
  for (const Dot& d : sample.ann.dots) {
    if (d.x >= x0 && d.x < x0 + cw && d.y >= y0 && d.y < y0 + ch) {
      out.ann.dots.push_back({d.x - x0, d.y - y0});
    }
  }
  return out;
}

Sample hflip(const Sample& sample) {
  check(sample.image.ndim() == 3, "flip: image must be [C, H, W], got " +
                                      shape_str(sample.image.shape()));
  const int64_t c = sample.image.dim(0);
  const int64_t h = sample.image.dim(1);
  const int64_t w = sample.image.dim(2);
  Sample out;
  out.id = sample.id;
  out.image = Tensor::zeros({c, h, w});
  const double* src = sample.image.data();
  double* dst = out.image.data();
  for (int64_t k = 0; k < c; ++k) {
    for (int64_t y = 0; y < h; ++y) {
      for (int64_t x = 0; x < w; ++x) {
        dst[(k * h + y) * w + x] = src[(k * h + y) * w + (w - 1 - x)];
      }
    }
  }
  out.ann.dots.reserve(sample.ann.dots.size());
  for (const Dot& d : sample.ann.dots) {
    // Mirror in pixel-index coordinates. A dot in the sub-pixel sliver past
    // the last pixel center (x > W - 1) would land negative, so it pins to
    // the edge instead.
    out.ann.dots.push_back(
        {std::max(0.0, static_cast<double>(w - 1) - d.x), d.y});
  }
  return out;
}

Sample augment(const Sample& sample, int64_t ch, int64_t cw, Rng& rng) {
  check(ch % 32 == 0 && cw % 32 == 0,
        "augment: crop size " + std::to_string(ch) + "x" + std::to_string(cw) +
            " must be a multiple of 32");
  const int64_t h = sample.image.dim(1);
  const int64_t w = sample.image.dim(2);
  check(ch <= h && cw <= w, "augment: crop " + std::to_string(ch) + "x" +
                                std::to_string(cw) + " larger than the " +
                                std::to_string(h) + "x" + std::to_string(w) +
                                " image");
  const int64_t y0 = rng.uniform_int(0, h - ch);
  const int64_t x0 = rng.uniform_int(0, w - cw);
  Sample out = crop_window(sample, y0, x0, ch, cw);
  if (rng.bernoulli(0.5)) out = hflip(out);
  return out;
}

}  // namespace rcc
