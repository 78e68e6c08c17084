#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "rcc/data.hpp"
#include "rcc/losses.hpp"
#include "rcc/metrics.hpp"
#include "rcc/png_io.hpp"
#include "rcc/rng.hpp"
#include "testutil.hpp"

using namespace rcc;
using testutil::contains;
using testutil::max_abs_diff;
using testutil::thrown_message;

namespace fs = std::filesystem;

namespace {

// A scratch dataset root, wiped at the start of each use.
std::string fresh_root(const std::string& tag) {
  fs::path p = fs::temp_directory_path() / ("rcc_data_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

double image_mean(const Tensor& t) {
  double s = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) s += t.data()[i];
  return s / static_cast<double>(t.numel());
}

double image_stddev(const Tensor& t) {
  const double m = image_mean(t);
  double s = 0.0;
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double d = t.data()[i] - m;
    s += d * d;
  }
  return std::sqrt(s / static_cast<double>(t.numel()));
}

}  // namespace

TEST_SUITE("data") {

TEST_CASE("synth_scene is a pure function of the spec") {
  SceneSpec spec;
  spec.height = 64;
  spec.width = 96;
  spec.people = 20;
  spec.seed = 11;

  Sample a = synth_scene(spec);
  Sample b = synth_scene(spec);
  CHECK(a.id == b.id);
  CHECK(max_abs_diff(a.image, b.image) == 0.0);
  REQUIRE(a.ann.dots.size() == b.ann.dots.size());
  for (size_t i = 0; i < a.ann.dots.size(); ++i) {
    CHECK(a.ann.dots[i].x == b.ann.dots[i].x);
    CHECK(a.ann.dots[i].y == b.ann.dots[i].y);
  }

  spec.seed = 12;
  Sample c = synth_scene(spec);
  CHECK(c.id != a.id);
  CHECK(max_abs_diff(a.image, c.image) > 0.0);
}

TEST_CASE("synth_scene places exactly the requested heads") {
  SceneSpec spec;
  spec.height = 96;
  spec.width = 64;
  spec.people = 30;
  spec.min_separation = 4.0;
  spec.seed = 3;

  Sample s = synth_scene(spec);
  CHECK(s.image.shape() == std::vector<int64_t>{3, 96, 64});
  REQUIRE(s.ann.dots.size() == 30);

  for (const Dot& d : s.ann.dots) {
    CHECK(d.x >= 0.0);
    CHECK(d.x < 64.0);
    CHECK(d.y >= 0.0);
    CHECK(d.y < 96.0);
    // Head centers sit on the 1/64-pixel lattice so annotations round-trip.
    CHECK(d.x * 64.0 == std::round(d.x * 64.0));
    CHECK(d.y * 64.0 == std::round(d.y * 64.0));
  }
  for (size_t i = 0; i < s.ann.dots.size(); ++i) {
    for (size_t j = i + 1; j < s.ann.dots.size(); ++j) {
      const double dx = s.ann.dots[i].x - s.ann.dots[j].x;
      const double dy = s.ann.dots[i].y - s.ann.dots[j].y;
      CHECK(std::sqrt(dx * dx + dy * dy) >= spec.min_separation - 1e-9);
    }
  }

  // The binned ground truth sees every head exactly once.
  Tensor grid = bin_dots(s.ann, 96, 64);
  double total = 0.0;
  for (int64_t i = 0; i < grid.numel(); ++i) total += grid.data()[i];
  CHECK(total == 30.0);
}

TEST_CASE("synth_scene rejects impossible packings") {
  SceneSpec spec;
  spec.height = 64;
  spec.width = 64;
  spec.people = 50;
  spec.min_separation = 40.0;
  std::string msg = thrown_message([&] { synth_scene(spec); });
  CHECK(contains(msg, "min separation too tight"));
  CHECK(contains(msg, "64x64"));

  SceneSpec bad;
  bad.height = 0;
  CHECK(contains(thrown_message([&] { synth_scene(bad); }),
                 "scene size must be positive"));
}

TEST_CASE("synth_scene renders texture, heads, and clutter") {
  SceneSpec spec;
  spec.height = 64;
  spec.width = 64;
  spec.people = 0;
  spec.distractors = 0;
  spec.seed = 5;

  Sample empty = synth_scene(spec);
  for (int64_t i = 0; i < empty.image.numel(); ++i) {
    CHECK(empty.image.data()[i] >= 0.0);
    CHECK(empty.image.data()[i] <= 1.0);
  }
  // The background is textured, not a flat fill.
  CHECK(image_stddev(empty.image) > 0.01);

  // Heads darken the scene they are drawn into; the background and clutter
  // streams are independent of head placement, so the only difference
  // between these two renders is the head blobs themselves.
  spec.people = 25;
  Sample crowded = synth_scene(spec);
  CHECK(crowded.ann.dots.size() == 25);
  CHECK(empty.ann.dots.empty());
  CHECK(image_mean(crowded.image) < image_mean(empty.image));

  // Distractors brighten it but add no annotations.
  spec.people = 0;
  spec.distractors = 8;
  Sample littered = synth_scene(spec);
  CHECK(littered.ann.dots.empty());
  CHECK(image_mean(littered.image) > image_mean(empty.image));
}

TEST_CASE("head_radius grows towards the bottom of the frame") {
  SceneSpec spec;
  spec.height = 128;
  CHECK(head_radius(spec, 0.0) == doctest::Approx(1.5));
  CHECK(head_radius(spec, 128.0) == doctest::Approx(4.0));
  CHECK(head_radius(spec, 32.0) < head_radius(spec, 96.0));
}

TEST_CASE("save and load round-trip a sample") {
  const std::string root = fresh_root("roundtrip");
  SceneSpec spec;
  spec.height = 64;
  spec.width = 32;
  spec.people = 12;
  spec.seed = 21;
  Sample s = synth_scene(spec);
  save_sample(root, s);

  CHECK(fs::exists(fs::path(root) / "images" / (s.id + ".png")));
  CHECK(fs::exists(fs::path(root) / "annotations" / (s.id + ".txt")));

  Sample back = load_sample(root, s.id);
  CHECK(back.id == s.id);
  CHECK(back.image.shape() == s.image.shape());
  // PNG stores 8-bit samples, so each channel may move by half a quantum.
  CHECK(max_abs_diff(back.image, s.image) <= 0.5 / 255.0 + 1e-12);
  // Dot coordinates sit on the 1/64 lattice and print with six decimals,
  // which is lossless: the reload must match bit for bit.
  REQUIRE(back.ann.dots.size() == s.ann.dots.size());
  for (size_t i = 0; i < s.ann.dots.size(); ++i) {
    CHECK(back.ann.dots[i].x == s.ann.dots[i].x);
    CHECK(back.ann.dots[i].y == s.ann.dots[i].y);
  }
}

TEST_CASE("an empty annotation file is a valid empty scene") {
  const std::string root = fresh_root("empty_ann");
  SceneSpec spec;
  spec.height = 32;
  spec.width = 32;
  spec.people = 0;
  spec.distractors = 3;
  spec.seed = 2;
  Sample s = synth_scene(spec);
  save_sample(root, s);

  Sample back = load_sample(root, s.id);
  CHECK(back.ann.dots.empty());
}

TEST_CASE("load_sample reports bad annotation lines by number") {
  const std::string root = fresh_root("bad_ann");
  SceneSpec spec;
  spec.height = 32;
  spec.width = 16;
  spec.people = 0;
  spec.seed = 9;
  Sample s = synth_scene(spec);
  save_sample(root, s);
  const std::string ann = root + "/annotations/" + s.id + ".txt";

  {
    std::ofstream out(ann);
    out << "1.500000 2.000000\nbogus line\n";
  }
  std::string msg = thrown_message([&] { load_sample(root, s.id); });
  CHECK(contains(msg, "line 2"));
  CHECK(contains(msg, "want 'x y'"));
  CHECK(contains(msg, "bogus line"));

  {
    std::ofstream out(ann);
    out << "1.0 2.0 3.0\n";
  }
  CHECK(contains(thrown_message([&] { load_sample(root, s.id); }),
                 "line 1: want 'x y'"));

  // x == W sits outside the half-open pixel range.
  {
    std::ofstream out(ann);
    out << "3.000000 1.000000\n16.000000 1.000000\n";
  }
  msg = thrown_message([&] { load_sample(root, s.id); });
  CHECK(contains(msg, "line 2"));
  CHECK(contains(msg, "outside the 32x16 image"));

  {
    std::ofstream out(ann);
    out << "2.0 -0.5\n";
  }
  CHECK(contains(thrown_message([&] { load_sample(root, s.id); }),
                 "outside the 32x16 image"));

  CHECK(contains(thrown_message([&] { load_sample(root, "nope"); }),
                 "cannot open"));
}

TEST_CASE("manifest round-trips and rejects junk lines") {
  const std::string root = fresh_root("manifest");
  std::vector<ManifestEntry> entries;
  entries.push_back({"s000000", 40.0, density_level(40.0)});
  entries.push_back({"s000001", 0.0, density_level(0.0)});
  entries.push_back({"s000002", 600.0, density_level(600.0)});
  write_manifest(root, entries);

  std::vector<ManifestEntry> back = read_manifest(root);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].id == entries[i].id);
    CHECK(back[i].count == entries[i].count);
    CHECK(back[i].density_level == entries[i].density_level);
  }
  CHECK(back[0].density_level == 1);
  CHECK(back[1].density_level == 0);
  CHECK(back[2].density_level == 3);

  {
    std::ofstream out(fs::path(root) / "manifest.jsonl", std::ios::app);
    out << "{not json}\n";
  }
  CHECK(contains(thrown_message([&] { read_manifest(root); }),
                 "line 4 is not a sample record"));

  CHECK(contains(
      thrown_message([&] { read_manifest(fresh_root("no_manifest")); }),
      "manifest: missing"));
}

TEST_CASE("crop_window slices the image and re-expresses dots") {
  Sample s;
  s.id = "crop";
  s.image = Tensor::zeros({1, 4, 6});
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 6; ++x) s.image.data()[y * 6 + x] = y * 10.0 + x;
  s.ann.dots = {{2.5, 1.25}, {5.5, 0.0}, {1.984375, 2.0}, {4.0, 2.5}};

  Sample c = crop_window(s, 1, 2, 2, 3);
  CHECK(c.image.shape() == std::vector<int64_t>{1, 2, 3});
  for (int64_t y = 0; y < 2; ++y)
    for (int64_t x = 0; x < 3; ++x)
      CHECK(c.image.data()[y * 3 + x] == (y + 1) * 10.0 + (x + 2));

  // (2.5, 1.25) and (4.0, 2.5) fall inside the window; the dot at row 0 is
  // above it and x = 1.984375 is left of it.
  REQUIRE(c.ann.dots.size() == 2);
  CHECK(c.ann.dots[0].x == 0.5);
  CHECK(c.ann.dots[0].y == 0.25);
  CHECK(c.ann.dots[1].x == 2.0);
  CHECK(c.ann.dots[1].y == 1.5);

  CHECK(contains(thrown_message([&] { crop_window(s, 3, 0, 2, 3); }),
                 "does not fit"));
  CHECK(contains(thrown_message([&] { crop_window(s, 0, 0, 0, 3); }),
                 "does not fit"));
}

TEST_CASE("hflip mirrors columns and dots, and is an involution") {
  Sample s;
  s.id = "flip";
  s.image = Tensor::zeros({2, 2, 3});
  for (int64_t i = 0; i < s.image.numel(); ++i)
    s.image.data()[i] = static_cast<double>(i);
  s.ann.dots = {{0.0, 1.0}, {1.5, 0.25}, {1.984375, 1.984375}};

  Sample f = hflip(s);
  for (int64_t c = 0; c < 2; ++c)
    for (int64_t y = 0; y < 2; ++y)
      for (int64_t x = 0; x < 3; ++x)
        CHECK(f.image.data()[(c * 2 + y) * 3 + x] ==
              s.image.data()[(c * 2 + y) * 3 + (2 - x)]);
  REQUIRE(f.ann.dots.size() == 3);
  CHECK(f.ann.dots[0].x == 2.0);
  CHECK(f.ann.dots[1].x == 0.5);
  CHECK(f.ann.dots[2].x == 0.015625);
  CHECK(f.ann.dots[0].y == 1.0);
  CHECK(f.ann.dots[1].y == 0.25);

  // A dot past the last pixel center pins to the edge rather than going
  // negative.
  Sample sliver;
  sliver.image = Tensor::zeros({1, 1, 3});
  sliver.ann.dots = {{2.5, 0.0}};
  CHECK(hflip(sliver).ann.dots[0].x == 0.0);

  // Coordinates on the 1/64 lattice flip back exactly.
  Sample ff = hflip(f);
  CHECK(max_abs_diff(ff.image, s.image) == 0.0);
  for (size_t i = 0; i < s.ann.dots.size(); ++i) {
    CHECK(ff.ann.dots[i].x == s.ann.dots[i].x);
    CHECK(ff.ann.dots[i].y == s.ann.dots[i].y);
  }
}

TEST_CASE("augment crops to a stride-safe window") {
  SceneSpec spec;
  spec.height = 96;
  spec.width = 64;
  spec.people = 25;
  spec.seed = 17;
  Sample s = synth_scene(spec);

  Rng rng_a(7);
  Rng rng_b(7);
  Sample a = augment(s, 64, 32, rng_a);
  Sample b = augment(s, 64, 32, rng_b);
  CHECK(a.image.shape() == std::vector<int64_t>{3, 64, 32});
  CHECK(max_abs_diff(a.image, b.image) == 0.0);
  REQUIRE(a.ann.dots.size() == b.ann.dots.size());
  for (size_t i = 0; i < a.ann.dots.size(); ++i) {
    CHECK(a.ann.dots[i].x == b.ann.dots[i].x);
    CHECK(a.ann.dots[i].y == b.ann.dots[i].y);
  }
  CHECK(a.ann.dots.size() <= s.ann.dots.size());
  for (const Dot& d : a.ann.dots) {
    CHECK(d.x >= 0.0);
    CHECK(d.x < 32.0);
    CHECK(d.y >= 0.0);
    CHECK(d.y < 64.0);
  }

  // Different draws eventually pick different windows.
  Rng rng_c(8);
  bool moved = false;
  for (int trial = 0; trial < 16 && !moved; ++trial) {
    Sample c = augment(s, 64, 32, rng_c);
    moved = max_abs_diff(a.image, c.image) > 0.0;
  }
  CHECK(moved);

  // A full-size crop keeps every dot (possibly mirrored).
  Rng rng_d(3);
  Sample full = augment(s, 96, 64, rng_d);
  CHECK(full.ann.dots.size() == s.ann.dots.size());

  Rng rng_e(1);
  CHECK(contains(thrown_message([&] { augment(s, 48, 32, rng_e); }),
                 "multiple of 32"));
  CHECK(contains(thrown_message([&] { augment(s, 128, 32, rng_e); }),
                 "larger than the 96x64 image"));
}

TEST_CASE("png io survives an 8-bit round trip") {
  const std::string root = fresh_root("png");
  ImageU8 img;
  img.height = 5;
  img.width = 7;
  img.rgb.resize(5 * 7 * 3);
  Rng rng(4);
  for (auto& b : img.rgb)
    b = static_cast<uint8_t>(rng.uniform_int(0, 255));
  const std::string path = root + "/t.png";
  write_png(path, img);

  ImageU8 back = read_png(path);
  CHECK(back.height == 5);
  CHECK(back.width == 7);
  REQUIRE(back.rgb.size() == img.rgb.size());
  CHECK(back.rgb == img.rgb);

  CHECK(contains(thrown_message([&] { read_png(root + "/absent.png"); }),
                 "cannot open"));
  {
    std::ofstream out(root + "/junk.png", std::ios::binary);
    out << "definitely not a png";
  }
  CHECK(contains(thrown_message([&] { read_png(root + "/junk.png"); }),
                 "failed to decode"));
  ImageU8 bad;
  bad.height = 2;
  bad.width = 2;
  bad.rgb.resize(5);
  CHECK(contains(thrown_message([&] { write_png(root + "/bad.png", bad); }),
                 "bitmap buffer"));
}

}  // TEST_SUITE
