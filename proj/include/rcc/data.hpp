#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "rcc/rng.hpp"
#include "rcc/tensor.hpp"

namespace rcc {

// One head-center marker, zero-indexed pixel coordinates (pixel-center
// convention). Valid range: 0 <= x < W, 0 <= y < H.
struct Dot {
  double x = 0.0;
  double y = 0.0;
};

struct DotAnnotation {
  std::vector<Dot> dots;
};

// Recipe for one synthetic crowd scene. The generator is a pure function of
// this struct: the same spec always renders the same image and dots.
struct SceneSpec {
  int64_t height = 128;
  int64_t width = 128;
  int64_t people = 40;        // annotated head blobs, placed exactly
  double min_separation = 3.0;  // minimum pairwise head distance, pixels
  int64_t distractors = 6;    // unannotated bright clutter blobs
  uint64_t seed = 0;
};

// An image with its annotation. The image tensor is [3, H, W] with values
// in [0, 1].
struct Sample {
  std::string id;
  Tensor image;
  DotAnnotation ann;
};

// Apparent head radius at a given row: heads lower in the frame are closer
// to the camera and render larger (simple linear perspective).
double head_radius(const SceneSpec& spec, double y);

// Renders one scene: a textured background, `people` dark Gaussian head
// blobs placed by rejection sampling so that no two are closer than
// `min_separation`, and `distractors` bright elongated blobs that are not
// annotated. Head centers are snapped to 1/64 pixel so the text annotation
// format below round-trips exactly. Throws if the packing constraint cannot
// be met.
Sample synth_scene(const SceneSpec& spec);

// On-disk layout under a dataset root:
//   <root>/images/<id>.png          8-bit RGB
//   <root>/annotations/<id>.txt     one "x y" line per dot, %.6f, may be empty
//   <root>/manifest.jsonl           one JSON object per sample
void save_sample(const std::string& root, const Sample& sample);
Sample load_sample(const std::string& root, const std::string& id);

struct ManifestEntry {
  std::string id;
  double count = 0.0;
  int density_level = 0;
};

void write_manifest(const std::string& root,
                    const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& root);

// Fixed-window crop: keeps image[..., y0:y0+ch, x0:x0+cw] and the dots that
// fall inside it, re-expressed in window coordinates.
Sample crop_window(const Sample& sample, int64_t y0, int64_t x0, int64_t ch,
                   int64_t cw);

// Horizontal mirror; a dot at column x moves to (W - 1) - x. Dots in the
// sub-pixel sliver x > W - 1 pin to the left edge, so the mirror is an exact
// involution only on [0, W - 1].
Sample hflip(const Sample& sample);

// Training-time augmentation: a random crop to ch x cw (both must be
// multiples of 32 so the cropped image still divides evenly through the
// encoder strides) followed by a coin-flip horizontal mirror.
Sample augment(const Sample& sample, int64_t ch, int64_t cw, Rng& rng);

}  // namespace rcc
