#pragma once

#include "rcc/attention.hpp"

namespace rcc {

// Four-stage hierarchical encoder. Each stage shrinks the map with an
// overlapping 3x3 patch-embed conv, runs transformer blocks on the tokens
// (spatial-reduction attention keeps the early stages affordable), and
// closes with a LayerNorm. Strides compose to 4/8/16/32.
struct BackboneConfig {
  std::array<int64_t, 4> channels{32, 64, 128, 256};
  std::array<int, 4> depths{1, 1, 2, 1};
  std::array<int64_t, 4> heads{1, 2, 4, 8};
  std::array<int, 4> sr_ratios{8, 4, 2, 1};
};

// Taps from the last three stages (stride 8/16/32). The stride-4 stage is
// computed but only feeds the later stages.
struct FeaturePyramid {
  Tensor f2, f3, f4;
};

struct BackboneStage {
  Conv2d patch;
  std::vector<Deab> blocks;
  LayerNorm norm;
  int stride = 2;

  // Returns the stage map [B, C, H/stride, W/stride].
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParamList& out);
};

struct Backbone {
  BackboneConfig config;
  std::vector<BackboneStage> stages;

  static Backbone make(Rng& rng, const BackboneConfig& config = {});
  // image: [B, 3, H, W], H and W divisible by 32.
  FeaturePyramid encode(const Tensor& image) const;
  void collect(const std::string& prefix, ParamList& out);
};

}  // namespace rcc
