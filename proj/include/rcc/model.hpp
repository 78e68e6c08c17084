#pragma once

#include <string>
#include <vector>

#include "rcc/attention.hpp"
#include "rcc/backbone.hpp"
#include "rcc/idconv_asam.hpp"
#include "rcc/mffm.hpp"

namespace rcc {

// Everything needed to rebuild a network. Mode names are stored as strings
// so a config file round-trips verbatim; they are parsed (and rejected with
// the offending value) when the model is built.
struct ModelConfig {
  BackboneConfig backbone;
  int64_t c_f = 64;         // fused feature width
  int deab_depth = 2;       // refinement blocks after fusion
  int64_t heads = 4;        // attention heads in the refinement blocks
  int local_kernel = 5;     // depthwise kernel of the local attention map
  double alpha_init = 0.6;  // initial local/global mixing weight
  bool use_deab = true;     // refinement stack on/off
  bool use_asam = true;     // scale-adaptive module on/off
  // Fusion recipe (see FuseMode), or "off" to feed the upsampled deepest
  // backbone tap straight to the later stages.
  std::string mffm_mode = "mffm";
  std::string attention_mode = "dea";  // gsa | gsa_local_conv | dea
  std::string idconv_mode = "idconv";  // vanilla | deformable | idconv
  // Added to the rectified head output; > 0 makes every cell strictly
  // positive, which the mass-transport loss needs.
  double head_eps = 0.0;
};

// Strict parser: unknown keys are rejected, missing keys keep defaults.
ModelConfig config_from_json(const std::string& text);
std::string config_to_json(const ModelConfig& c);

// Stride-8 density grid; per-image people counts are its plain sums.
struct DensityMap {
  Tensor grid;  // [B, 1, H/8, W/8]
  int64_t batch() const { return grid.dim(0); }
  double count(int64_t i) const;
};

// The full counting network: pyramid encoder, multi-scale fusion,
// attention refinement, scale-adaptive convolutions, and a 1x1 density
// head. Every piece after the encoder can be swapped out or disabled
// through the config, which is what the ablation tooling drives.
struct CrowdCounter {
  ModelConfig config;
  Backbone backbone;
  Mffm mffm;               // engaged unless config.mffm_mode == "off"
  std::vector<Deab> neck;  // empty unless config.use_deab
  Asam asam;               // engaged when config.use_asam
  Conv2d head;

  bool uses_fusion() const { return config.mffm_mode != "off"; }
  // Channel width of the fused map the neck/asam/head operate on.
  int64_t trunk_width() const {
    return uses_fusion() ? config.c_f : config.backbone.channels[3];
  }

  static CrowdCounter make(Rng& rng, const ModelConfig& cfg = {});
  // Training mode only affects batch-norm statistics inside the
  // scale-adaptive module.
  DensityMap forward(const Tensor& images, bool training = false);
  ParamList parameters();
};

}  // namespace rcc
