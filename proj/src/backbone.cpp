#include "rcc/backbone.hpp"

namespace rcc {

Tensor BackboneStage::forward(const Tensor& x) const {
  Tensor sp = patch.forward(x);
  const int64_t H = sp.dim(2);
  const int64_t W = sp.dim(3);
  Tensor t = spatial_to_tokens(sp);
  for (const Deab& block : blocks) t = block.forward(t, H, W);
  return tokens_to_spatial(norm.forward(t), H, W);
}

void BackboneStage::collect(const std::string& prefix, ParamList& out) {
  patch.collect(prefix + ".patch", out);
  for (size_t i = 0; i < blocks.size(); ++i)
    blocks[i].collect(prefix + ".blocks." + std::to_string(i), out);
  norm.collect(prefix + ".norm", out);
}

Backbone Backbone::make(Rng& rng, const BackboneConfig& config) {
  for (int s = 0; s < 4; ++s) {
    check(config.channels[s] >= 1 && config.depths[s] >= 1,
          "backbone: stage " + std::to_string(s + 1) +
              " needs positive channels and depth");
    check(config.channels[s] % config.heads[s] == 0,
          "backbone: stage " + std::to_string(s + 1) + " channels " +
              std::to_string(config.channels[s]) +
              " not divisible by heads " + std::to_string(config.heads[s]));
    check(config.sr_ratios[s] >= 1, "backbone: sr_ratio must be >= 1");
  }
  Backbone b;
  b.config = config;
  Rng r = rng.derive("backbone");
  int64_t in_ch = 3;
  for (int s = 0; s < 4; ++s) {
    BackboneStage stage;
    stage.stride = (s == 0) ? 4 : 2;
    Conv2dSpec sp;
    sp.stride = stage.stride;
    sp.padding = 1;
    Rng rs = r.derive("stage" + std::to_string(s + 1));
    stage.patch = Conv2d::make(rs, in_ch, config.channels[s], 3, sp, true);
    for (int d = 0; d < config.depths[s]; ++d) {
      Rng rb = rs.derive("block" + std::to_string(d));
      stage.blocks.push_back(Deab::make(rb, config.channels[s],
                                        config.heads[s], AttentionMode::kGsa,
                                        config.sr_ratios[s]));
    }
    stage.norm = LayerNorm::make(config.channels[s]);
    in_ch = config.channels[s];
    b.stages.push_back(std::move(stage));
  }
  return b;
}

FeaturePyramid Backbone::encode(const Tensor& image) const {
  check(image.ndim() == 4 && image.dim(1) == 3,
        "encode: expected [B,3,H,W], got " + shape_str(image.shape()));
  const int64_t H = image.dim(2);
  const int64_t W = image.dim(3);
  if (H % 32 != 0 || W % 32 != 0) {
    const int64_t ph = (32 - H % 32) % 32;
    const int64_t pw = (32 - W % 32) % 32;
    check(false, "encode: input " + std::to_string(H) + "x" +
                     std::to_string(W) +
                     " not divisible by 32; pad to " + std::to_string(H + ph) +
                     "x" + std::to_string(W + pw) + " (add " +
                     std::to_string(ph) + " rows, " + std::to_string(pw) +
                     " cols)");
  }
  Tensor x = stages[0].forward(image);
  FeaturePyramid p;
  p.f2 = stages[1].forward(x);
  p.f3 = stages[2].forward(p.f2);
  p.f4 = stages[3].forward(p.f3);
  return p;
}

void Backbone::collect(const std::string& prefix, ParamList& out) {
  for (size_t s = 0; s < stages.size(); ++s)
    stages[s].collect(prefix + ".stage" + std::to_string(s + 1), out);
}

}  // namespace rcc
