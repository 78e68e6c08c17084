#pragma once

#include "rcc/nnops.hpp"

namespace rcc {

// Convolution variants for the scale-aware module:
//  - kVanilla: static depthwise 3x3 kernel, taps on the regular grid.
//  - kDeformable: static kernel, per-location learned tap offsets.
//  - kIdconv: learned offsets plus a per-image dynamic depthwise kernel
//    generated from the pooled deformed features.
enum class ConvMode { kVanilla, kDeformable, kIdconv };

ConvMode conv_mode_from_string(const std::string& s);
std::string to_string(ConvMode m);

// Gathers the 3x3 tap neighborhood of every output location after shifting
// each tap by its offset. offsets: [B, 18, H, W], channel 2n holding the row
// shift and 2n+1 the column shift of tap n. The base grid spans
// {-d, 0, d}^2 for dilation d. Out-of-image taps read as zero. Returns
// [B, 9*C, H, W] with tap n of channel c at channel n*C + c.
Tensor deform_sample(const Tensor& x, const Tensor& offsets, int dilation);

// Depthwise 3x3 convolution with input-dependent taps and (in kIdconv mode)
// an input-dependent kernel, followed by a 1x1 channel mix. All modes share
// one compute path so the simpler modes are bit-exact degenerations.
struct IdConv {
  int64_t channels = 0;
  int dilation = 1;
  ConvMode mode = ConvMode::kIdconv;

  Conv2d offset_conv;  // 3x3, C -> 18, zero-initialized (not kVanilla)
  Tensor kernel;       // [9, C] static depthwise taps (not kIdconv)
  Conv2d wb_in;        // 1x1, 9C -> C   (kIdconv)
  BatchNorm2d wb_bn;   //                (kIdconv)
  Conv2d wb_out;       // 1x1, C -> 9C   (kIdconv)
  Conv2d mix;          // 1x1, C -> C

  static IdConv make(Rng& rng, int64_t channels, int dilation = 1,
                     ConvMode mode = ConvMode::kIdconv);
  // Tap offsets for the given input: zeros in kVanilla mode, offset_conv
  // output otherwise (rejected if non-finite).
  Tensor offsets_for(const Tensor& x) const;
  // The per-image depthwise kernel [B, 9, C]: weight-branch output in
  // kIdconv mode, the static kernel broadcast across the batch otherwise.
  Tensor dynamic_weights(const Tensor& x, bool training);
  Tensor forward(const Tensor& x, bool training);
  void collect(const std::string& prefix, ParamList& out);
};

// Adaptive scale-aware block: halve channels, run three dilated IdConvs in
// parallel, concatenate, and restore the width. No residual.
struct Asam {
  int64_t channels = 0;
  ConvMode mode = ConvMode::kIdconv;

  IdConv entry_idconv;
  BatchNorm2d entry_bn;
  Conv2d entry_conv;  // 1x1, C -> C/2
  std::vector<IdConv> branches;  // C/2, dilations 1/2/3
  BatchNorm2d exit_bn;
  Conv2d exit_conv;  // 1x1, 3C/2 -> C

  static Asam make(Rng& rng, int64_t channels,
                   ConvMode mode = ConvMode::kIdconv);
  // Concatenated branch outputs [B, 3C/2, H, W] for a halved-width input.
  Tensor branches_concat(const Tensor& fm, bool training);
  Tensor forward(const Tensor& x, bool training);
  void collect(const std::string& prefix, ParamList& out);
};

}  // namespace rcc
