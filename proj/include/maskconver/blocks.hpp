#pragma once

#include <string>

#include "maskconver/cost.hpp"
#include "maskconver/ops.hpp"
#include "maskconver/params.hpp"
#include "maskconver/rng.hpp"

namespace maskconver {

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kLayerScaleInit = 1e-6;
inline constexpr double kInitStd = 0.02;
// Standalone squeeze-excitation default. Inside ConvNeXt-SE the gate sits at
// the expanded width 4C, where a ratio of 16 puts the hidden width at C/4.
inline constexpr int kSeReduction = 4;
inline constexpr int kBlockSeReduction = 16;
inline constexpr int kLightHeadDepth = 2;

void init_conv(ParamSet& ps, const std::string& prefix, int c_in, int c_out, int kernel, int groups,
               Rng& rng, double bias_init = 0.0);
void init_linear(ParamSet& ps, const std::string& prefix, int d_in, int d_out, Rng& rng,
                 double bias_init = 0.0);
void init_norm(ParamSet& ps, const std::string& prefix, int channels);

// Squeeze-and-excitation over channels: global average pool, a two-layer
// bottleneck with GeLU, a gate activation, then a per-channel multiply.
// Hidden width is channels / reduction.
void init_se_layer(ParamSet& ps, const std::string& prefix, int channels, int reduction, Rng& rng);
Value se_layer(Value x, ParamView p, int reduction, ActKind gate_kind);
Shape4 describe_se_layer(NetDesc& d, const std::string& prefix, Shape4 in, int reduction);

// Residual ConvNeXt block, optionally with SE between the two 1x1
// convolutions:
//   x + layer_scale * [pw2(SE(gelu(pw1(norm(dw7x7(x))))))]
void init_convnext_block(ParamSet& ps, const std::string& prefix, int channels, bool use_se,
                         int se_reduction, Rng& rng);
Value convnext_block(Value x, ParamView p, bool use_se, int se_reduction, ActKind gate_kind);
Shape4 describe_convnext_block(NetDesc& d, const std::string& prefix, Shape4 in, bool use_se,
                               int se_reduction);

// Prediction-head trunk: `depth` units of [7x7 depthwise -> layer norm ->
// GeLU], then a 1x1 projection with no activation. Spatial size preserved.
void init_light_head(ParamSet& ps, const std::string& prefix, int in_channels, int depth,
                     int out_channels, Rng& rng, double final_bias = 0.0);
Value light_head(Value x, ParamView p, int depth);
Shape4 describe_light_head(NetDesc& d, const std::string& prefix, Shape4 in, int depth,
                           int out_channels);
// Same head with the depthwise convolutions replaced by dense 3x3
// convolutions at equal width; used for cost comparisons only.
Shape4 describe_dense_head(NetDesc& d, const std::string& prefix, Shape4 in, int depth,
                           int out_channels);

}  // namespace maskconver
