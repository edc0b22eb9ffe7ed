#include "maskconver/blocks.hpp"

#include <stdexcept>

namespace maskconver {

void init_conv(ParamSet& ps, const std::string& prefix, int c_in, int c_out, int kernel, int groups,
               Rng& rng, double bias_init) {
  Tensor w({c_out, c_in / groups, kernel, kernel});
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, kInitStd);
  ps.add(prefix + ".weight", std::move(w));
  ps.add(prefix + ".bias", Tensor::full({c_out}, bias_init));
}

void init_linear(ParamSet& ps, const std::string& prefix, int d_in, int d_out, Rng& rng,
                 double bias_init) {
  Tensor w({d_out, d_in});
  for (std::int64_t i = 0; i < w.numel(); ++i) w[i] = rng.normal(0.0, kInitStd);
  ps.add(prefix + ".weight", std::move(w));
  ps.add(prefix + ".bias", Tensor::full({d_out}, bias_init));
}

void init_norm(ParamSet& ps, const std::string& prefix, int channels) {
  ps.add(prefix + ".gamma", Tensor::ones({channels}));
  ps.add(prefix + ".beta", Tensor::zeros({channels}));
}

// --------------------------------------------------------------------------
// Squeeze-and-excitation
// --------------------------------------------------------------------------

void init_se_layer(ParamSet& ps, const std::string& prefix, int channels, int reduction, Rng& rng) {
  if (reduction < 1 || channels % reduction != 0) {
    throw std::invalid_argument(prefix + ": channels " + std::to_string(channels) +
                                " not divisible by SE reduction " + std::to_string(reduction));
  }
  const int hidden = channels / reduction;
  init_linear(ps, prefix + ".fc1", channels, hidden, rng);
  init_linear(ps, prefix + ".fc2", hidden, channels, rng);
}

Value se_layer(Value x, ParamView p, int reduction, ActKind gate_kind) {
  const Tensor& xv = x.tape->value(x);
  if (xv.rank() != 4) throw std::invalid_argument("se_layer: input must be N x C x H x W");
  if (reduction < 1 || xv.dim(1) % reduction != 0) {
    throw std::invalid_argument("se_layer: channels " + std::to_string(xv.dim(1)) +
                                " not divisible by reduction " + std::to_string(reduction));
  }
  Value squeezed = ops::global_avg_pool(x);  // N x C
  Value hidden = ops::activation(ActKind::Gelu,
                                 ops::linear(squeezed, p["fc1.weight"], p["fc1.bias"]));
  Value gate = ops::activation(gate_kind, ops::linear(hidden, p["fc2.weight"], p["fc2.bias"]));
  return ops::channel_gate(x, gate);
}

Shape4 describe_se_layer(NetDesc& d, const std::string& prefix, Shape4 in, int reduction) {
  const int hidden = in.c / reduction;
  d.global_pool(prefix + ".squeeze", in);
  d.linear(prefix + ".fc1", in.n, in.c, hidden, true);
  d.act(prefix + ".gelu", Shape4{in.n, hidden, 1, 1});
  d.linear(prefix + ".fc2", in.n, hidden, in.c, true);
  d.act(prefix + ".gate", Shape4{in.n, in.c, 1, 1});
  return d.eltwise(prefix + ".excite", in);
}

// --------------------------------------------------------------------------
// ConvNeXt block (optionally with SE at the expanded width)
// --------------------------------------------------------------------------

void init_convnext_block(ParamSet& ps, const std::string& prefix, int channels, bool use_se,
                         int se_reduction, Rng& rng) {
  init_conv(ps, prefix + ".dw", channels, channels, 7, channels, rng);
  init_norm(ps, prefix + ".norm", channels);
  init_conv(ps, prefix + ".pw1", channels, channels * 4, 1, 1, rng);
  if (use_se) init_se_layer(ps, prefix + ".se", channels * 4, se_reduction, rng);
  init_conv(ps, prefix + ".pw2", channels * 4, channels, 1, 1, rng);
  ps.add(prefix + ".layer_scale", Tensor::full({channels}, kLayerScaleInit));
}

Value convnext_block(Value x, ParamView p, bool use_se, int se_reduction, ActKind gate_kind) {
  const int c = x.tape->value(x).dim(1);
  Value y = ops::conv2d(x, p["dw.weight"], p["dw.bias"], 1, 3, c);
  y = ops::layer_norm_channels(y, p["norm.gamma"], p["norm.beta"], kLayerNormEps);
  y = ops::conv2d(y, p["pw1.weight"], p["pw1.bias"], 1, 0, 1);
  y = ops::activation(ActKind::Gelu, y);
  if (use_se) y = se_layer(y, p.sub("se"), se_reduction, gate_kind);
  y = ops::conv2d(y, p["pw2.weight"], p["pw2.bias"], 1, 0, 1);
  y = ops::channel_scale(y, p["layer_scale"]);
  return ops::add(x, y);
}

Shape4 describe_convnext_block(NetDesc& d, const std::string& prefix, Shape4 in, bool use_se,
                               int se_reduction) {
  Shape4 s = d.conv(prefix + ".dw", in, in.c, 7, 1, 3, in.c, true);
  s = d.norm(prefix + ".norm", s);
  s = d.conv(prefix + ".pw1", s, in.c * 4, 1, 1, 0, 1, true);
  s = d.act(prefix + ".gelu", s);
  if (use_se) s = describe_se_layer(d, prefix + ".se", s, se_reduction);
  s = d.conv(prefix + ".pw2", s, in.c, 1, 1, 0, 1, true);
  s = d.per_channel_scale(prefix + ".layer_scale", s);
  return d.eltwise(prefix + ".residual", s);
}

// --------------------------------------------------------------------------
// Light prediction head
// --------------------------------------------------------------------------

void init_light_head(ParamSet& ps, const std::string& prefix, int in_channels, int depth,
                     int out_channels, Rng& rng, double final_bias) {
  if (depth < 1) throw std::invalid_argument("light_head: depth must be >= 1");
  for (int i = 0; i < depth; ++i) {
    const std::string unit = prefix + ".unit" + std::to_string(i);
    init_conv(ps, unit + ".dw", in_channels, in_channels, 7, in_channels, rng);
    init_norm(ps, unit + ".norm", in_channels);
  }
  init_conv(ps, prefix + ".proj", in_channels, out_channels, 1, 1, rng, final_bias);
}

Value light_head(Value x, ParamView p, int depth) {
  const int c = x.tape->value(x).dim(1);
  Value y = x;
  for (int i = 0; i < depth; ++i) {
    ParamView unit = p.sub("unit" + std::to_string(i));
    y = ops::conv2d(y, unit["dw.weight"], unit["dw.bias"], 1, 3, c);
    y = ops::layer_norm_channels(y, unit["norm.gamma"], unit["norm.beta"], kLayerNormEps);
    y = ops::activation(ActKind::Gelu, y);
  }
  return ops::conv2d(y, p["proj.weight"], p["proj.bias"], 1, 0, 1);
}

Shape4 describe_light_head(NetDesc& d, const std::string& prefix, Shape4 in, int depth,
                           int out_channels) {
  Shape4 s = in;
  for (int i = 0; i < depth; ++i) {
    const std::string unit = prefix + ".unit" + std::to_string(i);
    s = d.conv(unit + ".dw", s, s.c, 7, 1, 3, s.c, true);
    s = d.norm(unit + ".norm", s);
    s = d.act(unit + ".gelu", s);
  }
  return d.conv(prefix + ".proj", s, out_channels, 1, 1, 0, 1, true);
}

Shape4 describe_dense_head(NetDesc& d, const std::string& prefix, Shape4 in, int depth,
                           int out_channels) {
  Shape4 s = in;
  for (int i = 0; i < depth; ++i) {
    const std::string unit = prefix + ".unit" + std::to_string(i);
    s = d.conv(unit + ".conv3x3", s, s.c, 3, 1, 1, 1, true);
    s = d.norm(unit + ".norm", s);
    s = d.act(unit + ".gelu", s);
  }
  return d.conv(prefix + ".proj", s, out_channels, 1, 1, 0, 1, true);
}

}  // namespace maskconver
