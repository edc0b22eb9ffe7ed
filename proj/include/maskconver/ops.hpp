#pragma once

#include <algorithm>
#include <array>
#include <utility>
#include <vector>

#include "maskconver/autodiff.hpp"
#include "maskconver/tensor.hpp"

namespace maskconver {

enum class ActKind { Gelu, Sigmoid, HardSigmoid };

// (n, y, x) sample location for gather_at.
struct GatherLoc {
  int n, y, x;
};

// ---------------------------------------------------------------------------
// Plain-tensor kernels. Pure functions; safe for concurrent use.
// ---------------------------------------------------------------------------

// input N x Cin x H x W, weight Cout x (Cin/groups) x Kh x Kw, bias Cout or
// empty. Zero padding; H' = floor((H + 2*padding - Kh)/stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding, int groups);
void conv2d_backward(const Tensor& input, const Tensor& weight, const Tensor& grad_out, int stride,
                     int padding, int groups, Tensor* grad_input, Tensor* grad_weight,
                     Tensor* grad_bias);

// Padding uses -infinity semantics (padding never wins the max). Requires
// 0 <= padding < kernel. `argmax_out`, when non-null, receives the flat input
// index of each output cell's winner (first in row-major scan order on ties).
Tensor max_pool2d(const Tensor& input, int kernel, int stride, int padding,
                  std::vector<std::int64_t>* argmax_out = nullptr);

// Half-pixel-center bilinear interpolation (align_corners = false). Exact
// identity when the output size equals the input size.
Tensor bilinear_resize(const Tensor& input, int out_h, int out_w);
Tensor bilinear_resize_backward(const Tensor& grad_out, int in_h, int in_w);

// Per-location normalization of the channel vector, then gamma/beta.
Tensor layer_norm_channels(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps);

double activation_value(ActKind kind, double x);
double activation_deriv(ActKind kind, double x);
Tensor pointwise_activation(ActKind kind, const Tensor& input);

// Affine map over the trailing dimension: input ... x Din, weight Dout x Din.
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

Tensor global_avg_pool(const Tensor& input);  // N x C x H x W -> N x C

Tensor gather_at(const Tensor& input, const std::vector<GatherLoc>& locations);  // -> K x C

// k highest-scoring entries in descending score order. Ties are broken by
// `payload_less` (ascending), which makes the result deterministic whenever
// payloads are distinct.
template <typename Payload, typename PayloadLess>
std::vector<std::pair<double, Payload>> top_k(std::vector<std::pair<double, Payload>> entries,
                                              int k, PayloadLess payload_less) {
  if (k < 0) throw std::invalid_argument("top_k: k must be non-negative");
  std::sort(entries.begin(), entries.end(),
            [&](const auto& a, const auto& b) {
              if (a.first != b.first) return a.first > b.first;
              return payload_less(a.second, b.second);
            });
  if (static_cast<int>(entries.size()) > k) entries.resize(static_cast<std::size_t>(k));
  return entries;
}

// ---------------------------------------------------------------------------
// Tape ops. Each records a VJP when some input requires gradients.
// ---------------------------------------------------------------------------
namespace ops {

Value conv2d(Value input, Value weight, Value bias, int stride, int padding, int groups);
Value max_pool2d(Value input, int kernel, int stride, int padding);
Value bilinear_resize(Value input, int out_h, int out_w);
Value layer_norm_channels(Value input, Value gamma, Value beta, double eps);
Value activation(ActKind kind, Value input);
Value linear(Value input, Value weight, Value bias);
Value global_avg_pool(Value input);
Value gather_at(Value input, std::vector<GatherLoc> locations);

Value add(Value a, Value b);
Value mul(Value a, Value b);                        // elementwise, same shape
Value affine(Value x, double scale, double shift);  // scale * x + shift
Value sum(Value x);                                 // -> scalar
Value channel_scale(Value x, Value per_channel);    // x[n,c,h,w] * s[c]
Value channel_gate(Value x, Value gate);            // x[n,c,h,w] * g[n,c]

// Point on one of several same-channel-count feature maps.
struct LevelPoint {
  int level_index, n, y, x;
};
// Gathers channel vectors across a list of feature maps -> K x C.
Value gather_levels(const std::vector<Value>& features, std::vector<LevelPoint> points);

// table C_rows x C_embd, ids in [0, C_rows) -> K x C_embd. Gradients flow
// only to the looked-up rows.
Value embedding_lookup(Value table, std::vector<int> ids);

// logits[k, y, x] = dot(features[batch_index[k], :, y, x], embeddings[k, :]).
Value mask_dot(Value features, Value embeddings, std::vector<int> batch_index);

}  // namespace ops

}  // namespace maskconver
