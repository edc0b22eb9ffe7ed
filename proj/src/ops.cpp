#include "maskconver/ops.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace maskconver {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

int conv_out_dim(int in, int k, int stride, int padding) {
  return (in + 2 * padding - k) / stride + 1;
}

struct ConvDims {
  int n, cin, h, w;
  int cout, cin_g, kh, kw;
  int groups, stride, padding;
  int ho, wo;
  int cout_g;
};

ConvDims conv_check(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding,
                    int groups) {
  require(x.rank() == 4, "conv2d: input must be rank 4 (N x C x H x W), got " + x.shape_str());
  require(w.rank() == 4, "conv2d: weight must be rank 4 (Cout x Cin/groups x Kh x Kw), got " + w.shape_str());
  require(stride >= 1, "conv2d: stride must be >= 1");
  require(padding >= 0, "conv2d: padding must be >= 0");
  require(groups >= 1, "conv2d: groups must be >= 1");
  ConvDims d;
  d.n = x.dim(0);
  d.cin = x.dim(1);
  d.h = x.dim(2);
  d.w = x.dim(3);
  d.cout = w.dim(0);
  d.cin_g = w.dim(1);
  d.kh = w.dim(2);
  d.kw = w.dim(3);
  d.groups = groups;
  d.stride = stride;
  d.padding = padding;
  require(d.cin % groups == 0, "conv2d: input channels " + std::to_string(d.cin) +
                                   " not divisible by groups " + std::to_string(groups));
  require(d.cout % groups == 0, "conv2d: output channels " + std::to_string(d.cout) +
                                    " not divisible by groups " + std::to_string(groups));
  require(d.cin_g == d.cin / groups,
          "conv2d: weight dim 1 is " + std::to_string(d.cin_g) + ", expected Cin/groups = " +
              std::to_string(d.cin / groups));
  if (!b.empty()) {
    require(b.rank() == 1 && b.dim(0) == d.cout,
            "conv2d: bias must have shape [" + std::to_string(d.cout) + "], got " + b.shape_str());
  }
  d.ho = conv_out_dim(d.h, d.kh, stride, padding);
  d.wo = conv_out_dim(d.w, d.kw, stride, padding);
  require(d.ho >= 1 && d.wo >= 1, "conv2d: kernel " + std::to_string(d.kh) + "x" + std::to_string(d.kw) +
                                      " does not fit input " + x.shape_str() + " with padding " +
                                      std::to_string(padding));
  d.cout_g = d.cout / groups;
  return d;
}

// Output-column range [lo, hi] such that ox*stride - padding + kx stays
// inside [0, in_w).
inline void valid_ox_range(int kx, int stride, int padding, int in_w, int out_w, int* lo, int* hi) {
  int shift = padding - kx;
  *lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
  int top = in_w - 1 + shift;
  *hi = top < 0 ? -1 : std::min(out_w - 1, top / stride);
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int padding,
              int groups) {
  ConvDims d = conv_check(x, w, b, stride, padding, groups);
  Tensor out({d.n, d.cout, d.ho, d.wo});
  const double* xd = x.data();
  const double* wd = w.data();
  double* od = out.data();
  const std::int64_t in_plane = static_cast<std::int64_t>(d.h) * d.w;
  const std::int64_t out_plane = static_cast<std::int64_t>(d.ho) * d.wo;

  for (int n = 0; n < d.n; ++n) {
    for (int g = 0; g < d.groups; ++g) {
      for (int oc = 0; oc < d.cout_g; ++oc) {
        const int co = g * d.cout_g + oc;
        double* out_p = od + (static_cast<std::int64_t>(n) * d.cout + co) * out_plane;
        if (!b.empty()) {
          const double bv = b[co];
          for (std::int64_t i = 0; i < out_plane; ++i) out_p[i] = bv;
        }
        for (int ic = 0; ic < d.cin_g; ++ic) {
          const int ci = g * d.cin_g + ic;
          const double* in_p = xd + (static_cast<std::int64_t>(n) * d.cin + ci) * in_plane;
          const double* w_p = wd + ((static_cast<std::int64_t>(co) * d.cin_g + ic) * d.kh) * d.kw;
          for (int ky = 0; ky < d.kh; ++ky) {
            for (int kx = 0; kx < d.kw; ++kx) {
              const double wv = w_p[ky * d.kw + kx];
              int lo, hi;
              valid_ox_range(kx, d.stride, d.padding, d.w, d.wo, &lo, &hi);
              for (int oy = 0; oy < d.ho; ++oy) {
                const int iy = oy * d.stride - d.padding + ky;
                if (iy < 0 || iy >= d.h) continue;
                const double* in_row = in_p + static_cast<std::int64_t>(iy) * d.w - d.padding + kx;
                double* out_row = out_p + static_cast<std::int64_t>(oy) * d.wo;
                if (d.stride == 1) {
                  for (int ox = lo; ox <= hi; ++ox) out_row[ox] += wv * in_row[ox];
                } else {
                  for (int ox = lo; ox <= hi; ++ox) out_row[ox] += wv * in_row[ox * d.stride];
                }
              }
            }
          }
        }
      }
    }
  }
  return out;
}

void conv2d_backward(const Tensor& x, const Tensor& w, const Tensor& grad_out, int stride,
                     int padding, int groups, Tensor* grad_input, Tensor* grad_weight,
                     Tensor* grad_bias) {
  ConvDims d = conv_check(x, w, Tensor{}, stride, padding, groups);
  require(grad_out.rank() == 4 && grad_out.dim(0) == d.n && grad_out.dim(1) == d.cout &&
              grad_out.dim(2) == d.ho && grad_out.dim(3) == d.wo,
          "conv2d_backward: grad_out shape " + grad_out.shape_str() + " does not match output");

  const double* xd = x.data();
  const double* wd = w.data();
  const double* gd = grad_out.data();
  const std::int64_t in_plane = static_cast<std::int64_t>(d.h) * d.w;
  const std::int64_t out_plane = static_cast<std::int64_t>(d.ho) * d.wo;

  if (grad_bias) {
    *grad_bias = Tensor({d.cout});
    double* gb = grad_bias->data();
    for (int n = 0; n < d.n; ++n) {
      for (int co = 0; co < d.cout; ++co) {
        const double* g_p = gd + (static_cast<std::int64_t>(n) * d.cout + co) * out_plane;
        double acc = 0.0;
        for (std::int64_t i = 0; i < out_plane; ++i) acc += g_p[i];
        gb[co] += acc;
      }
    }
  }

  if (grad_weight) {
    *grad_weight = Tensor(w.shape());
    double* gw = grad_weight->data();
    for (int n = 0; n < d.n; ++n) {
      for (int g = 0; g < d.groups; ++g) {
        for (int oc = 0; oc < d.cout_g; ++oc) {
          const int co = g * d.cout_g + oc;
          const double* g_p = gd + (static_cast<std::int64_t>(n) * d.cout + co) * out_plane;
          for (int ic = 0; ic < d.cin_g; ++ic) {
            const int ci = g * d.cin_g + ic;
            const double* in_p = xd + (static_cast<std::int64_t>(n) * d.cin + ci) * in_plane;
            double* gw_p = gw + ((static_cast<std::int64_t>(co) * d.cin_g + ic) * d.kh) * d.kw;
            for (int ky = 0; ky < d.kh; ++ky) {
              for (int kx = 0; kx < d.kw; ++kx) {
                int lo, hi;
                valid_ox_range(kx, d.stride, d.padding, d.w, d.wo, &lo, &hi);
                double acc = 0.0;
                for (int oy = 0; oy < d.ho; ++oy) {
                  const int iy = oy * d.stride - d.padding + ky;
                  if (iy < 0 || iy >= d.h) continue;
                  const double* in_row = in_p + static_cast<std::int64_t>(iy) * d.w - d.padding + kx;
                  const double* g_row = g_p + static_cast<std::int64_t>(oy) * d.wo;
                  if (d.stride == 1) {
                    for (int ox = lo; ox <= hi; ++ox) acc += g_row[ox] * in_row[ox];
                  } else {
                    for (int ox = lo; ox <= hi; ++ox) acc += g_row[ox] * in_row[ox * d.stride];
                  }
                }
                gw_p[ky * d.kw + kx] += acc;
              }
            }
          }
        }
      }
    }
  }

  if (grad_input) {
    *grad_input = Tensor(x.shape());
    double* gi = grad_input->data();
    for (int n = 0; n < d.n; ++n) {
      for (int g = 0; g < d.groups; ++g) {
        for (int oc = 0; oc < d.cout_g; ++oc) {
          const int co = g * d.cout_g + oc;
          const double* g_p = gd + (static_cast<std::int64_t>(n) * d.cout + co) * out_plane;
          for (int ic = 0; ic < d.cin_g; ++ic) {
            const int ci = g * d.cin_g + ic;
            double* gi_p = gi + (static_cast<std::int64_t>(n) * d.cin + ci) * in_plane;
            const double* w_p = wd + ((static_cast<std::int64_t>(co) * d.cin_g + ic) * d.kh) * d.kw;
            for (int ky = 0; ky < d.kh; ++ky) {
              for (int kx = 0; kx < d.kw; ++kx) {
                const double wv = w_p[ky * d.kw + kx];
                int lo, hi;
                valid_ox_range(kx, d.stride, d.padding, d.w, d.wo, &lo, &hi);
                for (int oy = 0; oy < d.ho; ++oy) {
                  const int iy = oy * d.stride - d.padding + ky;
                  if (iy < 0 || iy >= d.h) continue;
                  double* gi_row = gi_p + static_cast<std::int64_t>(iy) * d.w - d.padding + kx;
                  const double* g_row = g_p + static_cast<std::int64_t>(oy) * d.wo;
                  if (d.stride == 1) {
                    for (int ox = lo; ox <= hi; ++ox) gi_row[ox] += wv * g_row[ox];
                  } else {
                    for (int ox = lo; ox <= hi; ++ox) gi_row[ox * d.stride] += wv * g_row[ox];
                  }
                }
              }
            }
          }
        }
      }
    }
  }
}

Tensor max_pool2d(const Tensor& x, int kernel, int stride, int padding,
                  std::vector<std::int64_t>* argmax_out) {
  require(x.rank() == 4, "max_pool2d: input must be rank 4, got " + x.shape_str());
  require(kernel >= 1, "max_pool2d: kernel must be >= 1");
  require(stride >= 1, "max_pool2d: stride must be >= 1");
  require(padding >= 0 && padding < kernel,
          "max_pool2d: padding must satisfy 0 <= padding < kernel");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = conv_out_dim(h, kernel, stride, padding);
  const int wo = conv_out_dim(w, kernel, stride, padding);
  require(ho >= 1 && wo >= 1, "max_pool2d: kernel does not fit input " + x.shape_str());

  Tensor out({n, c, ho, wo});
  if (argmax_out) argmax_out->assign(static_cast<std::size_t>(out.numel()), -1);
  const double* xd = x.data();
  double* od = out.data();
  std::int64_t oi = 0;
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const double* plane = xd + (static_cast<std::int64_t>(ni) * c + ci) * h * w;
      const std::int64_t plane_base = (static_cast<std::int64_t>(ni) * c + ci) * h * w;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox, ++oi) {
          const int y0 = oy * stride - padding;
          const int x0 = ox * stride - padding;
          double best = -std::numeric_limits<double>::infinity();
          std::int64_t best_idx = -1;
          for (int ky = std::max(0, -y0); ky < kernel && y0 + ky < h; ++ky) {
            const int iy = y0 + ky;
            for (int kx = std::max(0, -x0); kx < kernel && x0 + kx < w; ++kx) {
              const int ix = x0 + kx;
              const double v = plane[static_cast<std::int64_t>(iy) * w + ix];
              if (v > best) {
                best = v;
                best_idx = plane_base + static_cast<std::int64_t>(iy) * w + ix;
              }
            }
          }
          od[oi] = best;
          if (argmax_out) (*argmax_out)[static_cast<std::size_t>(oi)] = best_idx;
        }
      }
    }
  }
  return out;
}

namespace {

struct ResizeAxis {
  std::vector<int> i0, i1;
  std::vector<double> frac;
};

ResizeAxis resize_axis(int in, int out) {
  ResizeAxis a;
  a.i0.resize(static_cast<std::size_t>(out));
  a.i1.resize(static_cast<std::size_t>(out));
  a.frac.resize(static_cast<std::size_t>(out));
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    double fl = std::floor(src);
    int lo = static_cast<int>(fl);
    double f = src - fl;
    int hi = lo + 1;
    if (lo < 0) {
      lo = 0;
      hi = 0;
      f = 0.0;
    } else if (hi > in - 1) {
      lo = in - 1;
      hi = in - 1;
      f = 0.0;
    }
    a.i0[static_cast<std::size_t>(o)] = lo;
    a.i1[static_cast<std::size_t>(o)] = hi;
    a.frac[static_cast<std::size_t>(o)] = f;
  }
  return a;
}

}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  require(x.rank() == 4, "bilinear_resize: input must be rank 4, got " + x.shape_str());
  require(out_h >= 1 && out_w >= 1, "bilinear_resize: output dims must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const ResizeAxis ay = resize_axis(h, out_h);
  const ResizeAxis ax = resize_axis(w, out_w);
  Tensor out({n, c, out_h, out_w});
  const double* xd = x.data();
  double* od = out.data();
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const double* plane = xd + (static_cast<std::int64_t>(ni) * c + ci) * h * w;
      double* out_p = od + (static_cast<std::int64_t>(ni) * c + ci) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const double* r0 = plane + static_cast<std::int64_t>(ay.i0[oy]) * w;
        const double* r1 = plane + static_cast<std::int64_t>(ay.i1[oy]) * w;
        const double fy = ay.frac[oy];
        for (int ox = 0; ox < out_w; ++ox) {
          const int x0 = ax.i0[ox], x1 = ax.i1[ox];
          const double fx = ax.frac[ox];
          const double top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
          const double bot = r1[x0] * (1.0 - fx) + r1[x1] * fx;
          out_p[static_cast<std::int64_t>(oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
        }
      }
    }
  }
  return out;
}

Tensor bilinear_resize_backward(const Tensor& grad_out, int in_h, int in_w) {
  require(grad_out.rank() == 4, "bilinear_resize_backward: grad must be rank 4");
  const int n = grad_out.dim(0), c = grad_out.dim(1);
  const int out_h = grad_out.dim(2), out_w = grad_out.dim(3);
  const ResizeAxis ay = resize_axis(in_h, out_h);
  const ResizeAxis ax = resize_axis(in_w, out_w);
  Tensor gin({n, c, in_h, in_w});
  const double* gd = grad_out.data();
  double* gi = gin.data();
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      double* plane = gi + (static_cast<std::int64_t>(ni) * c + ci) * in_h * in_w;
      const double* g_p = gd + (static_cast<std::int64_t>(ni) * c + ci) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const double fy = ay.frac[oy];
        double* r0 = plane + static_cast<std::int64_t>(ay.i0[oy]) * in_w;
        double* r1 = plane + static_cast<std::int64_t>(ay.i1[oy]) * in_w;
        for (int ox = 0; ox < out_w; ++ox) {
          const double g = g_p[static_cast<std::int64_t>(oy) * out_w + ox];
          const double fx = ax.frac[ox];
          r0[ax.i0[ox]] += g * (1.0 - fx) * (1.0 - fy);
          r0[ax.i1[ox]] += g * fx * (1.0 - fy);
          r1[ax.i0[ox]] += g * (1.0 - fx) * fy;
          r1[ax.i1[ox]] += g * fx * fy;
        }
      }
    }
  }
  return gin;
}

Tensor layer_norm_channels(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.rank() == 4, "layer_norm_channels: input must be rank 4, got " + x.shape_str());
  require(eps > 0, "layer_norm_channels: eps must be positive");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(gamma.rank() == 1 && gamma.dim(0) == c,
          "layer_norm_channels: gamma must have shape [" + std::to_string(c) + "], got " + gamma.shape_str());
  require(beta.rank() == 1 && beta.dim(0) == c,
          "layer_norm_channels: beta must have shape [" + std::to_string(c) + "], got " + beta.shape_str());
  Tensor out(x.shape());
  const double* xd = x.data();
  const double* gm = gamma.data();
  const double* bt = beta.data();
  double* od = out.data();
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int ni = 0; ni < n; ++ni) {
    const double* base = xd + static_cast<std::int64_t>(ni) * c * plane;
    double* obase = od + static_cast<std::int64_t>(ni) * c * plane;
    for (std::int64_t p = 0; p < plane; ++p) {
      double mean = 0.0;
      for (int ci = 0; ci < c; ++ci) mean += base[ci * plane + p];
      mean /= c;
      double var = 0.0;
      for (int ci = 0; ci < c; ++ci) {
        const double d = base[ci * plane + p] - mean;
        var += d * d;
      }
      var /= c;
      const double inv = 1.0 / std::sqrt(var + eps);
      for (int ci = 0; ci < c; ++ci) {
        obase[ci * plane + p] = gm[ci] * (base[ci * plane + p] - mean) * inv + bt[ci];
      }
    }
  }
  return out;
}

double activation_value(ActKind kind, double x) {
  switch (kind) {
    case ActKind::Gelu:
      return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2));
    case ActKind::Sigmoid:
      return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    case ActKind::HardSigmoid: {
      const double v = (x + 3.0) / 6.0;
      return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    }
  }
  return 0.0;
}

double activation_deriv(ActKind kind, double x) {
  switch (kind) {
    case ActKind::Gelu: {
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      return cdf + x * pdf;
    }
    case ActKind::Sigmoid: {
      const double s = activation_value(ActKind::Sigmoid, x);
      return s * (1.0 - s);
    }
    case ActKind::HardSigmoid:
      return (x > -3.0 && x < 3.0) ? 1.0 / 6.0 : 0.0;
  }
  return 0.0;
}

Tensor pointwise_activation(ActKind kind, const Tensor& x) {
  Tensor out(x.shape());
  const double* xd = x.data();
  double* od = out.data();
  for (std::int64_t i = 0; i < x.numel(); ++i) od[i] = activation_value(kind, xd[i]);
  return out;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() >= 1, "linear: input must have rank >= 1");
  require(w.rank() == 2, "linear: weight must be rank 2 (Dout x Din), got " + w.shape_str());
  const int din = x.dim(x.rank() - 1);
  const int dout = w.dim(0);
  require(w.dim(1) == din, "linear: input trailing dim " + std::to_string(din) +
                               " does not match weight Din " + std::to_string(w.dim(1)));
  if (!b.empty()) {
    require(b.rank() == 1 && b.dim(0) == dout,
            "linear: bias must have shape [" + std::to_string(dout) + "], got " + b.shape_str());
  }
  std::vector<int> out_shape = x.shape();
  out_shape.back() = dout;
  const std::int64_t rows = din > 0 ? x.numel() / din : 0;
  Tensor out(std::move(out_shape));
  const double* xd = x.data();
  const double* wd = w.data();
  double* od = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xd + r * din;
    double* orow = od + r * dout;
    for (int o = 0; o < dout; ++o) {
      const double* wr = wd + static_cast<std::int64_t>(o) * din;
      double acc = b.empty() ? 0.0 : b[o];
      for (int i = 0; i < din; ++i) acc += xr[i] * wr[i];
      orow[o] = acc;
    }
  }
  return out;
}

Tensor global_avg_pool(const Tensor& x) {
  require(x.rank() == 4, "global_avg_pool: input must be rank 4, got " + x.shape_str());
  const int n = x.dim(0), c = x.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
  Tensor out({n, c});
  const double* xd = x.data();
  double* od = out.data();
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(n) * c; ++nc) {
    const double* p = xd + nc * plane;
    double acc = 0.0;
    for (std::int64_t i = 0; i < plane; ++i) acc += p[i];
    od[nc] = acc / static_cast<double>(plane);
  }
  return out;
}

Tensor gather_at(const Tensor& x, const std::vector<GatherLoc>& locations) {
  require(x.rank() == 4, "gather_at: input must be rank 4, got " + x.shape_str());
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int k = static_cast<int>(locations.size());
  Tensor out({k, c});
  const double* xd = x.data();
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  for (int i = 0; i < k; ++i) {
    const GatherLoc& l = locations[static_cast<std::size_t>(i)];
    require(l.n >= 0 && l.n < n, "gather_at: batch index " + std::to_string(l.n) + " out of range [0, " +
                                     std::to_string(n) + ")");
    require(l.y >= 0 && l.y < h, "gather_at: row " + std::to_string(l.y) + " out of range [0, " +
                                     std::to_string(h) + ")");
    require(l.x >= 0 && l.x < w, "gather_at: col " + std::to_string(l.x) + " out of range [0, " +
                                     std::to_string(w) + ")");
    const double* base = xd + static_cast<std::int64_t>(l.n) * c * plane +
                         static_cast<std::int64_t>(l.y) * w + l.x;
    for (int ci = 0; ci < c; ++ci) out[static_cast<std::int64_t>(i) * c + ci] = base[ci * plane];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tape ops
// ---------------------------------------------------------------------------
namespace ops {

namespace {
GradTape& tape_of(Value v) {
  if (!v.valid()) throw std::invalid_argument("invalid value handle");
  return *v.tape;
}
}  // namespace

Value conv2d(Value input, Value weight, Value bias, int stride, int padding, int groups) {
  GradTape& t = tape_of(input);
  const Tensor empty;
  const Tensor& b = bias.valid() ? t.value(bias) : empty;
  Tensor out = maskconver::conv2d(t.value(input), t.value(weight), b, stride, padding, groups);
  std::vector<Value> parents{input, weight};
  if (bias.valid()) parents.push_back(bias);
  return t.node(std::move(out), parents, [=](GradTape& tt, const Tensor& g) {
    const bool nx = tt.needs_grad(input);
    const bool nw = tt.needs_grad(weight);
    const bool nb = bias.valid() && tt.needs_grad(bias);
    Tensor gx, gw, gb;
    conv2d_backward(tt.value(input), tt.value(weight), g, stride, padding, groups,
                    nx ? &gx : nullptr, nw ? &gw : nullptr, nb ? &gb : nullptr);
    if (nx) tt.accumulate(input, gx);
    if (nw) tt.accumulate(weight, gw);
    if (nb) tt.accumulate(bias, gb);
  });
}

Value max_pool2d(Value input, int kernel, int stride, int padding) {
  GradTape& t = tape_of(input);
  auto argmax = std::make_shared<std::vector<std::int64_t>>();
  Tensor out = maskconver::max_pool2d(t.value(input), kernel, stride, padding, argmax.get());
  return t.node(std::move(out), {input}, [=](GradTape& tt, const Tensor& g) {
    Tensor gx(tt.value(input).shape());
    double* gd = gx.data();
    const double* gs = g.data();
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const std::int64_t src = (*argmax)[static_cast<std::size_t>(i)];
      if (src >= 0) gd[src] += gs[i];
    }
    tt.accumulate(input, gx);
  });
}

Value bilinear_resize(Value input, int out_h, int out_w) {
  GradTape& t = tape_of(input);
  const int in_h = t.value(input).dim(2);
  const int in_w = t.value(input).dim(3);
  Tensor out = maskconver::bilinear_resize(t.value(input), out_h, out_w);
  return t.node(std::move(out), {input}, [=](GradTape& tt, const Tensor& g) {
    tt.accumulate(input, bilinear_resize_backward(g, in_h, in_w));
  });
}

Value layer_norm_channels(Value input, Value gamma, Value beta, double eps) {
  GradTape& t = tape_of(input);
  Tensor out = maskconver::layer_norm_channels(t.value(input), t.value(gamma), t.value(beta), eps);
  return t.node(std::move(out), {input, gamma, beta}, [=](GradTape& tt, const Tensor& g) {
    const Tensor& x = tt.value(input);
    const Tensor& gm = tt.value(gamma);
    const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t plane = static_cast<std::int64_t>(h) * w;
    const bool nx = tt.needs_grad(input);
    const bool ng = tt.needs_grad(gamma);
    const bool nb = tt.needs_grad(beta);
    Tensor gx = nx ? Tensor(x.shape()) : Tensor{};
    Tensor gg = ng ? Tensor({c}) : Tensor{};
    Tensor gb = nb ? Tensor({c}) : Tensor{};
    const double* xd = x.data();
    const double* gmd = gm.data();
    const double* gd = g.data();
    std::vector<double> xhat(static_cast<std::size_t>(c));
    for (int ni = 0; ni < n; ++ni) {
      const std::int64_t base = static_cast<std::int64_t>(ni) * c * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        double mean = 0.0;
        for (int ci = 0; ci < c; ++ci) mean += xd[base + ci * plane + p];
        mean /= c;
        double var = 0.0;
        for (int ci = 0; ci < c; ++ci) {
          const double dlt = xd[base + ci * plane + p] - mean;
          var += dlt * dlt;
        }
        var /= c;
        const double inv = 1.0 / std::sqrt(var + eps);
        double mean_h = 0.0, mean_hx = 0.0;
        for (int ci = 0; ci < c; ++ci) {
          const double xh = (xd[base + ci * plane + p] - mean) * inv;
          xhat[static_cast<std::size_t>(ci)] = xh;
          const double go = gd[base + ci * plane + p];
          if (ng) gg[ci] += go * xh;
          if (nb) gb[ci] += go;
          const double hc = go * gmd[ci];
          mean_h += hc;
          mean_hx += hc * xh;
        }
        mean_h /= c;
        mean_hx /= c;
        if (nx) {
          for (int ci = 0; ci < c; ++ci) {
            const double hc = gd[base + ci * plane + p] * gmd[ci];
            gx[base + ci * plane + p] =
                (hc - mean_h - xhat[static_cast<std::size_t>(ci)] * mean_hx) * inv;
          }
        }
      }
    }
    if (nx) tt.accumulate(input, gx);
    if (ng) tt.accumulate(gamma, gg);
    if (nb) tt.accumulate(beta, gb);
  });
}

Value activation(ActKind kind, Value input) {
  GradTape& t = tape_of(input);
  Tensor out = pointwise_activation(kind, t.value(input));
  return t.node(std::move(out), {input}, [=](GradTape& tt, const Tensor& g) {
    const Tensor& x = tt.value(input);
    Tensor gx(x.shape());
    const double* xd = x.data();
    const double* gd = g.data();
    double* gxd = gx.data();
    for (std::int64_t i = 0; i < x.numel(); ++i) gxd[i] = gd[i] * activation_deriv(kind, xd[i]);
    tt.accumulate(input, gx);
  });
}

Value linear(Value input, Value weight, Value bias) {
  GradTape& t = tape_of(input);
  const Tensor empty;
  const Tensor& b = bias.valid() ? t.value(bias) : empty;
  Tensor out = maskconver::linear(t.value(input), t.value(weight), b);
  std::vector<Value> parents{input, weight};
  if (bias.valid()) parents.push_back(bias);
  return t.node(std::move(out), parents, [=](GradTape& tt, const Tensor& g) {
    const Tensor& x = tt.value(input);
    const Tensor& w = tt.value(weight);
    const int din = x.dim(x.rank() - 1);
    const int dout = w.dim(0);
    const std::int64_t rows = din > 0 ? x.numel() / din : 0;
    const double* xd = x.data();
    const double* wd = w.data();
    const double* gd = g.data();
    if (tt.needs_grad(input)) {
      Tensor gx(x.shape());
      double* gxd = gx.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* grow = gd + r * dout;
        double* gxr = gxd + r * din;
        for (int o = 0; o < dout; ++o) {
          const double gv = grow[o];
          const double* wr = wd + static_cast<std::int64_t>(o) * din;
          for (int i = 0; i < din; ++i) gxr[i] += gv * wr[i];
        }
      }
      tt.accumulate(input, gx);
    }
    if (tt.needs_grad(weight)) {
      Tensor gw(w.shape());
      double* gwd = gw.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* grow = gd + r * dout;
        const double* xr = xd + r * din;
        for (int o = 0; o < dout; ++o) {
          const double gv = grow[o];
          double* gwr = gwd + static_cast<std::int64_t>(o) * din;
          for (int i = 0; i < din; ++i) gwr[i] += gv * xr[i];
        }
      }
      tt.accumulate(weight, gw);
    }
    if (bias.valid() && tt.needs_grad(bias)) {
      Tensor gb({dout});
      for (std::int64_t r = 0; r < rows; ++r) {
        const double* grow = gd + r * dout;
        for (int o = 0; o < dout; ++o) gb[o] += grow[o];
      }
      tt.accumulate(bias, gb);
    }
  });
}

Value global_avg_pool(Value input) {
  GradTape& t = tape_of(input);
  Tensor out = maskconver::global_avg_pool(t.value(input));
  return t.node(std::move(out), {input}, [=](GradTape& tt, const Tensor& g) {
    const Tensor& x = tt.value(input);
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    Tensor gx(x.shape());
    double* gxd = gx.data();
    const double* gd = g.data();
    for (std::int64_t nc = 0; nc < g.numel(); ++nc) {
      const double gv = gd[nc] / static_cast<double>(plane);
      double* p = gxd + nc * plane;
      for (std::int64_t i = 0; i < plane; ++i) p[i] = gv;
    }
    tt.accumulate(input, gx);
  });
}

Value gather_at(Value input, std::vector<GatherLoc> locations) {
  GradTape& t = tape_of(input);
  Tensor out = maskconver::gather_at(t.value(input), locations);
  auto locs = std::make_shared<std::vector<GatherLoc>>(std::move(locations));
  return t.node(std::move(out), {input}, [=](GradTape& tt, const Tensor& g) {
    const Tensor& x = tt.value(input);
    const int c = x.dim(1);
    const std::int64_t plane = static_cast<std::int64_t>(x.dim(2)) * x.dim(3);
    Tensor gx(x.shape());
    double* gxd = gx.data();
    const double* gd = g.data();
    for (std::size_t k = 0; k < locs->size(); ++k) {
      const GatherLoc& l = (*locs)[k];
      double* base = gxd + static_cast<std::int64_t>(l.n) * c * plane +
                     static_cast<std::int64_t>(l.y) * x.dim(3) + l.x;
      const double* grow = gd + static_cast<std::int64_t>(k) * c;
      for (int ci = 0; ci < c; ++ci) base[ci * plane] += grow[ci];
    }
    tt.accumulate(input, gx);
  });
}

Value add(Value a, Value b) {
  GradTape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) {
    throw std::invalid_argument("add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  }
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] + bv[i];
  return t.node(std::move(out), {a, b}, [=](GradTape& tt, const Tensor& g) {
    tt.accumulate(a, g);
    tt.accumulate(b, g);
  });
}

Value mul(Value a, Value b) {
  GradTape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (!av.same_shape(bv)) {
    throw std::invalid_argument("mul: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  }
  Tensor out(av.shape());
  for (std::int64_t i = 0; i < av.numel(); ++i) out[i] = av[i] * bv[i];
  return t.node(std::move(out), {a, b}, [=](GradTape& tt, const Tensor& g) {
    const Tensor& aa = tt.value(a);
    const Tensor& bb = tt.value(b);
    if (tt.needs_grad(a)) {
      Tensor ga(g.shape());
      for (std::int64_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * bb[i];
      tt.accumulate(a, ga);
    }
    if (tt.needs_grad(b)) {
      Tensor gb(g.shape());
      for (std::int64_t i = 0; i < g.numel(); ++i) gb[i] = g[i] * aa[i];
      tt.accumulate(b, gb);
    }
  });
}

Value affine(Value x, double scale, double shift) {
  GradTape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape());
  for (std::int64_t i = 0; i < xv.numel(); ++i) out[i] = scale * xv[i] + shift;
  return t.node(std::move(out), {x}, [=](GradTape& tt, const Tensor& g) {
    Tensor gx(g.shape());
    for (std::int64_t i = 0; i < g.numel(); ++i) gx[i] = scale * g[i];
    tt.accumulate(x, gx);
  });
}

Value sum(Value x) {
  GradTape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  double acc = 0.0;
  for (std::int64_t i = 0; i < xv.numel(); ++i) acc += xv[i];
  return t.node(Tensor::scalar(acc), {x}, [=](GradTape& tt, const Tensor& g) {
    tt.accumulate(x, Tensor::full(tt.value(x).shape(), g[0]));
  });
}

Value channel_scale(Value x, Value per_channel) {
  GradTape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  const Tensor& sv = t.value(per_channel);
  if (xv.rank() != 4 || sv.rank() != 1 || sv.dim(0) != xv.dim(1)) {
    throw std::invalid_argument("channel_scale: expected N x C x H x W input and [C] scale, got " +
                                xv.shape_str() + " and " + sv.shape_str());
  }
  const int n = xv.dim(0), c = xv.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor out(xv.shape());
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const std::int64_t base = (static_cast<std::int64_t>(ni) * c + ci) * plane;
      const double s = sv[ci];
      for (std::int64_t i = 0; i < plane; ++i) out[base + i] = xv[base + i] * s;
    }
  }
  return t.node(std::move(out), {x, per_channel}, [=](GradTape& tt, const Tensor& g) {
    const Tensor& xx = tt.value(x);
    const Tensor& ss = tt.value(per_channel);
    const int nn = xx.dim(0), cc = xx.dim(1);
    const std::int64_t pl = static_cast<std::int64_t>(xx.dim(2)) * xx.dim(3);
    if (tt.needs_grad(x)) {
      Tensor gx(xx.shape());
      for (int ni = 0; ni < nn; ++ni) {
        for (int ci = 0; ci < cc; ++ci) {
          const std::int64_t base = (static_cast<std::int64_t>(ni) * cc + ci) * pl;
          const double s = ss[ci];
          for (std::int64_t i = 0; i < pl; ++i) gx[base + i] = g[base + i] * s;
        }
      }
      tt.accumulate(x, gx);
    }
    if (tt.needs_grad(per_channel)) {
      Tensor gs({cc});
      for (int ni = 0; ni < nn; ++ni) {
        for (int ci = 0; ci < cc; ++ci) {
          const std::int64_t base = (static_cast<std::int64_t>(ni) * cc + ci) * pl;
          double acc = 0.0;
          for (std::int64_t i = 0; i < pl; ++i) acc += g[base + i] * xx[base + i];
          gs[ci] += acc;
        }
      }
      tt.accumulate(per_channel, gs);
    }
  });
}

Value channel_gate(Value x, Value gate) {
  GradTape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  const Tensor& gv = t.value(gate);
  if (xv.rank() != 4 || gv.rank() != 2 || gv.dim(0) != xv.dim(0) || gv.dim(1) != xv.dim(1)) {
    throw std::invalid_argument("channel_gate: expected N x C x H x W input and N x C gate, got " +
                                xv.shape_str() + " and " + gv.shape_str());
  }
  const std::int64_t nc = static_cast<std::int64_t>(xv.dim(0)) * xv.dim(1);
  const std::int64_t plane = static_cast<std::int64_t>(xv.dim(2)) * xv.dim(3);
  Tensor out(xv.shape());
  for (std::int64_t j = 0; j < nc; ++j) {
    const double s = gv[j];
    const std::int64_t base = j * plane;
    for (std::int64_t i = 0; i < plane; ++i) out[base + i] = xv[base + i] * s;
  }
  return t.node(std::move(out), {x, gate}, [=](GradTape& tt, const Tensor& g) {
    const Tensor& xx = tt.value(x);
    const Tensor& gg = tt.value(gate);
    const std::int64_t nc2 = static_cast<std::int64_t>(xx.dim(0)) * xx.dim(1);
    const std::int64_t pl = static_cast<std::int64_t>(xx.dim(2)) * xx.dim(3);
    if (tt.needs_grad(x)) {
      Tensor gx(xx.shape());
      for (std::int64_t j = 0; j < nc2; ++j) {
        const double s = gg[j];
        const std::int64_t base = j * pl;
        for (std::int64_t i = 0; i < pl; ++i) gx[base + i] = g[base + i] * s;
      }
      tt.accumulate(x, gx);
    }
    if (tt.needs_grad(gate)) {
      Tensor gGate(gg.shape());
      for (std::int64_t j = 0; j < nc2; ++j) {
        const std::int64_t base = j * pl;
        double acc = 0.0;
        for (std::int64_t i = 0; i < pl; ++i) acc += g[base + i] * xx[base + i];
        gGate[j] = acc;
      }
      tt.accumulate(gate, gGate);
    }
  });
}

Value gather_levels(const std::vector<Value>& features, std::vector<LevelPoint> points) {
  if (features.empty()) throw std::invalid_argument("gather_levels: no feature maps");
  GradTape& t = tape_of(features.front());
  const int c = t.value(features.front()).dim(1);
  for (const Value& f : features) {
    if (t.value(f).dim(1) != c) {
      throw std::invalid_argument("gather_levels: feature maps disagree on channel count");
    }
  }
  const int k = static_cast<int>(points.size());
  Tensor out({k, c});
  for (int i = 0; i < k; ++i) {
    const LevelPoint& p = points[static_cast<std::size_t>(i)];
    if (p.level_index < 0 || p.level_index >= static_cast<int>(features.size())) {
      throw std::invalid_argument("gather_levels: level index " + std::to_string(p.level_index) +
                                  " out of range");
    }
    Tensor row = maskconver::gather_at(t.value(features[static_cast<std::size_t>(p.level_index)]),
                                       {{p.n, p.y, p.x}});
    for (int ci = 0; ci < c; ++ci) out[static_cast<std::int64_t>(i) * c + ci] = row[ci];
  }
  auto pts = std::make_shared<std::vector<LevelPoint>>(std::move(points));
  return t.node(std::move(out), features, [=](GradTape& tt, const Tensor& g) {
    std::vector<Tensor> grads;
    grads.reserve(features.size());
    for (const Value& f : features) grads.emplace_back(tt.value(f).shape());
    for (std::size_t i = 0; i < pts->size(); ++i) {
      const LevelPoint& p = (*pts)[i];
      Tensor& gf = grads[static_cast<std::size_t>(p.level_index)];
      const int cc = gf.dim(1);
      const int ww = gf.dim(3);
      const std::int64_t plane = static_cast<std::int64_t>(gf.dim(2)) * ww;
      double* base = gf.data() + static_cast<std::int64_t>(p.n) * cc * plane +
                     static_cast<std::int64_t>(p.y) * ww + p.x;
      const double* grow = g.data() + static_cast<std::int64_t>(i) * cc;
      for (int ci = 0; ci < cc; ++ci) base[ci * plane] += grow[ci];
    }
    for (std::size_t fi = 0; fi < features.size(); ++fi) {
      if (tt.needs_grad(features[fi])) tt.accumulate(features[fi], grads[fi]);
    }
  });
}

Value embedding_lookup(Value table, std::vector<int> ids) {
  GradTape& t = tape_of(table);
  const Tensor& tab = t.value(table);
  if (tab.rank() != 2) {
    throw std::invalid_argument("embedding_lookup: table must be rank 2, got " + tab.shape_str());
  }
  const int rows = tab.dim(0), c = tab.dim(1);
  const int k = static_cast<int>(ids.size());
  Tensor out({k, c});
  for (int i = 0; i < k; ++i) {
    const int id = ids[static_cast<std::size_t>(i)];
    if (id < 0 || id >= rows) {
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                  " out of range [0, " + std::to_string(rows) + ")");
    }
    for (int ci = 0; ci < c; ++ci) {
      out[static_cast<std::int64_t>(i) * c + ci] = tab[static_cast<std::int64_t>(id) * c + ci];
    }
  }
  auto ids_p = std::make_shared<std::vector<int>>(std::move(ids));
  return t.node(std::move(out), {table}, [=](GradTape& tt, const Tensor& g) {
    const Tensor& tab2 = tt.value(table);
    Tensor gt(tab2.shape());
    const int cc = tab2.dim(1);
    for (std::size_t i = 0; i < ids_p->size(); ++i) {
      const int id = (*ids_p)[i];
      for (int ci = 0; ci < cc; ++ci) {
        gt[static_cast<std::int64_t>(id) * cc + ci] += g[static_cast<std::int64_t>(i) * cc + ci];
      }
    }
    tt.accumulate(table, gt);
  });
}

Value mask_dot(Value features, Value embeddings, std::vector<int> batch_index) {
  GradTape& t = tape_of(features);
  const Tensor& f = t.value(features);
  const Tensor& e = t.value(embeddings);
  if (f.rank() != 4) throw std::invalid_argument("mask_dot: features must be rank 4, got " + f.shape_str());
  if (e.rank() != 2) throw std::invalid_argument("mask_dot: embeddings must be rank 2, got " + e.shape_str());
  if (e.dim(1) != f.dim(1)) {
    throw std::invalid_argument("mask_dot: embedding width " + std::to_string(e.dim(1)) +
                                " does not match feature channels " + std::to_string(f.dim(1)));
  }
  const int k = e.dim(0);
  if (static_cast<int>(batch_index.size()) != k) {
    throw std::invalid_argument("mask_dot: batch_index size must equal K");
  }
  const int n = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
  const std::int64_t plane = static_cast<std::int64_t>(h) * w;
  Tensor out({k, h, w});
  for (int ki = 0; ki < k; ++ki) {
    const int ni = batch_index[static_cast<std::size_t>(ki)];
    if (ni < 0 || ni >= n) {
      throw std::invalid_argument("mask_dot: batch index " + std::to_string(ni) + " out of range");
    }
    double* op = out.data() + static_cast<std::int64_t>(ki) * plane;
    const double* erow = e.data() + static_cast<std::int64_t>(ki) * c;
    const double* fbase = f.data() + static_cast<std::int64_t>(ni) * c * plane;
    for (int ci = 0; ci < c; ++ci) {
      const double ev = erow[ci];
      const double* fp = fbase + ci * plane;
      for (std::int64_t i = 0; i < plane; ++i) op[i] += ev * fp[i];
    }
  }
  auto bidx = std::make_shared<std::vector<int>>(std::move(batch_index));
  return t.node(std::move(out), {features, embeddings}, [=](GradTape& tt, const Tensor& g) {
    const Tensor& ff = tt.value(features);
    const Tensor& ee = tt.value(embeddings);
    const int cc = ff.dim(1);
    const std::int64_t pl = static_cast<std::int64_t>(ff.dim(2)) * ff.dim(3);
    const int kk = ee.dim(0);
    if (tt.needs_grad(features)) {
      Tensor gf(ff.shape());
      for (int ki = 0; ki < kk; ++ki) {
        const int ni = (*bidx)[static_cast<std::size_t>(ki)];
        const double* gp = g.data() + static_cast<std::int64_t>(ki) * pl;
        const double* erow = ee.data() + static_cast<std::int64_t>(ki) * cc;
        double* fbase = gf.data() + static_cast<std::int64_t>(ni) * cc * pl;
        for (int ci = 0; ci < cc; ++ci) {
          const double ev = erow[ci];
          double* fp = fbase + ci * pl;
          for (std::int64_t i = 0; i < pl; ++i) fp[i] += ev * gp[i];
        }
      }
      tt.accumulate(features, gf);
    }
    if (tt.needs_grad(embeddings)) {
      Tensor ge(ee.shape());
      for (int ki = 0; ki < kk; ++ki) {
        const int ni = (*bidx)[static_cast<std::size_t>(ki)];
        const double* gp = g.data() + static_cast<std::int64_t>(ki) * pl;
        const double* fbase = tt.value(features).data() + static_cast<std::int64_t>(ni) * cc * pl;
        double* erow = ge.data() + static_cast<std::int64_t>(ki) * cc;
        for (int ci = 0; ci < cc; ++ci) {
          const double* fp = fbase + ci * pl;
          double acc = 0.0;
          for (std::int64_t i = 0; i < pl; ++i) acc += fp[i] * gp[i];
          erow[ci] += acc;
        }
      }
      tt.accumulate(embeddings, ge);
    }
  });
}

}  // namespace ops

}  // namespace maskconver
