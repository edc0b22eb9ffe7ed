#include "maskconver/cost.hpp"

#include <stdexcept>

namespace maskconver {

int conv_out_size(int in, int kernel, int stride, int padding) {
  const int out = (in + 2 * padding - kernel) / stride + 1;
  if (out < 1) {
    throw std::invalid_argument("kernel " + std::to_string(kernel) + " does not fit extent " +
                                std::to_string(in) + " with padding " + std::to_string(padding));
  }
  return out;
}

Shape4 NetDesc::conv(const std::string& name, Shape4 in, int c_out, int kernel, int stride,
                     int padding, int groups, bool bias) {
  if (in.c % groups != 0 || c_out % groups != 0) {
    throw std::invalid_argument(name + ": channels not divisible by groups");
  }
  Shape4 out{in.n, c_out, conv_out_size(in.h, kernel, stride, padding),
             conv_out_size(in.w, kernel, stride, padding)};
  const std::int64_t cin_g = in.c / groups;
  CostReport cost;
  cost.params = static_cast<std::int64_t>(kernel) * kernel * cin_g * c_out + (bias ? c_out : 0);
  cost.flops = 2LL * kernel * kernel * cin_g * c_out * out.h * out.w * out.n;
  entries_.push_back({name, cost});
  return out;
}

Shape4 NetDesc::norm(const std::string& name, Shape4 in) {
  entries_.push_back({name, {2LL * in.c, 5LL * in.numel()}});
  return in;
}

Shape4 NetDesc::act(const std::string& name, Shape4 in) {
  entries_.push_back({name, {0, 5LL * in.numel()}});
  return in;
}

void NetDesc::linear(const std::string& name, std::int64_t rows, int d_in, int d_out, bool bias) {
  CostReport cost;
  cost.params = static_cast<std::int64_t>(d_in) * d_out + (bias ? d_out : 0);
  cost.flops = 2LL * d_in * d_out * rows;
  entries_.push_back({name, cost});
}

Shape4 NetDesc::resize(const std::string& name, Shape4 in, int out_h, int out_w) {
  Shape4 out{in.n, in.c, out_h, out_w};
  entries_.push_back({name, {0, 8LL * out.numel()}});
  return out;
}

Shape4 NetDesc::eltwise(const std::string& name, Shape4 in) {
  entries_.push_back({name, {0, in.numel()}});
  return in;
}

Shape4 NetDesc::per_channel_scale(const std::string& name, Shape4 in) {
  entries_.push_back({name, {in.c, in.numel()}});
  return in;
}

Shape4 NetDesc::max_pool(const std::string& name, Shape4 in, int kernel, int stride, int padding) {
  Shape4 out{in.n, in.c, conv_out_size(in.h, kernel, stride, padding),
             conv_out_size(in.w, kernel, stride, padding)};
  entries_.push_back({name, {0, static_cast<std::int64_t>(kernel) * kernel * out.numel()}});
  return out;
}

Shape4 NetDesc::global_pool(const std::string& name, Shape4 in) {
  entries_.push_back({name, {0, in.numel()}});
  return Shape4{in.n, in.c, 1, 1};
}

void NetDesc::table(const std::string& name, std::int64_t rows, std::int64_t cols) {
  entries_.push_back({name, {rows * cols, 0}});
}

void NetDesc::charge(const std::string& name, CostReport extra) {
  entries_.push_back({name, extra});
}

CostReport NetDesc::total() const {
  CostReport t;
  for (const auto& e : entries_) t += e.cost;
  return t;
}

}  // namespace maskconver
