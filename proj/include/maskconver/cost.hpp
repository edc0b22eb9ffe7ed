#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace maskconver {

// Analytic parameter / FLOP counts. Multiply-add counts as 2 FLOPs.
struct CostReport {
  std::int64_t params = 0;
  std::int64_t flops = 0;

  CostReport& operator+=(const CostReport& o) {
    params += o.params;
    flops += o.flops;
    return *this;
  }
  friend CostReport operator+(CostReport a, const CostReport& b) { return a += b; }
  friend bool operator==(const CostReport& a, const CostReport& b) {
    return a.params == b.params && a.flops == b.flops;
  }
};

struct Shape4 {
  int n = 1, c = 0, h = 0, w = 0;
  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
};

int conv_out_size(int in, int kernel, int stride, int padding);

// Shape-level description of a network component. Append-only; every method
// adds one primitive entry, charges its cost and returns the propagated
// shape. Never allocates tensor storage, so profiling stays pure arithmetic.
//
// Cost conventions:
//   conv    2 * Kh * Kw * (Cin/groups) * Cout * Hout * Wout flops
//   linear  2 * Din * Dout * rows flops
//   norm / activation   5 flops per element
//   elementwise add/mul 1 flop per element
//   bilinear resize     8 flops per output element
//   max pool            K*K flops per output element
//   global avg pool     1 flop per input element
class NetDesc {
 public:
  struct Entry {
    std::string name;
    CostReport cost;
  };

  explicit NetDesc(std::string name) : name_(std::move(name)) {}

  Shape4 conv(const std::string& name, Shape4 in, int c_out, int kernel, int stride, int padding,
              int groups, bool bias);
  Shape4 norm(const std::string& name, Shape4 in);  // 2 params per channel
  Shape4 act(const std::string& name, Shape4 in);
  void linear(const std::string& name, std::int64_t rows, int d_in, int d_out, bool bias);
  Shape4 resize(const std::string& name, Shape4 in, int out_h, int out_w);
  Shape4 eltwise(const std::string& name, Shape4 in);             // add or mul, no params
  Shape4 per_channel_scale(const std::string& name, Shape4 in);   // layer scale: C params
  Shape4 max_pool(const std::string& name, Shape4 in, int kernel, int stride, int padding);
  Shape4 global_pool(const std::string& name, Shape4 in);         // -> N x C x 1 x 1
  void table(const std::string& name, std::int64_t rows, std::int64_t cols);  // params only
  void charge(const std::string& name, CostReport extra);

  const std::string& name() const { return name_; }
  const std::vector<Entry>& entries() const { return entries_; }
  CostReport total() const;

 private:
  std::string name_;
  std::vector<Entry> entries_;
};

}  // namespace maskconver
