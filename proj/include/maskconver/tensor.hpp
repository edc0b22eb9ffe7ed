#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

namespace maskconver {

// Dense row-major tensor of doubles. Feature maps use the N x C x H x W
// layout. Dimension sizes are normally positive; a zero dimension is allowed
// only to represent empty results (e.g. gathering zero locations).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape);  // zero-filled
  Tensor(std::vector<int> shape, std::vector<double> values);

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, double value);
  static Tensor ones(std::vector<int> shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(values_.size()); }
  bool empty() const { return values_.empty() && shape_.empty(); }

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  double& operator[](std::int64_t i) { return values_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return values_[static_cast<std::size_t>(i)]; }

  // Slow convenience accessor for tests and oracles.
  double& at(std::initializer_list<int> idx);
  double at(std::initializer_list<int> idx) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

  bool all_finite() const;
  // Throws NumericError naming `what` if any value is NaN/Inf. Active only in
  // debug builds when called through MASKCONVER_CHECK_FINITE paths.
  void check_finite(const char* what) const;

 private:
  std::vector<int> shape_;
  std::vector<double> values_;
};

// Count of tensor buffer allocations since process start. The profiler is
// pure shape arithmetic; tests pin that by snapshotting this counter.
std::int64_t tensor_alloc_count();

std::int64_t shape_numel(const std::vector<int>& shape);

Tensor zeros_like(const Tensor& t);

}  // namespace maskconver
