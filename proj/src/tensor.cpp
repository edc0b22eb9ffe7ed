#include "maskconver/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

#include "maskconver/error.hpp"

namespace maskconver {

namespace {
std::atomic<std::int64_t> g_alloc_count{0};
}  // namespace

std::int64_t tensor_alloc_count() { return g_alloc_count.load(); }

std::int64_t shape_numel(const std::vector<int>& shape) {
  std::int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw std::invalid_argument("tensor dimension must be non-negative, got " + std::to_string(d));
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  values_.resize(static_cast<std::size_t>(shape_numel(shape_)), 0.0);
  g_alloc_count.fetch_add(1, std::memory_order_relaxed);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  if (shape_numel(shape_) != static_cast<std::int64_t>(values_.size())) {
    throw std::invalid_argument("tensor shape " + shape_str() + " does not match " +
                                std::to_string(values_.size()) + " values");
  }
  g_alloc_count.fetch_add(1, std::memory_order_relaxed);
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t(std::move(shape));
  for (auto& v : t.values_) v = value;
  return t;
}

double& Tensor::at(std::initializer_list<int> idx) {
  if (static_cast<int>(idx.size()) != rank()) {
    throw std::invalid_argument("index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                                std::to_string(rank()));
  }
  std::int64_t flat = 0;
  int axis = 0;
  for (int i : idx) {
    if (i < 0 || i >= shape_[static_cast<std::size_t>(axis)]) {
      throw std::invalid_argument("index " + std::to_string(i) + " out of range for axis " +
                                  std::to_string(axis) + " of shape " + shape_str());
    }
    flat = flat * shape_[static_cast<std::size_t>(axis)] + i;
    ++axis;
  }
  return values_[static_cast<std::size_t>(flat)];
}

double Tensor::at(std::initializer_list<int> idx) const {
  return const_cast<Tensor*>(this)->at(idx);
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ", ";
    os << shape_[i];
  }
  os << "]";
  return os.str();
}

bool Tensor::all_finite() const {
  for (double v : values_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::check_finite(const char* what) const {
  if (!all_finite()) {
    throw NumericError(std::string(what) + ": tensor contains a non-finite value");
  }
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

}  // namespace maskconver
