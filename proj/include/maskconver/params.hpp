#pragma once

#include <map>
#include <string>

#include "maskconver/autodiff.hpp"
#include "maskconver/tensor.hpp"

namespace maskconver {

// Named collection of parameter tensors. Names are hierarchical
// ("decoder.l5.block0.dw.weight"); std::map keeps iteration deterministic for
// the optimizer, EMA and serialization.
class ParamSet {
 public:
  void add(const std::string& name, Tensor t);
  bool has(const std::string& name) const { return tensors_.count(name) != 0; }
  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;

  std::map<std::string, Tensor>& tensors() { return tensors_; }
  const std::map<std::string, Tensor>& tensors() const { return tensors_; }

  std::size_t size() const { return tensors_.size(); }
  std::int64_t total_elements() const;

 private:
  std::map<std::string, Tensor> tensors_;
};

// Per-tape binding of a ParamSet: one leaf per parameter.
class BoundParams {
 public:
  BoundParams(GradTape& tape, const ParamSet& params, bool requires_grad);
  Value at(const std::string& name) const;
  const std::map<std::string, Value>& values() const { return values_; }

 private:
  std::map<std::string, Value> values_;
};

// Prefix-scoped view used by block forward functions.
struct ParamView {
  const BoundParams* bound = nullptr;
  std::string prefix;

  Value operator[](const std::string& suffix) const { return bound->at(prefix + suffix); }
  ParamView sub(const std::string& name) const { return ParamView{bound, prefix + name + "."}; }
};

// Writes one MCT1 float32 file per tensor plus manifest.json mapping names to
// file names. `load_params` rejects manifests whose tensors are missing.
void save_params(const std::string& dir, const ParamSet& params);
ParamSet load_params(const std::string& dir);

}  // namespace maskconver
