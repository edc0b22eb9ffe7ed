#include "maskconver/params.hpp"

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "maskconver/error.hpp"
#include "maskconver/tensor_io.hpp"

namespace maskconver {

namespace fs = std::filesystem;
using nlohmann::json;

void ParamSet::add(const std::string& name, Tensor t) {
  if (tensors_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
  tensors_.emplace(name, std::move(t));
}

Tensor& ParamSet::at(const std::string& name) {
  auto it = tensors_.find(name);
  if (it == tensors_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParamSet::at(const std::string& name) const {
  return const_cast<ParamSet*>(this)->at(name);
}

std::int64_t ParamSet::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [name, t] : tensors_) n += t.numel();
  return n;
}

BoundParams::BoundParams(GradTape& tape, const ParamSet& params, bool requires_grad) {
  for (const auto& [name, t] : params.tensors()) {
    values_.emplace(name, tape.leaf(t, requires_grad));
  }
}

Value BoundParams::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return it->second;
}

void save_params(const std::string& dir, const ParamSet& params) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  json manifest;
  manifest["tensors"] = json::object();
  for (const auto& [name, t] : params.tensors()) {
    const std::string file = name + ".mct";
    save_mct((fs::path(dir) / file).string(), t, Dtype::Float32);
    manifest["tensors"][name] = file;
  }
  std::ofstream f(fs::path(dir) / "manifest.json");
  if (!f) throw DataError("cannot write manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

ParamSet load_params(const std::string& dir) {
  std::ifstream f(fs::path(dir) / "manifest.json");
  if (!f) throw DataError("cannot open " + dir + "/manifest.json");
  json manifest;
  try {
    f >> manifest;
  } catch (const json::exception& e) {
    throw DataError(dir + "/manifest.json: " + e.what());
  }
  ParamSet out;
  if (!manifest.contains("tensors") || !manifest["tensors"].is_object()) {
    throw DataError(dir + "/manifest.json: missing \"tensors\" object");
  }
  for (const auto& [name, file] : manifest["tensors"].items()) {
    out.add(name, load_mct((fs::path(dir) / file.get<std::string>()).string()));
  }
  return out;
}

}  // namespace maskconver
