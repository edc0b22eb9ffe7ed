#include "maskconver/autodiff.hpp"

#include <stdexcept>

namespace maskconver {

Value GradTape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.needs = requires_grad;
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

Value GradTape::node(Tensor value, const std::vector<Value>& parents, VjpFn vjp) {
  bool needs = false;
  for (const Value& p : parents) {
    check(p);
    if (p.tape != this) throw std::invalid_argument("op inputs live on different tapes");
    needs = needs || nodes_[static_cast<std::size_t>(p.index)].needs;
  }
  Node n;
  n.value = std::move(value);
  n.needs = needs;
  if (needs) n.vjp = std::move(vjp);
  nodes_.push_back(std::move(n));
  return Value{this, static_cast<int>(nodes_.size()) - 1};
}

void GradTape::check(Value v) const {
  if (!v.valid() || v.tape != this || v.index >= static_cast<int>(nodes_.size())) {
    throw std::invalid_argument("invalid tape value handle");
  }
}

const Tensor& GradTape::value(Value v) const {
  check(v);
  return nodes_[static_cast<std::size_t>(v.index)].value;
}

bool GradTape::needs_grad(Value v) const {
  check(v);
  return nodes_[static_cast<std::size_t>(v.index)].needs;
}

void GradTape::backward(Value scalar_loss) {
  check(scalar_loss);
  if (ran_backward_) throw std::logic_error("backward already ran on this tape");
  ran_backward_ = true;
  const Tensor& loss = value(scalar_loss);
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " + loss.shape_str());
  }
  grads_.assign(nodes_.size(), Tensor{});
  grads_[static_cast<std::size_t>(scalar_loss.index)] = Tensor::ones(loss.shape());
  for (int i = scalar_loss.index; i >= 0; --i) {
    auto& g = grads_[static_cast<std::size_t>(i)];
    if (g.empty()) continue;
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    if (n.vjp) n.vjp(*this, g);
  }
}

bool GradTape::has_grad(Value v) const {
  check(v);
  return !grads_.empty() && !grads_[static_cast<std::size_t>(v.index)].empty();
}

const Tensor& GradTape::grad(Value v) const {
  check(v);
  if (!has_grad(v)) throw std::logic_error("no gradient recorded for this value");
  return grads_[static_cast<std::size_t>(v.index)];
}

Tensor GradTape::grad_or_zero(Value v) const {
  if (has_grad(v)) return grads_[static_cast<std::size_t>(v.index)];
  return Tensor(value(v).shape());
}

void GradTape::accumulate(Value v, const Tensor& g) {
  check(v);
  if (!nodes_[static_cast<std::size_t>(v.index)].needs) return;
  auto& slot = grads_[static_cast<std::size_t>(v.index)];
  if (slot.empty()) {
    slot = g;
    return;
  }
  if (!slot.same_shape(g)) {
    throw std::logic_error("gradient shape mismatch: " + slot.shape_str() + " vs " + g.shape_str());
  }
  double* d = slot.data();
  const double* s = g.data();
  for (std::int64_t i = 0; i < slot.numel(); ++i) d[i] += s[i];
}

bool any_needs_grad(const std::vector<Value>& vs) {
  for (const Value& v : vs) {
    if (v.valid() && v.tape->needs_grad(v)) return true;
  }
  return false;
}

}  // namespace maskconver
