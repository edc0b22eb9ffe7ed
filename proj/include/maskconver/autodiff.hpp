#pragma once

#include <functional>
#include <vector>

#include "maskconver/tensor.hpp"

namespace maskconver {

class GradTape;

// Handle to a node on a GradTape. Cheap to copy; invalid when default
// constructed.
struct Value {
  GradTape* tape = nullptr;
  int index = -1;
  bool valid() const { return tape != nullptr && index >= 0; }
};

// Define-by-run reverse-mode tape. One tape per training step, single
// writer. Each recorded operation stores its forward result and a
// vector-Jacobian-product closure that pushes the incoming gradient to the
// operation's parents.
class GradTape {
 public:
  using VjpFn = std::function<void(GradTape&, const Tensor& grad_out)>;

  Value leaf(Tensor value, bool requires_grad);
  Value constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op node. `vjp` may be empty when no parent needs gradients.
  Value node(Tensor value, const std::vector<Value>& parents, VjpFn vjp);

  const Tensor& value(Value v) const;
  bool needs_grad(Value v) const;

  // Runs the backward sweep from a scalar loss. May be called once per tape.
  void backward(Value scalar_loss);

  bool has_grad(Value v) const;
  const Tensor& grad(Value v) const;             // throws if absent
  Tensor grad_or_zero(Value v) const;            // zero tensor of value shape

  // For VJP closures: accumulate a gradient contribution into a parent.
  void accumulate(Value v, const Tensor& g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    VjpFn vjp;       // empty for leaves/constants and grad-free subgraphs
    bool needs = false;
  };
  void check(Value v) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  bool ran_backward_ = false;
};

// True when any of the values requires gradients; op implementations use it
// to skip building VJP closures on inference-only paths.
bool any_needs_grad(const std::vector<Value>& vs);

}  // namespace maskconver
