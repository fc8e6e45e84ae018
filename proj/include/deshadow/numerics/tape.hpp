#pragma once

#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "deshadow/numerics/tensor.hpp"

namespace deshadow::ad {

// Handle to a value recorded on a Tape.
struct Var {
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t id = kNone;
  bool valid() const { return id != kNone; }
};

struct BackwardArgs {
  const Tensor& grad_out;
  const Tensor& out;
  std::span<const Tensor* const> in;
  // nullptr for inputs that do not require a gradient.
  std::span<Tensor* const> grad_in;
};

using BackwardFn = std::function<void(const BackwardArgs&)>;

// Gradients of a scalar root with respect to the leaves of a tape.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> grads) : grads_(std::move(grads)) {}

  // Gradient of the root with respect to v; throws for values that are not
  // gradient-requiring leaves.
  const Tensor& operator[](Var v) const;

 private:
  std::vector<Tensor> grads_;
};

// Append-only record of primitive applications. A tape belongs to one thread.
// Backward visits nodes in strict reverse recording order, so accumulation
// order is a pure function of the graph.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  Var leaf(Tensor value, bool requires_grad = true);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // Records an op result. The backward function is dropped when no input
  // requires a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  Gradients backward(Var root) const;

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    bool leaf = false;
  };
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
};

}  // namespace deshadow::ad
