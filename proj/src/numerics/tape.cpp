#include "deshadow/numerics/tape.hpp"

#include "deshadow/errors.hpp"

namespace deshadow::ad {

const Tensor& Gradients::operator[](Var v) const {
  if (!v.valid() || v.id >= grads_.size() || grads_[v.id].empty()) {
    throw ContractViolation("no gradient recorded for this value (not a gradient-requiring leaf)");
  }
  return grads_[v.id];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  n.leaf = true;
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward) {
  Node n;
  n.value = std::move(value);
  n.inputs.reserve(inputs.size());
  for (Var v : inputs) {
    const Node& in = node(v);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || in.requires_grad;
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

const Tape::Node& Tape::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) throw ContractViolation("value is not on this tape");
  return nodes_[v.id];
}

const Tensor& Tape::value(Var v) const { return node(v).value; }

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Gradients Tape::backward(Var root) const {
  const Node& r = node(root);
  require(r.value.size() == 1, "backward root must be a scalar");
  std::vector<Tensor> grads(nodes_.size());
  grads[root.id] = Tensor(r.value.shape(), 1.0);

  std::vector<const Tensor*> in_values;
  std::vector<Tensor*> in_grads;
  for (std::size_t id = root.id + 1; id-- > 0;) {
    const Node& n = nodes_[id];
    if (grads[id].empty() || !n.backward) continue;
    in_values.clear();
    in_grads.clear();
    for (std::size_t in : n.inputs) {
      const Node& src = nodes_[in];
      in_values.push_back(&src.value);
      if (src.requires_grad) {
        if (grads[in].empty()) grads[in] = Tensor::zeros_like(src.value);
        in_grads.push_back(&grads[in]);
      } else {
        in_grads.push_back(nullptr);
      }
    }
    n.backward(BackwardArgs{grads[id], n.value, in_values, in_grads});
    grads[id] = Tensor();
  }
  for (std::size_t id = 0; id < nodes_.size(); ++id) {
    const Node& n = nodes_[id];
    if (n.leaf && n.requires_grad) {
      if (grads[id].empty() && !n.value.empty()) grads[id] = Tensor::zeros_like(n.value);
    } else {
      grads[id] = Tensor();
    }
  }
  return Gradients(std::move(grads));
}

}  // namespace deshadow::ad
