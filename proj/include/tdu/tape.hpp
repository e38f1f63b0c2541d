#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "tdu/tensor.hpp"

namespace tdu {

// Reverse-mode tape. Nodes are appended in execution order, so every input
// id precedes its consumers; backward() is a single reverse sweep that
// visits each node exactly once.
template <typename T>
class Tape {
 public:
  // Receives the node's own forward value alongside the incoming gradient so
  // ops like softmax can reuse their output without a saved copy.
  using BackwardFn =
      std::function<void(Tape<T>&, const Tensor<T>& self_value, const Tensor<T>& grad_out)>;

  struct Node {
    const char* op;
    std::vector<int> inputs;
    Tensor<T> value;
    Tensor<T> grad;       // lazily allocated
    BackwardFn backward;  // empty for leaves
  };

  int push_leaf(Tensor<T> value) {
    return push("leaf", {}, std::move(value), BackwardFn{});
  }

  int push(const char* op, std::vector<int> inputs, Tensor<T> value,
           BackwardFn backward) {
    int id = static_cast<int>(nodes_.size());
    for (int in : inputs) {
      if (in < 0 || in >= id) {
        throw ValueError(std::string("tape op '") + op +
                         "' references node out of order");
      }
    }
    check_finite(op, value);
    Node node;
    node.op = op;
    node.inputs = std::move(inputs);
    node.value = std::move(value);
    node.backward = std::move(backward);
    nodes_.push_back(std::move(node));
    return id;
  }

  const Tensor<T>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }

  // Gradient buffer, allocated with zeros on first access.
  Tensor<T>& grad(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.data.empty()) {
      n.grad = Tensor<T>::zeros(n.value.shape);
    }
    return n.grad;
  }

  // Seeds d(loss)/d(loss) = 1 and propagates to every reachable node.
  void backward(int loss_id) {
    if (loss_id < 0 || loss_id >= size()) throw ValueError("backward: bad node id");
    if (value(loss_id).numel() != 1) {
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(value(loss_id).shape));
    }
    grad(loss_id).data[0] = T(1);
    for (int id = loss_id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.backward) continue;
      if (n.grad.data.empty()) continue;  // unreachable from the loss
      n.backward(*this, n.value, n.grad);
    }
  }

  int size() const { return static_cast<int>(nodes_.size()); }

  void reset() { nodes_.clear(); }

 private:
  std::vector<Node> nodes_;
};

// Lightweight handle to a tape node.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& val() const { return tape->value(id); }
};

template <typename T>
Var<T> leaf(Tape<T>& tape, Tensor<T> value) {
  return Var<T>{&tape, tape.push_leaf(std::move(value))};
}

}  // namespace tdu
