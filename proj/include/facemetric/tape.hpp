#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "facemetric/tensor.hpp"

namespace facemetric {

class Tape;

// Handle to a node on a Tape.
struct Value {
  Tape* tape = nullptr;
  std::size_t id = 0;

  bool valid() const { return tape != nullptr; }
  const Tensor& tensor() const;
  const std::vector<int>& shape() const;
  double scalar() const;
};

// Ordered record of executed operations. Nodes are appended in execution
// order, so every node's inputs precede it and a single reverse traversal
// propagates adjoints to every grad-tracked tensor reachable from the loss.
class Tape {
 public:
  // Propagates the node's adjoint into its parents' adjoints.
  using Pull = std::function<void(Tape&, std::size_t)>;

  // Constant leaf; never differentiated.
  Value input(Tensor t);

  // Leaf bound to a persistent tensor (t.requires_grad must be set).
  // backward() adds the node adjoint into t.grad.
  Value param(Tensor& t);

  // Appends an operation result. Parents must already live on this tape.
  Value emit(Tensor value, const std::vector<std::size_t>& parents, Pull pull);

  const Tensor& tensor(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }

  // Adjoint buffer, allocated zero-filled on first use. Callers must check
  // needs_grad(id) first; grad-free nodes never get a buffer.
  std::vector<double>& adjoint(std::size_t id);
  bool has_adjoint(std::size_t id) const { return !nodes_[id].adj.empty(); }

  // Reverse sweep from a scalar loss. Accumulates into bound parameters'
  // grad buffers (callers zero those at the start of an optimizer step).
  void backward(Value loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<double> adj;
    bool needs_grad = false;
    Tensor* bound = nullptr;
    Pull pull;
  };
  std::vector<Node> nodes_;
};

}  // namespace facemetric
