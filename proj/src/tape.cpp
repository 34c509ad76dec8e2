#include "facemetric/tape.hpp"

#include <stdexcept>

namespace facemetric {

const Tensor& Value::tensor() const {
  if (!valid()) throw std::invalid_argument("use of empty Value");
  return tape->tensor(id);
}

const std::vector<int>& Value::shape() const { return tensor().shape; }

double Value::scalar() const {
  const Tensor& t = tensor();
  if (t.numel() != 1) throw std::invalid_argument("Value::scalar on tensor " + shape_str(t.shape));
  return t.data[0];
}

Value Tape::input(Tensor t) {
  Node n;
  n.value = std::move(t);
  n.needs_grad = false;
  nodes_.push_back(std::move(n));
  return Value{this, nodes_.size() - 1};
}

Value Tape::param(Tensor& t) {
  if (!t.requires_grad) throw std::invalid_argument("Tape::param: tensor does not require grad");
  Node n;
  n.value = t;  // copy of the current data; grads flow back to t.grad
  n.value.grad.clear();
  n.needs_grad = true;
  n.bound = &t;
  nodes_.push_back(std::move(n));
  return Value{this, nodes_.size() - 1};
}

Value Tape::emit(Tensor value, const std::vector<std::size_t>& parents, Pull pull) {
  Node n;
  n.value = std::move(value);
  for (std::size_t p : parents) {
    if (p >= nodes_.size()) throw std::logic_error("Tape::emit: parent does not precede node");
    if (nodes_[p].needs_grad) n.needs_grad = true;
  }
  if (n.needs_grad) n.pull = std::move(pull);
  nodes_.push_back(std::move(n));
  return Value{this, nodes_.size() - 1};
}

std::vector<double>& Tape::adjoint(std::size_t id) {
  Node& n = nodes_[id];
  if (!n.needs_grad) throw std::logic_error("Tape::adjoint on grad-free node");
  if (n.adj.empty()) n.adj.assign(n.value.data.size(), 0.0);
  return n.adj;
}

void Tape::backward(Value loss) {
  if (loss.tape != this) throw std::invalid_argument("backward: loss lives on a different tape");
  const Tensor& lt = tensor(loss.id);
  if (lt.numel() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(lt.shape));
  }
  if (!nodes_[loss.id].needs_grad) return;  // loss is a constant; nothing reachable

  adjoint(loss.id)[0] += 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.needs_grad || n.adj.empty()) continue;
    if (n.pull) n.pull(*this, i);
    if (n.bound != nullptr) {
      n.bound->ensure_grad();
      for (std::size_t k = 0; k < n.adj.size(); ++k) n.bound->grad[k] += n.adj[k];
    }
  }
}

}  // namespace facemetric
