#include "facemetric/tensor.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace facemetric {

long long numel_of(const std::vector<int>& shape) {
  long long n = 1;
  for (int d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor shape has non-positive extent " + shape_str(shape));
    n *= d;
    if (n > std::numeric_limits<int>::max()) throw std::invalid_argument("tensor too large: " + shape_str(shape));
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  if (shape.empty()) return "scalar";
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += 'x';
    s += std::to_string(shape[i]);
  }
  return s;
}

Tensor Tensor::zeros(std::vector<int> shape) {
  Tensor t;
  const long long n = numel_of(shape);
  t.shape = std::move(shape);
  t.data.assign(static_cast<std::size_t>(n), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.data) v = value;
  return t;
}

Tensor Tensor::from(std::vector<int> shape, std::vector<double> values) {
  const long long n = numel_of(shape);
  if (n != static_cast<long long>(values.size())) {
    throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.shape = std::move(shape);
  t.data = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

void Tensor::ensure_grad() {
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
}

void Tensor::zero_grad() { grad.assign(data.size(), 0.0); }

bool Tensor::all_finite() const {
  for (double v : data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace facemetric
