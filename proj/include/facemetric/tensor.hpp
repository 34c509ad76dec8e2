#pragma once

#include <string>
#include <vector>

namespace facemetric {

// n-dimensional row-major array of doubles with an optional gradient buffer.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty, or exactly data.size() elements
  bool requires_grad = false;

  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from(std::vector<int> shape, std::vector<double> values);
  static Tensor scalar(double value);

  int numel() const { return static_cast<int>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }

  void ensure_grad();  // allocate zero-filled gradient buffer if absent
  void zero_grad();
  bool all_finite() const;
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Product of extents; throws on non-positive extents.
long long numel_of(const std::vector<int>& shape);

// "3x8x32x32" style rendering for error messages.
std::string shape_str(const std::vector<int>& shape);

}  // namespace facemetric
