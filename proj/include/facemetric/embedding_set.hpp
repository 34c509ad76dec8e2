#pragma once

#include <span>
#include <string>
#include <vector>

namespace facemetric {

// Dense row-major matrix of d-dimensional embeddings.
struct EmbeddingMatrix {
  int rows = 0;
  int dim = 0;
  std::vector<double> data;

  static EmbeddingMatrix zeros(int rows, int dim);

  std::span<const double> row(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(dim),
            static_cast<std::size_t>(dim)};
  }
  std::span<double> row(int i) {
    return {data.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(dim),
            static_cast<std::size_t>(dim)};
  }
  void set_row(int i, std::span<const double> v);
};

// Embedding matrix with aligned identity labels and sample ids.
struct EmbeddingSet {
  EmbeddingMatrix matrix;
  std::vector<std::string> labels;
  std::vector<int> ids;

  int size() const { return matrix.rows; }
  int dim() const { return matrix.dim; }

  // Alignment and finiteness; throws std::invalid_argument on violation.
  void validate() const;
};

}  // namespace facemetric
