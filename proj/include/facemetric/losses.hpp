#pragma once

#include <vector>

#include "facemetric/embedding_set.hpp"
#include "facemetric/ops.hpp"

namespace facemetric {

// Non-negative, finite distance margin shared by both losses.
struct Margin {
  explicit Margin(double v);
  double value;
};

// Y = 0 when the two samples share an identity, 1 otherwise.
struct PairExample {
  int i = 0;
  int j = 0;
  int y = 0;
};

struct TripletExample {
  int anchor = 0;
  int positive = 0;
  int negative = 0;
};

// max(d(a,p) - d(a,n) + margin, 0) with d the Euclidean distance.
Value triplet_loss(Value anchor, Value positive, Value negative, Margin margin);

// (1-Y)/2 * d^2 + Y/2 * max(0, margin - d)^2.
Value contrastive_loss(Value a, Value b, int y, Margin margin);

// Mean of per-example losses over embeddings living on one tape.
Value batch_loss(const std::vector<Value>& embeddings, const std::vector<TripletExample>& examples,
                 Margin margin);
Value batch_loss(const std::vector<Value>& embeddings, const std::vector<PairExample>& examples,
                 Margin margin);

// Tape-free forms over plain embedding rows: mean loss plus the gradient
// with respect to every row.
struct BatchLossResult {
  double loss = 0.0;
  EmbeddingMatrix grads;
};
BatchLossResult batch_loss(const EmbeddingMatrix& embeddings,
                           const std::vector<TripletExample>& examples, Margin margin);
BatchLossResult batch_loss(const EmbeddingMatrix& embeddings,
                           const std::vector<PairExample>& examples, Margin margin);

}  // namespace facemetric
