#include "facemetric/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace facemetric {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

void check_index(int idx, int n, const char* what) {
  if (idx < 0 || idx >= n) {
    fail("batch_loss: " + std::string(what) + " index " + std::to_string(idx) +
         " out of range for " + std::to_string(n) + " embeddings");
  }
}

std::vector<double> row_vec(const EmbeddingMatrix& m, int i) {
  auto r = m.row(i);
  return {r.begin(), r.end()};
}

}  // namespace

Margin::Margin(double v) : value(v) {
  if (!(v >= 0.0) || !std::isfinite(v)) {
    fail("margin must be a finite non-negative value, got " + std::to_string(v));
  }
}

Value triplet_loss(Value anchor, Value positive, Value negative, Margin margin) {
  Value d_ap = euclidean_distance(anchor, positive);
  Value d_an = euclidean_distance(anchor, negative);
  // d(a,p) - d(a,n) + margin, hinged at zero
  return relu(add(d_ap, affine(d_an, -1.0, margin.value)));
}

Value contrastive_loss(Value a, Value b, int y, Margin margin) {
  if (y != 0 && y != 1) fail("contrastive_loss: Y must be 0 (same) or 1 (different), got " + std::to_string(y));
  Value d = euclidean_distance(a, b);
  if (y == 0) {
    return affine(mul(d, d), 0.5, 0.0);
  }
  Value hinge = relu(affine(d, -1.0, margin.value));  // max(0, margin - d)
  return affine(mul(hinge, hinge), 0.5, 0.0);
}

Value batch_loss(const std::vector<Value>& embeddings, const std::vector<TripletExample>& examples,
                 Margin margin) {
  if (examples.empty()) fail("batch_loss: empty triplet list has no mean");
  const int n = static_cast<int>(embeddings.size());
  std::vector<Value> terms;
  terms.reserve(examples.size());
  for (const TripletExample& t : examples) {
    check_index(t.anchor, n, "anchor");
    check_index(t.positive, n, "positive");
    check_index(t.negative, n, "negative");
    if (t.anchor == t.positive) fail("batch_loss: triplet anchor equals positive");
    terms.push_back(triplet_loss(embeddings[static_cast<std::size_t>(t.anchor)],
                                 embeddings[static_cast<std::size_t>(t.positive)],
                                 embeddings[static_cast<std::size_t>(t.negative)], margin));
  }
  return mean_of(terms);
}

Value batch_loss(const std::vector<Value>& embeddings, const std::vector<PairExample>& examples,
                 Margin margin) {
  if (examples.empty()) fail("batch_loss: empty pair list has no mean");
  const int n = static_cast<int>(embeddings.size());
  std::vector<Value> terms;
  terms.reserve(examples.size());
  for (const PairExample& p : examples) {
    check_index(p.i, n, "pair");
    check_index(p.j, n, "pair");
    if (p.i == p.j) fail("batch_loss: pair references one sample twice");
    terms.push_back(contrastive_loss(embeddings[static_cast<std::size_t>(p.i)],
                                     embeddings[static_cast<std::size_t>(p.j)], p.y, margin));
  }
  return mean_of(terms);
}

BatchLossResult batch_loss(const EmbeddingMatrix& embeddings,
                           const std::vector<TripletExample>& examples, Margin margin) {
  if (examples.empty()) fail("batch_loss: empty triplet list has no mean");
  BatchLossResult out;
  out.grads = EmbeddingMatrix::zeros(embeddings.rows, embeddings.dim);
  const double w = 1.0 / static_cast<double>(examples.size());
  for (const TripletExample& t : examples) {
    check_index(t.anchor, embeddings.rows, "anchor");
    check_index(t.positive, embeddings.rows, "positive");
    check_index(t.negative, embeddings.rows, "negative");
    const auto a = embeddings.row(t.anchor);
    const auto p = embeddings.row(t.positive);
    const auto nn = embeddings.row(t.negative);
    double d_ap = 0.0, d_an = 0.0;
    for (int k = 0; k < embeddings.dim; ++k) {
      d_ap += (a[static_cast<std::size_t>(k)] - p[static_cast<std::size_t>(k)]) *
              (a[static_cast<std::size_t>(k)] - p[static_cast<std::size_t>(k)]);
      d_an += (a[static_cast<std::size_t>(k)] - nn[static_cast<std::size_t>(k)]) *
              (a[static_cast<std::size_t>(k)] - nn[static_cast<std::size_t>(k)]);
    }
    d_ap = std::sqrt(d_ap);
    d_an = std::sqrt(d_an);
    const double l = d_ap - d_an + margin.value;
    if (l <= 0.0) continue;  // hinge off; subgradient 0 on the boundary
    out.loss += w * l;
    auto ga = out.grads.row(t.anchor);
    auto gp = out.grads.row(t.positive);
    auto gn = out.grads.row(t.negative);
    for (int k = 0; k < embeddings.dim; ++k) {
      const std::size_t kk = static_cast<std::size_t>(k);
      const double up = d_ap > 0.0 ? (a[kk] - p[kk]) / d_ap : 0.0;
      const double un = d_an > 0.0 ? (a[kk] - nn[kk]) / d_an : 0.0;
      ga[kk] += w * (up - un);
      gp[kk] -= w * up;
      gn[kk] += w * un;
    }
  }
  return out;
}

BatchLossResult batch_loss(const EmbeddingMatrix& embeddings,
                           const std::vector<PairExample>& examples, Margin margin) {
  if (examples.empty()) fail("batch_loss: empty pair list has no mean");
  BatchLossResult out;
  out.grads = EmbeddingMatrix::zeros(embeddings.rows, embeddings.dim);
  const double w = 1.0 / static_cast<double>(examples.size());
  for (const PairExample& pr : examples) {
    check_index(pr.i, embeddings.rows, "pair");
    check_index(pr.j, embeddings.rows, "pair");
    if (pr.y != 0 && pr.y != 1) {
      fail("batch_loss: pair label must be 0 or 1, got " + std::to_string(pr.y));
    }
    const std::vector<double> u = row_vec(embeddings, pr.i);
    const std::vector<double> v = row_vec(embeddings, pr.j);
    const double d = euclidean_distance(u, v);
    auto gi = out.grads.row(pr.i);
    auto gj = out.grads.row(pr.j);
    if (pr.y == 0) {
      out.loss += w * 0.5 * d * d;
      for (int k = 0; k < embeddings.dim; ++k) {
        const std::size_t kk = static_cast<std::size_t>(k);
        gi[kk] += w * (u[kk] - v[kk]);
        gj[kk] -= w * (u[kk] - v[kk]);
      }
    } else if (d < margin.value) {
      const double h = margin.value - d;
      out.loss += w * 0.5 * h * h;
      if (d > 0.0) {
        for (int k = 0; k < embeddings.dim; ++k) {
          const std::size_t kk = static_cast<std::size_t>(k);
          gi[kk] -= w * h * (u[kk] - v[kk]) / d;
          gj[kk] += w * h * (u[kk] - v[kk]) / d;
        }
      }
    }
  }
  return out;
}

}  // namespace facemetric
