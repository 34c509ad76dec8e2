#include "facemetric/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace facemetric {
namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

}  // namespace

IdentityIndex IdentityIndex::from_labels(const std::vector<std::string>& labels) {
  IdentityIndex idx;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    idx.by_label[labels[i]].push_back(static_cast<int>(i));
  }
  return idx;
}

std::vector<BatchItem> sample_batch(const IdentityIndex& index, const BatchPlan& plan, Rng& rng) {
  if (plan.identities < 1) fail("sample_batch: plan needs at least one identity");
  if (plan.per_identity < 2) fail("sample_batch: plan needs at least two samples per identity");

  std::vector<const std::pair<const std::string, std::vector<int>>*> eligible;
  for (const auto& kv : index.by_label) {
    if (static_cast<int>(kv.second.size()) >= plan.per_identity) eligible.push_back(&kv);
  }
  if (static_cast<int>(eligible.size()) < plan.identities) {
    fail("sample_batch: need " + std::to_string(plan.identities) + " identities with >= " +
         std::to_string(plan.per_identity) + " samples, only " + std::to_string(eligible.size()) +
         " eligible");
  }

  std::vector<BatchItem> batch;
  batch.reserve(static_cast<std::size_t>(plan.batch_size()));
  const std::vector<int> chosen =
      rng.sample_without_replacement(static_cast<int>(eligible.size()), plan.identities);
  for (int idx : chosen) {
    const auto& [label, samples] = *eligible[static_cast<std::size_t>(idx)];
    const std::vector<int> picks =
        rng.sample_without_replacement(static_cast<int>(samples.size()), plan.per_identity);
    for (int p : picks) {
      batch.push_back(BatchItem{samples[static_cast<std::size_t>(p)], label});
    }
  }
  return batch;
}

std::vector<PairExample> make_pairs(const std::vector<BatchItem>& batch, Rng& rng) {
  // group batch positions by label, first-appearance order
  std::vector<std::string> order;
  std::map<std::string, std::vector<int>> groups;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto [it, inserted] = groups.try_emplace(batch[i].label);
    if (inserted) order.push_back(batch[i].label);
    it->second.push_back(static_cast<int>(i));
  }
  for (const auto& kv : groups) {
    if (kv.second.size() != 2) {
      fail("make_pairs: batch plan with K != 2 is unsupported (identity '" + kv.first + "' has " +
           std::to_string(kv.second.size()) + " samples)");
    }
  }
  if (order.size() < 2) fail("make_pairs: need at least two identities to form negative pairs");

  std::vector<PairExample> pairs;
  for (const std::string& label : order) {
    const auto& g = groups[label];
    pairs.push_back(PairExample{g[0], g[1], 0});
  }

  // all unordered cross-identity position pairs
  std::vector<std::pair<int, int>> cross;
  const int n = static_cast<int>(batch.size());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (batch[static_cast<std::size_t>(i)].label != batch[static_cast<std::size_t>(j)].label) {
        cross.emplace_back(i, j);
      }
    }
  }
  const int wanted = static_cast<int>(order.size());
  if (static_cast<int>(cross.size()) < wanted) {
    fail("make_pairs: only " + std::to_string(cross.size()) + " cross-identity pairs available");
  }
  for (int pick : rng.sample_without_replacement(static_cast<int>(cross.size()), wanted)) {
    const auto& [i, j] = cross[static_cast<std::size_t>(pick)];
    pairs.push_back(PairExample{i, j, 1});
  }
  return pairs;
}

std::vector<TripletExample> mine_semihard_triplets(const EmbeddingMatrix& embeddings,
                                                   const std::vector<std::string>& labels,
                                                   Margin margin) {
  const int n = embeddings.rows;
  if (static_cast<int>(labels.size()) != n) {
    fail("mine_semihard_triplets: " + std::to_string(labels.size()) + " labels for " +
         std::to_string(n) + " embeddings");
  }

  // full pairwise distance matrix; batches are small
  std::vector<double> dist(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      double s = 0.0;
      const auto a = embeddings.row(i);
      const auto b = embeddings.row(j);
      for (int k = 0; k < embeddings.dim; ++k) {
        const double d = a[static_cast<std::size_t>(k)] - b[static_cast<std::size_t>(k)];
        s += d * d;
      }
      const double d = std::sqrt(s);
      dist[static_cast<std::size_t>(i) * n + j] = d;
      dist[static_cast<std::size_t>(j) * n + i] = d;
    }
  }

  std::vector<TripletExample> out;
  for (int a = 0; a < n; ++a) {
    for (int p = 0; p < n; ++p) {
      if (p == a || labels[static_cast<std::size_t>(p)] != labels[static_cast<std::size_t>(a)]) {
        continue;
      }
      const double d_ap = dist[static_cast<std::size_t>(a) * n + p];
      int band_pick = -1, outer_pick = -1, hardest_pick = -1;
      double band_best = 0.0, outer_best = 0.0, hardest_best = 0.0;
      for (int neg = 0; neg < n; ++neg) {
        if (labels[static_cast<std::size_t>(neg)] == labels[static_cast<std::size_t>(a)]) continue;
        const double d_an = dist[static_cast<std::size_t>(a) * n + neg];
        if (d_an > d_ap && d_an < d_ap + margin.value && (band_pick < 0 || d_an < band_best)) {
          band_pick = neg;
          band_best = d_an;
        }
        if (d_an > d_ap && (outer_pick < 0 || d_an < outer_best)) {
          outer_pick = neg;
          outer_best = d_an;
        }
        if (hardest_pick < 0 || d_an < hardest_best) {
          hardest_pick = neg;
          hardest_best = d_an;
        }
      }
      const int pick = band_pick >= 0 ? band_pick : (outer_pick >= 0 ? outer_pick : hardest_pick);
      if (pick < 0) continue;  // no negatives in the batch at all
      out.push_back(TripletExample{a, p, pick});
    }
  }
  if (out.empty()) {
    fail("mine_semihard_triplets: no (anchor, positive, negative) combination exists in the batch");
  }
  return out;
}

}  // namespace facemetric
