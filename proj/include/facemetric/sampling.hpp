#pragma once

#include <map>
#include <string>
#include <vector>

#include "facemetric/embedding_set.hpp"
#include "facemetric/losses.hpp"
#include "facemetric/rng.hpp"

namespace facemetric {

// identity label -> sample indices into some external record array.
struct IdentityIndex {
  std::map<std::string, std::vector<int>> by_label;

  static IdentityIndex from_labels(const std::vector<std::string>& labels);
  int identity_count() const { return static_cast<int>(by_label.size()); }
};

// P identities x K samples per batch; defaults follow the 16 x 2 = 32 layout.
struct BatchPlan {
  int identities = 16;
  int per_identity = 2;

  int batch_size() const { return identities * per_identity; }
};

struct BatchItem {
  int sample = 0;  // index into the split's records
  std::string label;
};

// Identity-balanced draw: P distinct identities, K samples each, sampled
// without replacement within an identity. Identities with fewer than K
// samples are excluded from the pool.
std::vector<BatchItem> sample_batch(const IdentityIndex& index, const BatchPlan& plan, Rng& rng);

// One positive pair per identity plus the same number of random negative
// pairs drawn without duplicates from the cross-identity combinations.
// Requires a K = 2 batch; returned indices are batch-local.
std::vector<PairExample> make_pairs(const std::vector<BatchItem>& batch, Rng& rng);

// Semi-hard online mining over one batch. For every ordered same-identity
// (anchor, positive) pair, picks the nearest negative inside the band
// (d(a,p), d(a,p) + margin); falls back to the nearest negative beyond the
// positive, then to the overall hardest negative. Ties break toward the
// lowest index. Indices are batch-local.
std::vector<TripletExample> mine_semihard_triplets(const EmbeddingMatrix& embeddings,
                                                   const std::vector<std::string>& labels,
                                                   Margin margin);

}  // namespace facemetric
