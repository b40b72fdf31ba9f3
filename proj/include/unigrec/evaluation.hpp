#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "unigrec/dataset.hpp"
#include "unigrec/recommender.hpp"
#include "unigrec/tokenizer.hpp"

namespace unigrec {

// 1 if the target appears in the first k ranked items, else 0.
double recall_at_k(std::span<const std::int64_t> ranked, std::int64_t target,
                   std::int64_t k);

// 1/log2(rank + 1) for the single relevant item, 0 if it is outside the top k.
double ndcg_at_k(std::span<const std::int64_t> ranked, std::int64_t target,
                 std::int64_t k);

struct MetricsRecord {
  double recall_at_5 = 0.0;
  double recall_at_10 = 0.0;
  double ndcg_at_5 = 0.0;
  double ndcg_at_10 = 0.0;
};

enum class Split { Valid, Test };

// Full ranking over the item catalog via trie-constrained beam decoding,
// averaged over all users. Valid ranks against the held-out validation item
// from the train prefix; Test ranks against the final item from everything
// before it. Optionally captures each user's ranked list.
MetricsRecord full_rank_evaluate(
    Recommender& recommender, const std::vector<ItemIdentifier>& identifiers,
    const SequenceDataset& data, Split split, std::int64_t beam_size,
    std::int64_t eval_batch = 256,
    std::vector<std::vector<ScoredItem>>* rankings = nullptr);

// 1 - (#distinct code tuples / #items); dedup digits excluded, so 0 means the
// semantic codes alone separate every item.
double collision_rate(const std::vector<ItemIdentifier>& identifiers);

// Per-level entropy of the codeword usage distribution across items.
std::vector<double> usage_entropy(const std::vector<ItemIdentifier>& identifiers,
                                  std::int64_t codewords, EntropyLogBase base);

// How identifiers moved between two dumps over the same catalog: per-level
// change rates plus the distribution over changed-level subsets (the empty
// subset is the unchanged fraction).
struct IdentifierEvolution {
  std::vector<double> layer_change_rate;
  std::map<std::vector<std::int64_t>, double> pattern_distribution;

  double unchanged_fraction() const;
  double at_most_one_layer_fraction() const;
};

IdentifierEvolution identifier_evolution(const std::vector<ItemIdentifier>& before,
                                         const std::vector<ItemIdentifier>& after);

// Rows projected onto their top-2 principal components, [n, 2] double. Sign
// convention: within each component the largest-magnitude loading is positive.
torch::Tensor pca_project(const torch::Tensor& points);

}  // namespace unigrec
