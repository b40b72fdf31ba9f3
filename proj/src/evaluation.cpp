#include "unigrec/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "unigrec/errors.hpp"

namespace unigrec {

double recall_at_k(std::span<const std::int64_t> ranked, std::int64_t target,
                   std::int64_t k) {
  if (k <= 0) throw ArgumentError("recall_at_k needs k >= 1");
  auto limit = std::min<std::int64_t>(k, std::ssize(ranked));
  for (std::int64_t i = 0; i < limit; ++i)
    if (ranked[i] == target) return 1.0;
  return 0.0;
}

double ndcg_at_k(std::span<const std::int64_t> ranked, std::int64_t target,
                 std::int64_t k) {
  if (k <= 0) throw ArgumentError("ndcg_at_k needs k >= 1");
  auto limit = std::min<std::int64_t>(k, std::ssize(ranked));
  for (std::int64_t i = 0; i < limit; ++i)
    if (ranked[i] == target)
      return 1.0 / std::log2(static_cast<double>(i) + 2.0);
  return 0.0;
}

MetricsRecord full_rank_evaluate(Recommender& recommender,
                                 const std::vector<ItemIdentifier>& identifiers,
                                 const SequenceDataset& data, Split split,
                                 std::int64_t beam_size, std::int64_t eval_batch,
                                 std::vector<std::vector<ScoredItem>>* rankings) {
  if (beam_size < 10) throw ArgumentError("beam size below the largest metric cutoff");
  if (eval_batch <= 0) throw ArgumentError("eval_batch must be positive");
  if (std::ssize(identifiers) != data.num_items())
    throw ShapeError("identifier dump does not cover the catalog");

  torch::NoGradGuard guard;
  bool was_training = recommender->is_training();
  recommender->eval();

  auto tokens = identifier_tokens(identifiers, recommender->layout());
  auto trie = build_prefix_trie(identifiers, recommender->layout());
  auto max_items = recommender->config().max_items;
  auto users = data.num_users();
  if (rankings) {
    rankings->clear();
    rankings->reserve(users);
  }

  MetricsRecord totals;
  for (std::int64_t start = 0; start < users; start += eval_batch) {
    auto stop = std::min(users, start + eval_batch);
    auto batch = stop - start;
    auto items = torch::empty({batch, max_items}, torch::kLong);
    auto acc = items.accessor<std::int64_t, 2>();
    for (std::int64_t i = 0; i < batch; ++i) {
      auto user = start + i;
      std::vector<std::int64_t> held;
      std::span<const std::int64_t> history;
      if (split == Split::Valid) {
        history = data.train_items(user);
      } else {
        held = data.test_history(user);
        history = held;
      }
      auto padded = truncate_pad(history, max_items, -1);
      for (std::int64_t t = 0; t < max_items; ++t) acc[i][t] = padded.items[t];
    }
    auto [emb, pad] = recommender->history_embeddings_hard(items, tokens);
    auto memory = recommender->encode_history(emb, pad);
    auto ranked = constrained_beam_search_batch(recommender, memory, pad, trie,
                                               beam_size, 10);
    for (std::int64_t i = 0; i < batch; ++i) {
      auto user = start + i;
      auto target = split == Split::Valid ? data.valid_target(user)
                                          : data.test_target(user);
      std::vector<std::int64_t> ids;
      ids.reserve(ranked[i].size());
      for (const auto& s : ranked[i]) ids.push_back(s.item);
      totals.recall_at_5 += recall_at_k(ids, target, 5);
      totals.recall_at_10 += recall_at_k(ids, target, 10);
      totals.ndcg_at_5 += ndcg_at_k(ids, target, 5);
      totals.ndcg_at_10 += ndcg_at_k(ids, target, 10);
      if (rankings) rankings->push_back(std::move(ranked[i]));
    }
  }
  auto n = static_cast<double>(users);
  totals.recall_at_5 /= n;
  totals.recall_at_10 /= n;
  totals.ndcg_at_5 /= n;
  totals.ndcg_at_10 /= n;
  if (was_training) recommender->train();
  return totals;
}

double collision_rate(const std::vector<ItemIdentifier>& identifiers) {
  if (identifiers.empty()) throw ArgumentError("collision_rate over an empty dump");
  std::set<std::vector<std::int64_t>> unique;
  for (const auto& ident : identifiers) unique.insert(ident.codes);
  return 1.0 - static_cast<double>(unique.size()) /
                   static_cast<double>(identifiers.size());
}

std::vector<double> usage_entropy(const std::vector<ItemIdentifier>& identifiers,
                                  std::int64_t codewords, EntropyLogBase base) {
  if (identifiers.empty()) throw ArgumentError("usage_entropy over an empty dump");
  if (codewords <= 0) throw ArgumentError("usage_entropy needs a positive codeword count");
  auto levels = std::ssize(identifiers.front().codes);
  std::vector<std::vector<std::int64_t>> counts(levels,
                                                std::vector<std::int64_t>(codewords, 0));
  for (const auto& ident : identifiers) {
    if (std::ssize(ident.codes) != levels)
      throw ShapeError("identifier dump has inconsistent level counts");
    for (std::int64_t l = 0; l < levels; ++l) {
      auto code = ident.codes[l];
      if (code < 0 || code >= codewords)
        throw DataError("identifier code " + std::to_string(code) +
                        " outside [0, " + std::to_string(codewords) + ")");
      ++counts[l][code];
    }
  }
  auto total = static_cast<double>(identifiers.size());
  std::vector<double> entropy(levels, 0.0);
  for (std::int64_t l = 0; l < levels; ++l) {
    double h = 0.0;
    for (auto c : counts[l]) {
      if (c == 0) continue;
      auto p = static_cast<double>(c) / total;
      h -= p * std::log(p);
    }
    entropy[l] = base == EntropyLogBase::Two ? h / std::log(2.0) : h;
  }
  return entropy;
}

double IdentifierEvolution::unchanged_fraction() const {
  auto it = pattern_distribution.find({});
  return it == pattern_distribution.end() ? 0.0 : it->second;
}

double IdentifierEvolution::at_most_one_layer_fraction() const {
  double total = 0.0;
  for (const auto& [pattern, fraction] : pattern_distribution)
    if (pattern.size() <= 1) total += fraction;
  return total;
}

IdentifierEvolution identifier_evolution(const std::vector<ItemIdentifier>& before,
                                         const std::vector<ItemIdentifier>& after) {
  if (before.empty() || before.size() != after.size())
    throw ShapeError("identifier evolution needs two equal non-empty dumps");
  auto levels = std::ssize(before.front().codes);
  IdentifierEvolution report;
  report.layer_change_rate.assign(levels, 0.0);
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (std::ssize(before[i].codes) != levels || std::ssize(after[i].codes) != levels)
      throw ShapeError("identifier evolution dumps have inconsistent level counts");
    std::vector<std::int64_t> changed;
    for (std::int64_t l = 0; l < levels; ++l)
      if (before[i].codes[l] != after[i].codes[l]) {
        changed.push_back(l);
        report.layer_change_rate[l] += 1.0;
      }
    report.pattern_distribution[changed] += 1.0;
  }
  auto n = static_cast<double>(before.size());
  for (auto& rate : report.layer_change_rate) rate /= n;
  for (auto& [pattern, fraction] : report.pattern_distribution) fraction /= n;
  return report;
}

torch::Tensor pca_project(const torch::Tensor& points) {
  if (points.dim() != 2) throw ShapeError("pca_project expects a 2-D matrix");
  auto n = points.size(0);
  auto d = points.size(1);
  if (n < 2) throw ArgumentError("pca_project needs at least two rows");
  auto x = points.to(torch::kDouble);
  x = x - x.mean(0, /*keepdim=*/true);
  if (d == 1)
    return torch::cat({x, torch::zeros({n, 1}, torch::kDouble)}, 1);
  auto cov = x.t().matmul(x) / static_cast<double>(n - 1);
  auto [values, vectors] = torch::linalg_eigh(cov);  // ascending eigenvalues
  auto components = torch::stack(
      {vectors.select(1, d - 1), vectors.select(1, d - 2)}, 1);  // [d, 2]
  for (std::int64_t c = 0; c < 2; ++c) {
    auto column = components.select(1, c);
    auto lead = column.abs().argmax().item<std::int64_t>();
    if (column[lead].item<double>() < 0.0) column.neg_();
  }
  return x.matmul(components);
}

}  // namespace unigrec
