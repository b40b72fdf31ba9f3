#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "unigrec/dataset.hpp"

namespace unigrec {

// Cluster-structured interaction generator. Items are split round-robin into
// clusters; each user walks a Markov chain over clusters (stay, advance to the
// next cluster, or jump uniformly) and draws items inside the current cluster.
// This yields co-occurrence structure a sequence model can exploit while a
// popularity ranking cannot.
struct SyntheticDataSpec {
  std::int64_t users = 200;
  std::int64_t items = 120;
  std::int64_t clusters = 4;
  std::int64_t min_len = 8;
  std::int64_t max_len = 16;
  double stay_prob = 0.60;
  double advance_prob = 0.30;
  std::uint64_t seed = 1;

  void validate() const;
};

std::vector<RawInteraction> synth_interactions(const SyntheticDataSpec& spec);

// Cluster of a generated item id ("i0017" -> 17 % clusters). Only meaningful
// for ids produced by synth_interactions.
std::int64_t fixture_item_cluster(const std::string& item_id, std::int64_t clusters);

}  // namespace unigrec
