#include "unigrec/fixture.hpp"

#include <random>

#include "unigrec/errors.hpp"

namespace unigrec {

void SyntheticDataSpec::validate() const {
  if (users <= 0 || items <= 0) throw ConfigError("synthetic spec needs users and items");
  if (clusters <= 0 || clusters > items)
    throw ConfigError("synthetic cluster count must be in [1, items]");
  if (min_len < 3) throw ConfigError("synthetic min_len must be at least 3");
  if (max_len < min_len) throw ConfigError("synthetic max_len must be >= min_len");
  if (stay_prob < 0.0 || advance_prob < 0.0 || stay_prob + advance_prob > 1.0)
    throw ConfigError("synthetic cluster transition probabilities are invalid");
}

namespace {

std::string item_name(std::int64_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "i%04lld", static_cast<long long>(index));
  return buf;
}

std::string user_name(std::int64_t index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "u%04lld", static_cast<long long>(index));
  return buf;
}

}  // namespace

std::vector<RawInteraction> synth_interactions(const SyntheticDataSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_int_distribution<std::int64_t> len_dist(spec.min_len, spec.max_len);
  std::uniform_int_distribution<std::int64_t> cluster_dist(0, spec.clusters - 1);
  std::uniform_real_distribution<double> coin(0.0, 1.0);

  // members[c] = item indices in cluster c (round-robin split)
  std::vector<std::vector<std::int64_t>> members(spec.clusters);
  for (std::int64_t i = 0; i < spec.items; ++i)
    members[i % spec.clusters].push_back(i);

  std::vector<RawInteraction> out;
  for (std::int64_t u = 0; u < spec.users; ++u) {
    auto name = user_name(u);
    auto cluster = u % spec.clusters;
    auto length = len_dist(rng);
    for (std::int64_t t = 0; t < length; ++t) {
      const auto& pool = members[cluster];
      std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
      out.push_back({name, item_name(pool[pick(rng)]), t});
      auto roll = coin(rng);
      if (roll < spec.stay_prob) {
        // stay
      } else if (roll < spec.stay_prob + spec.advance_prob) {
        cluster = (cluster + 1) % spec.clusters;
      } else {
        cluster = cluster_dist(rng);
      }
    }
  }
  return out;
}

std::int64_t fixture_item_cluster(const std::string& item_id, std::int64_t clusters) {
  if (clusters <= 0) throw ArgumentError("cluster count must be positive");
  if (item_id.size() < 2 || item_id[0] != 'i' ||
      item_id.find_first_not_of("0123456789", 1) != std::string::npos)
    throw ArgumentError("not a generated item id: " + item_id);
  return std::stoll(item_id.substr(1)) % clusters;
}

}  // namespace unigrec
