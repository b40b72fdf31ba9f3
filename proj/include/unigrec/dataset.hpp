#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace unigrec {

struct RawInteraction {
  std::string user;
  std::string item;
  std::int64_t timestamp = 0;

  bool operator==(const RawInteraction&) const = default;
};

enum class InteractionFormat { Csv, JsonLines };

// Reads `user,item,timestamp` records. Exact duplicate triples are dropped,
// keeping the first occurrence; file order is otherwise preserved.
std::vector<RawInteraction> load_interactions(const std::string& path,
                                              InteractionFormat format);

// Iteratively removes users and items with fewer than k interactions until a
// fixed point is reached. The surviving set is the maximal k-core and does not
// depend on input order; record order is preserved.
std::vector<RawInteraction> apply_kcore(std::vector<RawInteraction> records,
                                        int k);

// Per-user interaction sequences with dense user/item indices and a
// leave-one-out split: last item is the test target, second-to-last the
// validation target, the prefix is training history.
struct SequenceDataset {
  std::vector<std::string> user_ids;  // dense user index -> raw id
  std::vector<std::string> item_ids;  // dense item index -> raw id
  std::vector<std::vector<std::int64_t>> sequences;  // time-ordered item indices

  std::int64_t num_users() const { return static_cast<std::int64_t>(user_ids.size()); }
  std::int64_t num_items() const { return static_cast<std::int64_t>(item_ids.size()); }
  std::int64_t num_interactions() const;
  double avg_sequence_length() const;

  std::span<const std::int64_t> train_items(std::int64_t user) const;
  std::int64_t valid_target(std::int64_t user) const;
  std::int64_t test_target(std::int64_t user) const;
  // History for test-time prediction: training items plus the validation item.
  std::vector<std::int64_t> test_history(std::int64_t user) const;

  void save_json(const std::string& path) const;
  static SequenceDataset load_json(const std::string& path);
};

// Groups records per user, sorts by timestamp (stable, ties keep input
// order), and assigns dense indices in first-appearance order.
SequenceDataset build_sequences(const std::vector<RawInteraction>& records);

struct PaddedSequence {
  std::vector<std::int64_t> items;  // length max_len, pad_index on the left
  std::vector<std::uint8_t> mask;   // 1 = real position
};

// Keeps the most recent max_len items, left-padding shorter sequences.
PaddedSequence truncate_pad(std::span<const std::int64_t> sequence,
                            std::int64_t max_len, std::int64_t pad_index);

}  // namespace unigrec
