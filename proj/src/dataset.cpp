#include "unigrec/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "unigrec/errors.hpp"

namespace unigrec {
namespace {

using json = nlohmann::json;

std::string trim(const std::string& s) {
  auto begin = s.find_first_not_of(" \t\r\n");
  if (begin == std::string::npos) return "";
  auto end = s.find_last_not_of(" \t\r\n");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.push_back("");
  return fields;
}

std::int64_t parse_timestamp(const std::string& text, std::size_t line_no) {
  std::int64_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ParseError("line " + std::to_string(line_no) +
                     ": timestamp is not an integer: '" + text + "'");
  }
  return value;
}

std::vector<RawInteraction> load_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw EmptyDatasetError("empty interaction file");
  auto header = split_csv_line(line);
  int user_col = -1, item_col = -1, ts_col = -1;
  for (int c = 0; c < static_cast<int>(header.size()); ++c) {
    if (header[c] == "user") user_col = c;
    else if (header[c] == "item") item_col = c;
    else if (header[c] == "timestamp") ts_col = c;
  }
  if (user_col < 0 || item_col < 0 || ts_col < 0) {
    throw ParseError("line 1: header must name columns user,item,timestamp");
  }
  std::vector<RawInteraction> records;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    int needed = std::max({user_col, item_col, ts_col}) + 1;
    if (static_cast<int>(fields.size()) < needed) {
      throw ParseError("line " + std::to_string(line_no) + ": expected " +
                       std::to_string(needed) + " columns, got " +
                       std::to_string(fields.size()));
    }
    if (fields[user_col].empty() || fields[item_col].empty()) {
      throw ParseError("line " + std::to_string(line_no) + ": empty user or item");
    }
    records.push_back({fields[user_col], fields[item_col],
                       parse_timestamp(fields[ts_col], line_no)});
  }
  return records;
}

std::vector<RawInteraction> load_jsonl(std::istream& in) {
  std::vector<RawInteraction> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    if (!obj.is_object() || !obj.contains("user") || !obj.contains("item") ||
        !obj.contains("timestamp")) {
      throw ParseError("line " + std::to_string(line_no) +
                       ": object must contain user, item, timestamp");
    }
    RawInteraction rec;
    try {
      rec.user = obj["user"].is_string() ? obj["user"].get<std::string>()
                                         : obj["user"].dump();
      rec.item = obj["item"].is_string() ? obj["item"].get<std::string>()
                                         : obj["item"].dump();
      rec.timestamp = obj["timestamp"].get<std::int64_t>();
    } catch (const json::exception& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::vector<RawInteraction> dedup_exact(std::vector<RawInteraction> records) {
  std::unordered_set<std::string> seen;
  std::vector<RawInteraction> out;
  out.reserve(records.size());
  for (auto& r : records) {
    std::string key = r.user + '\x1f' + r.item + '\x1f' + std::to_string(r.timestamp);
    if (seen.insert(std::move(key)).second) out.push_back(std::move(r));
  }
  return out;
}

}  // namespace

std::vector<RawInteraction> load_interactions(const std::string& path,
                                              InteractionFormat format) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open interaction file: " + path);
  auto records = format == InteractionFormat::Csv ? load_csv(in) : load_jsonl(in);
  records = dedup_exact(std::move(records));
  if (records.empty()) throw EmptyDatasetError("no interactions in " + path);
  return records;
}

std::vector<RawInteraction> apply_kcore(std::vector<RawInteraction> records, int k) {
  if (k < 1) throw ArgumentError("k must be >= 1");
  bool changed = true;
  while (changed && !records.empty()) {
    std::unordered_map<std::string, int> user_count, item_count;
    for (const auto& r : records) {
      ++user_count[r.user];
      ++item_count[r.item];
    }
    std::vector<RawInteraction> kept;
    kept.reserve(records.size());
    for (auto& r : records) {
      if (user_count[r.user] >= k && item_count[r.item] >= k)
        kept.push_back(std::move(r));
    }
    changed = kept.size() != records.size();
    records = std::move(kept);
  }
  if (records.empty()) throw EmptyDatasetError("k-core fixed point is empty");
  return records;
}

std::int64_t SequenceDataset::num_interactions() const {
  return std::accumulate(sequences.begin(), sequences.end(), std::int64_t{0},
                         [](std::int64_t acc, const auto& s) {
                           return acc + static_cast<std::int64_t>(s.size());
                         });
}

double SequenceDataset::avg_sequence_length() const {
  if (sequences.empty()) return 0.0;
  return static_cast<double>(num_interactions()) /
         static_cast<double>(sequences.size());
}

std::span<const std::int64_t> SequenceDataset::train_items(std::int64_t user) const {
  const auto& seq = sequences.at(user);
  return {seq.data(), seq.size() - 2};
}

std::int64_t SequenceDataset::valid_target(std::int64_t user) const {
  const auto& seq = sequences.at(user);
  return seq[seq.size() - 2];
}

std::int64_t SequenceDataset::test_target(std::int64_t user) const {
  return sequences.at(user).back();
}

std::vector<std::int64_t> SequenceDataset::test_history(std::int64_t user) const {
  const auto& seq = sequences.at(user);
  return {seq.begin(), seq.end() - 1};
}

void SequenceDataset::save_json(const std::string& path) const {
  json obj;
  obj["users"] = user_ids;
  obj["items"] = item_ids;
  obj["sequences"] = sequences;
  json valid = json::array(), test = json::array();
  for (std::int64_t u = 0; u < num_users(); ++u) {
    valid.push_back(valid_target(u));
    test.push_back(test_target(u));
  }
  obj["splits"] = {{"valid", std::move(valid)}, {"test", std::move(test)}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write dataset file: " + path);
  out << obj.dump() << "\n";
}

SequenceDataset SequenceDataset::load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file: " + path);
  json obj;
  try {
    in >> obj;
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("dataset file: ") + e.what());
  }
  SequenceDataset ds;
  ds.user_ids = obj.at("users").get<std::vector<std::string>>();
  ds.item_ids = obj.at("items").get<std::vector<std::string>>();
  ds.sequences = obj.at("sequences").get<std::vector<std::vector<std::int64_t>>>();
  for (const auto& seq : ds.sequences) {
    if (seq.size() < 3) throw DataError("dataset file has a sequence shorter than 3");
    for (auto i : seq) {
      if (i < 0 || i >= ds.num_items())
        throw DataError("dataset file has an out-of-range item index");
    }
  }
  return ds;
}

SequenceDataset build_sequences(const std::vector<RawInteraction>& records) {
  SequenceDataset ds;
  std::unordered_map<std::string, std::int64_t> user_index, item_index;
  // Dense ids in first-appearance order for determinism.
  for (const auto& r : records) {
    if (user_index.emplace(r.user, ds.user_ids.size()).second)
      ds.user_ids.push_back(r.user);
    if (item_index.emplace(r.item, ds.item_ids.size()).second)
      ds.item_ids.push_back(r.item);
  }
  struct Entry {
    std::int64_t timestamp;
    std::size_t order;
    std::int64_t item;
  };
  std::vector<std::vector<Entry>> per_user(ds.user_ids.size());
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    per_user[user_index[r.user]].push_back({r.timestamp, i, item_index[r.item]});
  }
  ds.sequences.resize(per_user.size());
  for (std::size_t u = 0; u < per_user.size(); ++u) {
    auto& entries = per_user[u];
    if (entries.size() < 3) {
      throw SplitError("user '" + ds.user_ids[u] + "' has " +
                       std::to_string(entries.size()) +
                       " interactions; at least 3 required for leave-one-out");
    }
    std::stable_sort(entries.begin(), entries.end(),
                     [](const Entry& a, const Entry& b) {
                       return a.timestamp < b.timestamp;
                     });
    ds.sequences[u].reserve(entries.size());
    for (const auto& e : entries) ds.sequences[u].push_back(e.item);
  }
  return ds;
}

PaddedSequence truncate_pad(std::span<const std::int64_t> sequence,
                            std::int64_t max_len, std::int64_t pad_index) {
  if (max_len < 1) throw ArgumentError("max_len must be >= 1");
  PaddedSequence out;
  out.items.assign(max_len, pad_index);
  out.mask.assign(max_len, 0);
  std::int64_t keep = std::min<std::int64_t>(max_len, sequence.size());
  for (std::int64_t i = 0; i < keep; ++i) {
    out.items[max_len - keep + i] = sequence[sequence.size() - keep + i];
    out.mask[max_len - keep + i] = 1;
  }
  return out;
}

}  // namespace unigrec
