#include "unigrec/embeddings.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <vector>

#include "unigrec/errors.hpp"

namespace unigrec {
namespace {

void check_finite(const torch::Tensor& matrix) {
  auto bad = (~torch::isfinite(matrix)).any(/*dim=*/1);
  if (bad.any().item<bool>()) {
    std::int64_t row = bad.nonzero()[0].item<std::int64_t>();
    throw DataError("embedding row " + std::to_string(row) +
                    " contains a non-finite value");
  }
}

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

EmbeddingTable load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open embedding file: " + path);
  std::vector<float> values;
  std::int64_t rows = 0, dim = -1;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string field;
    std::int64_t cols = 0;
    while (std::getline(ss, field, ',')) {
      try {
        values.push_back(std::stof(field));
      } catch (const std::exception&) {
        throw ParseError("embedding row " + std::to_string(rows) +
                         ": bad float '" + field + "'");
      }
      ++cols;
    }
    if (dim < 0) dim = cols;
    if (cols != dim) {
      throw ShapeError("embedding row " + std::to_string(rows) + " has " +
                       std::to_string(cols) + " columns, expected " +
                       std::to_string(dim));
    }
    ++rows;
  }
  if (rows == 0) throw DataError("empty embedding file: " + path);
  auto matrix = torch::from_blob(values.data(), {rows, dim}, torch::kFloat32).clone();
  return {matrix};
}

EmbeddingTable load_binary(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open embedding file: " + path);
  std::uint64_t rows = 0, dim = 0;
  in.read(reinterpret_cast<char*>(&rows), sizeof(rows));
  in.read(reinterpret_cast<char*>(&dim), sizeof(dim));
  if (!in) throw ParseError("embedding file truncated in header: " + path);
  if (rows == 0 || dim == 0)
    throw ShapeError("embedding file declares zero rows or dim: " + path);
  auto matrix = torch::empty({static_cast<std::int64_t>(rows),
                              static_cast<std::int64_t>(dim)},
                             torch::kFloat32);
  in.read(reinterpret_cast<char*>(matrix.data_ptr<float>()),
          static_cast<std::streamsize>(rows * dim * sizeof(float)));
  if (!in) throw ParseError("embedding file truncated in payload: " + path);
  return {matrix};
}

}  // namespace

EmbeddingTable load_embeddings(const std::string& path,
                               std::int64_t expected_items) {
  EmbeddingTable table =
      has_suffix(path, ".csv") ? load_csv(path) : load_binary(path);
  if (table.items() != expected_items) {
    throw ShapeError("embedding file has " + std::to_string(table.items()) +
                     " rows, expected " + std::to_string(expected_items));
  }
  check_finite(table.matrix);
  return table;
}

void save_embeddings(const EmbeddingTable& table, const std::string& path) {
  auto matrix = table.matrix.to(torch::kFloat32).contiguous();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write embedding file: " + path);
  std::uint64_t rows = matrix.size(0), dim = matrix.size(1);
  out.write(reinterpret_cast<const char*>(&rows), sizeof(rows));
  out.write(reinterpret_cast<const char*>(&dim), sizeof(dim));
  out.write(reinterpret_cast<const char*>(matrix.data_ptr<float>()),
            static_cast<std::streamsize>(rows * dim * sizeof(float)));
  if (!out) throw DataError("write failed: " + path);
}

EmbeddingTable synth_embeddings(std::int64_t n_items, std::int64_t dim,
                                std::int64_t n_clusters, double noise_scale,
                                std::uint64_t seed) {
  if (n_items < 1) throw ArgumentError("n_items must be >= 1");
  std::vector<std::int64_t> assignment(n_items);
  for (std::int64_t i = 0; i < n_items; ++i)
    assignment[i] = n_clusters > 0 ? i % n_clusters : 0;
  return synth_embeddings_assigned(assignment, n_clusters, dim, noise_scale, seed);
}

EmbeddingTable synth_embeddings_assigned(const std::vector<std::int64_t>& assignment,
                                         std::int64_t n_clusters, std::int64_t dim,
                                         double noise_scale, std::uint64_t seed) {
  auto n_items = std::ssize(assignment);
  if (n_items < 1 || dim < 1) throw ArgumentError("n_items and dim must be >= 1");
  if (n_clusters < 1 || n_clusters > n_items)
    throw ArgumentError("n_clusters must be in [1, n_items]");
  if (noise_scale < 0) throw ArgumentError("noise_scale must be >= 0");
  for (auto c : assignment)
    if (c < 0 || c >= n_clusters)
      throw ArgumentError("cluster assignment outside [0, n_clusters)");
  auto gen = at::detail::createCPUGenerator(seed);
  auto centers = torch::randn({n_clusters, dim}, gen, torch::kFloat32);
  auto index = torch::from_blob(const_cast<std::int64_t*>(assignment.data()),
                                {n_items}, torch::kLong)
                   .clone();
  auto matrix = centers.index_select(0, index);
  if (noise_scale > 0) {
    matrix = matrix + noise_scale * torch::randn({n_items, dim}, gen, torch::kFloat32);
  }
  return {matrix.contiguous()};
}

}  // namespace unigrec
