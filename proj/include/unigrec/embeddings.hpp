#pragma once

#include <cstdint>
#include <string>

#include <torch/torch.h>

namespace unigrec {

// Per-item semantic vectors, row order matching the dataset's dense item index.
struct EmbeddingTable {
  torch::Tensor matrix;  // [items, dim] float32, contiguous

  std::int64_t items() const { return matrix.size(0); }
  std::int64_t dim() const { return matrix.size(1); }
};

// Binary layout: little-endian u64 item count, u64 dim, then row-major f32.
// Paths ending in .csv use one comma-separated row per item instead.
EmbeddingTable load_embeddings(const std::string& path, std::int64_t expected_items);
void save_embeddings(const EmbeddingTable& table, const std::string& path);

// Cluster-structured synthetic table: n_clusters standard-normal centers,
// items assigned round-robin (item i -> cluster i % n_clusters), plus
// isotropic noise. Deterministic in seed.
EmbeddingTable synth_embeddings(std::int64_t n_items, std::int64_t dim,
                                std::int64_t n_clusters, double noise_scale,
                                std::uint64_t seed);

// Same construction with an explicit item -> cluster assignment.
EmbeddingTable synth_embeddings_assigned(const std::vector<std::int64_t>& assignment,
                                         std::int64_t n_clusters, std::int64_t dim,
                                         double noise_scale, std::uint64_t seed);

}  // namespace unigrec
