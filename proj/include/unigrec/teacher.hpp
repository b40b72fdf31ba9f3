#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "unigrec/dataset.hpp"
#include "unigrec/embeddings.hpp"

namespace unigrec {

struct TeacherConfig {
  std::int64_t dim = 64;
  std::int64_t layers = 2;
  std::int64_t heads = 2;
  std::int64_t ffn_dim = 128;
  double dropout = 0.1;
  std::int64_t max_len = 20;
  std::int64_t batch_size = 128;
  double lr = 1e-3;
  std::int64_t epochs = 30;
  std::int64_t patience = 5;

  void validate() const;
};

// Self-attentive next-item model over raw item ids. Trained with one sampled
// negative per positive; its item embedding table is exported afterwards and
// serves as the frozen collaborative prior.
class TeacherImpl : public torch::nn::Module {
 public:
  TeacherImpl(std::int64_t num_items, TeacherConfig config);

  // items [B, T], right-padded with pad_index(); causal states [B, T, D].
  // Causal order alone isolates the pad tail, so no key mask is needed.
  torch::Tensor states(const torch::Tensor& items);

  torch::Tensor item_embedding_rows();  // [num_items, D], excludes the pad row
  std::int64_t pad_index() const { return num_items_; }
  std::int64_t num_items() const { return num_items_; }
  const TeacherConfig& config() const { return config_; }

 private:
  std::int64_t num_items_;
  TeacherConfig config_;
  torch::nn::Embedding item_embedding_{nullptr};
  torch::nn::Embedding positions_{nullptr};
  torch::nn::TransformerEncoder encoder_{nullptr};
};
TORCH_MODULE(Teacher);

// Next-item training on the train split with early stopping on validation
// Recall@10.
Teacher train_teacher(const SequenceDataset& data, const TeacherConfig& config,
                      std::uint64_t seed);

// Frozen snapshot of the item embedding table, row order = dense item index.
EmbeddingTable export_item_embeddings(Teacher& teacher);

// Validation Recall@10 by full dot-product ranking (also used for early stop).
double teacher_valid_recall(Teacher& teacher, const SequenceDataset& data,
                            std::int64_t k = 10);

void save_teacher(Teacher& teacher, const std::string& dir);
Teacher load_teacher(const std::string& dir);

}  // namespace unigrec
