#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "unigrec/dataset.hpp"
#include "unigrec/distillation.hpp"
#include "unigrec/embeddings.hpp"
#include "unigrec/recommender.hpp"
#include "unigrec/tokenizer.hpp"

namespace unigrec {

// Append-only JSON-lines training log; one object per call.
class MetricsLogger {
 public:
  MetricsLogger() = default;
  MetricsLogger(std::string path, bool truncate);

  void append(const nlohmann::json& record);
  explicit operator bool() const { return !path_.empty(); }

 private:
  std::string path_;
};

// Stage 1: tokenizer pretraining on the semantic embeddings alone.
//   Soft mode: reconstruction + lambda_cu * codeword-uniformity, temperature
//     annealed linearly per step when anneal is set.
//   Hard mode: reconstruction + straight-through quantization loss (the
//     staged baseline); lambda_cu must be zero.
struct Stage1Config {
  std::int64_t batch_size = 1024;
  double lr = 1e-3;
  // Anchors the encoder output scale: without decay the encoded points drift
  // away from the codebooks until the assignment softmax saturates and the
  // codebooks stop separating items.
  double weight_decay = 0.01;
  std::int64_t epochs = 80;
  double lambda_cu = 1e-4;
  QuantizeMode mode = QuantizeMode::Soft;
  bool anneal = true;
  bool kmeans_init = true;
  std::int64_t kmeans_iterations = 10;

  void validate() const;
};

struct Stage1Result {
  Tokenizer tokenizer{nullptr};
  std::vector<double> collision_per_epoch;
  std::vector<double> loss_per_epoch;
};

Stage1Result pretrain_tokenizer(const EmbeddingTable& embeddings,
                                const TokenizerConfig& tokenizer_config,
                                const Stage1Config& config, std::uint64_t seed,
                                MetricsLogger* logger = nullptr);

// Stage 2: recommender training; when joint is set the tokenizer stays in the
// graph (soft identifier distributions recomputed over the whole catalog each
// step) and receives its own, much smaller, learning rate.
struct Stage2Config {
  std::int64_t batch_size = 512;
  double backbone_lr = 5e-3;
  double tokenizer_lr = 2e-7;
  double weight_decay = 0.05;
  std::int64_t epochs = 60;
  std::int64_t patience = 10;
  double lambda_recon = 0.5;
  double lambda_cd_tokenizer = 0.0;
  double lambda_cd_recommender = 0.0;
  double tau_prime = 0.07;
  bool joint = true;
  bool soft_input = true;
  std::int64_t beam_size = 30;
  std::int64_t eval_batch = 256;

  void validate() const;
};

// Cumulative model ladder from the hard-identifier staged baseline (M0) to the
// full system (M6). Each step only toggles configuration:
//   M0 hard identifiers, staged   M1 +soft identifiers   M2 +joint training
//   M3 +codeword uniformity       M4 M3+tokenizer-side distillation
//   M5 M3+recommender-side distillation                  M6 everything
enum class AblationRung { M0, M1, M2, M3, M4, M5, M6 };

AblationRung parse_rung(const std::string& name);
std::string rung_name(AblationRung rung);

// Rewrites the stage configs in place to realize a rung. Values the rung
// enables (lambda_cu, distillation weights) keep their configured magnitudes;
// everything the rung excludes is zeroed or switched off.
void apply_rung(AblationRung rung, Stage1Config& stage1, Stage2Config& stage2);

struct JointTrainResult {
  Recommender recommender{nullptr};
  DistillationHeads heads{nullptr};  // null unless a distillation weight is active
  std::vector<ItemIdentifier> identifiers;
  double best_valid_recall_at_10 = 0.0;
  std::int64_t best_epoch = -1;
};

// teacher_embeddings are required iff a distillation weight is non-zero; the
// table itself is never updated. Early stopping tracks validation Recall@10;
// the returned modules are the best-epoch snapshots and the identifiers are
// reassigned from the returned tokenizer state.
JointTrainResult joint_train(const SequenceDataset& data,
                             const EmbeddingTable& embeddings, Tokenizer& tokenizer,
                             const std::optional<EmbeddingTable>& teacher_embeddings,
                             const RecommenderConfig& recommender_config,
                             const Stage2Config& config, std::uint64_t seed,
                             MetricsLogger* logger = nullptr);

// Hard identifier dump for the tokenizer's current state.
void snapshot_identifiers(Tokenizer& tokenizer, const EmbeddingTable& embeddings,
                          const std::string& path);

}  // namespace unigrec
