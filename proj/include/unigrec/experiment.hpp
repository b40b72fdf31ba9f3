#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "unigrec/dataset.hpp"
#include "unigrec/embeddings.hpp"
#include "unigrec/fixture.hpp"
#include "unigrec/recommender.hpp"
#include "unigrec/teacher.hpp"
#include "unigrec/tokenizer.hpp"
#include "unigrec/training.hpp"

namespace unigrec {

struct DatasetConfig {
  std::string source = "synthetic";  // synthetic | csv | jsonl
  std::string path;                  // for csv/jsonl sources
  std::int64_t k_core = 5;
  SyntheticDataSpec synthetic;
};

struct EmbeddingConfig {
  std::string source = "synthetic";  // synthetic | file
  std::string path;                  // for the file source (.bin or .csv)
  std::int64_t dim = 16;
  std::int64_t clusters = 4;
  double noise_scale = 0.05;
};

// One experiment = one output directory with a fixed artifact layout:
//   dataset.json, embeddings.bin, teacher/, stage1/, stage2/,
//   identifiers-stage1.jsonl, identifiers-stage2.jsonl, metrics.jsonl,
//   ranked-test.jsonl, analysis/, ablation.csv, manifest-<command>.json
// Unknown config keys are rejected so typos cannot silently fall back to
// defaults.
struct ExperimentConfig {
  std::uint64_t seed = 7;
  std::string out_dir = "runs/default";
  std::string rung = "M6";
  DatasetConfig dataset;
  EmbeddingConfig embeddings;
  TokenizerConfig tokenizer;
  RecommenderConfig recommender;
  TeacherConfig teacher;
  Stage1Config stage1;
  Stage2Config stage2;

  static ExperimentConfig from_json(const nlohmann::json& obj);
  static ExperimentConfig load(const std::string& path);
  nlohmann::json to_json() const;

  // out_dir, placed under $UNIGREC_OUT when that is set and out_dir is
  // relative.
  std::string run_dir() const;
};

// Hex SHA-256 digests used for the no-op re-run manifests.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

// Pipeline commands. Each writes its artifacts plus a manifest recording the
// config digest and input digests; re-running with an unchanged manifest is a
// no-op unless force is set. All return 0 on success and throw on failure.
int cmd_prepare(const ExperimentConfig& config, bool force);
int cmd_train_teacher(const ExperimentConfig& config, bool force);
int cmd_pretrain(const ExperimentConfig& config, bool force);
int cmd_joint(const ExperimentConfig& config, bool force);
int cmd_eval(const ExperimentConfig& config, bool force);
int cmd_analyze(const ExperimentConfig& config, bool force);

// Runs the ladder rungs end-to-end in per-rung subdirectories (sharing the
// prepared data and teacher) and writes <run>/ablation.csv.
int cmd_ablate(const ExperimentConfig& config, const std::vector<std::string>& rungs,
               bool force);

}  // namespace unigrec
