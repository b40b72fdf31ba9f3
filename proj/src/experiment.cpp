#include "unigrec/experiment.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "unigrec/distillation.hpp"
#include "unigrec/errors.hpp"
#include "unigrec/evaluation.hpp"

namespace unigrec {

namespace fs = std::filesystem;
using nlohmann::json;

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  auto* ctx = EVP_MD_CTX_new();
  if (!ctx) throw std::runtime_error("EVP_MD_CTX_new failed");
  if (EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx, digest, &length) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("sha256 digest failed");
  }
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  hex << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < length; ++i)
    hex << std::setw(2) << static_cast<int>(digest[i]);
  return hex.str();
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot hash missing file " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return sha256_hex(buffer.str());
}

namespace {

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : obj.items()) {
    if (std::none_of(allowed.begin(), allowed.end(),
                     [&](const char* a) { return key == a; }))
      throw ConfigError("unknown key \"" + key + "\" in " + where);
  }
}

template <typename T>
void read_into(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

SyntheticDataSpec parse_synthetic(const json& obj) {
  check_keys(obj, {"users", "items", "clusters", "min_len", "max_len", "stay_prob",
                   "advance_prob"},
             "dataset.synthetic");
  SyntheticDataSpec spec;
  read_into(obj, "users", spec.users);
  read_into(obj, "items", spec.items);
  read_into(obj, "clusters", spec.clusters);
  read_into(obj, "min_len", spec.min_len);
  read_into(obj, "max_len", spec.max_len);
  read_into(obj, "stay_prob", spec.stay_prob);
  read_into(obj, "advance_prob", spec.advance_prob);
  return spec;
}

DatasetConfig parse_dataset(const json& obj) {
  check_keys(obj, {"source", "path", "k_core", "synthetic"}, "dataset");
  DatasetConfig out;
  read_into(obj, "source", out.source);
  read_into(obj, "path", out.path);
  read_into(obj, "k_core", out.k_core);
  if (obj.contains("synthetic")) out.synthetic = parse_synthetic(obj.at("synthetic"));
  return out;
}

EmbeddingConfig parse_embeddings(const json& obj) {
  check_keys(obj, {"source", "path", "dim", "clusters", "noise_scale"}, "embeddings");
  EmbeddingConfig out;
  read_into(obj, "source", out.source);
  read_into(obj, "path", out.path);
  read_into(obj, "dim", out.dim);
  read_into(obj, "clusters", out.clusters);
  read_into(obj, "noise_scale", out.noise_scale);
  return out;
}

TokenizerConfig parse_tokenizer(const json& obj) {
  check_keys(obj, {"encoder_dims", "levels", "codewords", "code_dim", "beta",
                   "tau_max", "tau_min", "entropy_log_base"},
             "tokenizer");
  TokenizerConfig out;
  read_into(obj, "encoder_dims", out.encoder_dims);
  read_into(obj, "levels", out.levels);
  read_into(obj, "codewords", out.codewords);
  read_into(obj, "code_dim", out.code_dim);
  read_into(obj, "beta", out.beta);
  read_into(obj, "tau_max", out.tau_max);
  read_into(obj, "tau_min", out.tau_min);
  if (obj.contains("entropy_log_base")) {
    auto base = obj.at("entropy_log_base").get<std::string>();
    if (base == "two")
      out.entropy_log_base = EntropyLogBase::Two;
    else if (base == "natural")
      out.entropy_log_base = EntropyLogBase::Natural;
    else
      throw ConfigError("tokenizer.entropy_log_base must be \"natural\" or \"two\"");
  }
  return out;
}

RecommenderConfig parse_recommender(const json& obj) {
  check_keys(obj, {"model_dim", "encoder_layers", "decoder_layers", "heads",
                   "ffn_dim", "dropout", "max_items"},
             "recommender");
  RecommenderConfig out;
  read_into(obj, "model_dim", out.model_dim);
  read_into(obj, "encoder_layers", out.encoder_layers);
  read_into(obj, "decoder_layers", out.decoder_layers);
  read_into(obj, "heads", out.heads);
  read_into(obj, "ffn_dim", out.ffn_dim);
  read_into(obj, "dropout", out.dropout);
  read_into(obj, "max_items", out.max_items);
  return out;
}

TeacherConfig parse_teacher(const json& obj) {
  check_keys(obj, {"dim", "layers", "heads", "ffn_dim", "dropout", "max_len",
                   "batch_size", "lr", "epochs", "patience"},
             "teacher");
  TeacherConfig out;
  read_into(obj, "dim", out.dim);
  read_into(obj, "layers", out.layers);
  read_into(obj, "heads", out.heads);
  read_into(obj, "ffn_dim", out.ffn_dim);
  read_into(obj, "dropout", out.dropout);
  read_into(obj, "max_len", out.max_len);
  read_into(obj, "batch_size", out.batch_size);
  read_into(obj, "lr", out.lr);
  read_into(obj, "epochs", out.epochs);
  read_into(obj, "patience", out.patience);
  return out;
}

Stage1Config parse_stage1(const json& obj) {
  check_keys(obj, {"batch_size", "lr", "weight_decay", "epochs", "lambda_cu",
                   "mode", "anneal", "kmeans_init", "kmeans_iterations"},
             "stage1");
  Stage1Config out;
  read_into(obj, "batch_size", out.batch_size);
  read_into(obj, "lr", out.lr);
  read_into(obj, "weight_decay", out.weight_decay);
  read_into(obj, "epochs", out.epochs);
  read_into(obj, "lambda_cu", out.lambda_cu);
  if (obj.contains("mode")) {
    auto mode = obj.at("mode").get<std::string>();
    if (mode == "soft")
      out.mode = QuantizeMode::Soft;
    else if (mode == "hard")
      out.mode = QuantizeMode::Hard;
    else
      throw ConfigError("stage1.mode must be \"soft\" or \"hard\"");
  }
  read_into(obj, "anneal", out.anneal);
  read_into(obj, "kmeans_init", out.kmeans_init);
  read_into(obj, "kmeans_iterations", out.kmeans_iterations);
  return out;
}

Stage2Config parse_stage2(const json& obj) {
  check_keys(obj, {"batch_size", "backbone_lr", "tokenizer_lr", "weight_decay",
                   "epochs", "patience", "lambda_recon", "lambda_cd_tokenizer",
                   "lambda_cd_recommender", "tau_prime", "joint", "soft_input",
                   "beam_size", "eval_batch"},
             "stage2");
  Stage2Config out;
  read_into(obj, "batch_size", out.batch_size);
  read_into(obj, "backbone_lr", out.backbone_lr);
  read_into(obj, "tokenizer_lr", out.tokenizer_lr);
  read_into(obj, "weight_decay", out.weight_decay);
  read_into(obj, "epochs", out.epochs);
  read_into(obj, "patience", out.patience);
  read_into(obj, "lambda_recon", out.lambda_recon);
  read_into(obj, "lambda_cd_tokenizer", out.lambda_cd_tokenizer);
  read_into(obj, "lambda_cd_recommender", out.lambda_cd_recommender);
  read_into(obj, "tau_prime", out.tau_prime);
  read_into(obj, "joint", out.joint);
  read_into(obj, "soft_input", out.soft_input);
  read_into(obj, "beam_size", out.beam_size);
  read_into(obj, "eval_batch", out.eval_batch);
  return out;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json(const json& obj) {
  check_keys(obj, {"seed", "out_dir", "rung", "dataset", "embeddings", "tokenizer",
                   "recommender", "teacher", "stage1", "stage2"},
             "experiment config");
  ExperimentConfig out;
  read_into(obj, "seed", out.seed);
  read_into(obj, "out_dir", out.out_dir);
  read_into(obj, "rung", out.rung);
  parse_rung(out.rung);  // reject bad names early
  if (obj.contains("dataset")) out.dataset = parse_dataset(obj.at("dataset"));
  if (obj.contains("embeddings")) out.embeddings = parse_embeddings(obj.at("embeddings"));
  if (obj.contains("tokenizer")) out.tokenizer = parse_tokenizer(obj.at("tokenizer"));
  if (obj.contains("recommender"))
    out.recommender = parse_recommender(obj.at("recommender"));
  if (obj.contains("teacher")) out.teacher = parse_teacher(obj.at("teacher"));
  if (obj.contains("stage1")) out.stage1 = parse_stage1(obj.at("stage1"));
  if (obj.contains("stage2")) out.stage2 = parse_stage2(obj.at("stage2"));
  return out;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  json obj;
  try {
    in >> obj;
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
  }
  return from_json(obj);
}

json ExperimentConfig::to_json() const {
  json obj;
  obj["seed"] = seed;
  obj["out_dir"] = out_dir;
  obj["rung"] = rung;
  obj["dataset"] = {{"source", dataset.source},
                    {"path", dataset.path},
                    {"k_core", dataset.k_core},
                    {"synthetic",
                     {{"users", dataset.synthetic.users},
                      {"items", dataset.synthetic.items},
                      {"clusters", dataset.synthetic.clusters},
                      {"min_len", dataset.synthetic.min_len},
                      {"max_len", dataset.synthetic.max_len},
                      {"stay_prob", dataset.synthetic.stay_prob},
                      {"advance_prob", dataset.synthetic.advance_prob}}}};
  obj["embeddings"] = {{"source", embeddings.source},
                       {"path", embeddings.path},
                       {"dim", embeddings.dim},
                       {"clusters", embeddings.clusters},
                       {"noise_scale", embeddings.noise_scale}};
  obj["tokenizer"] = {
      {"encoder_dims", tokenizer.encoder_dims},
      {"levels", tokenizer.levels},
      {"codewords", tokenizer.codewords},
      {"code_dim", tokenizer.code_dim},
      {"beta", tokenizer.beta},
      {"tau_max", tokenizer.tau_max},
      {"tau_min", tokenizer.tau_min},
      {"entropy_log_base",
       tokenizer.entropy_log_base == EntropyLogBase::Two ? "two" : "natural"}};
  obj["recommender"] = {{"model_dim", recommender.model_dim},
                        {"encoder_layers", recommender.encoder_layers},
                        {"decoder_layers", recommender.decoder_layers},
                        {"heads", recommender.heads},
                        {"ffn_dim", recommender.ffn_dim},
                        {"dropout", recommender.dropout},
                        {"max_items", recommender.max_items}};
  obj["teacher"] = {{"dim", teacher.dim},         {"layers", teacher.layers},
                    {"heads", teacher.heads},     {"ffn_dim", teacher.ffn_dim},
                    {"dropout", teacher.dropout}, {"max_len", teacher.max_len},
                    {"batch_size", teacher.batch_size}, {"lr", teacher.lr},
                    {"epochs", teacher.epochs},   {"patience", teacher.patience}};
  obj["stage1"] = {{"batch_size", stage1.batch_size},
                   {"lr", stage1.lr},
                   {"weight_decay", stage1.weight_decay},
                   {"epochs", stage1.epochs},
                   {"lambda_cu", stage1.lambda_cu},
                   {"mode", stage1.mode == QuantizeMode::Hard ? "hard" : "soft"},
                   {"anneal", stage1.anneal},
                   {"kmeans_init", stage1.kmeans_init},
                   {"kmeans_iterations", stage1.kmeans_iterations}};
  obj["stage2"] = {{"batch_size", stage2.batch_size},
                   {"backbone_lr", stage2.backbone_lr},
                   {"tokenizer_lr", stage2.tokenizer_lr},
                   {"weight_decay", stage2.weight_decay},
                   {"epochs", stage2.epochs},
                   {"patience", stage2.patience},
                   {"lambda_recon", stage2.lambda_recon},
                   {"lambda_cd_tokenizer", stage2.lambda_cd_tokenizer},
                   {"lambda_cd_recommender", stage2.lambda_cd_recommender},
                   {"tau_prime", stage2.tau_prime},
                   {"joint", stage2.joint},
                   {"soft_input", stage2.soft_input},
                   {"beam_size", stage2.beam_size},
                   {"eval_batch", stage2.eval_batch}};
  return obj;
}

std::string ExperimentConfig::run_dir() const {
  fs::path out(out_dir);
  if (const char* root = std::getenv("UNIGREC_OUT"); root && *root && out.is_relative())
    return (fs::path(root) / out).string();
  return out.string();
}

namespace {

bool manifest_satisfied(const fs::path& run, const std::string& command,
                        const std::string& config_digest,
                        const std::map<std::string, std::string>& inputs) {
  std::ifstream in(run / ("manifest-" + command + ".json"));
  if (!in) return false;
  json obj;
  try {
    in >> obj;
  } catch (...) {
    return false;
  }
  if (obj.value("config_digest", "") != config_digest) return false;
  auto stored = obj.value("inputs", json::object());
  if (stored.size() != inputs.size()) return false;
  for (const auto& [path, digest] : inputs)
    if (stored.value(path, "") != digest) return false;
  for (const auto& out : obj.value("outputs", std::vector<std::string>{}))
    if (!fs::exists(out)) return false;
  return true;
}

void write_manifest(const fs::path& run, const std::string& command,
                    const std::string& config_digest,
                    const std::map<std::string, std::string>& inputs,
                    const std::vector<std::string>& outputs) {
  json obj = {{"command", command},
              {"config_digest", config_digest},
              {"inputs", inputs},
              {"outputs", outputs}};
  std::ofstream out(run / ("manifest-" + command + ".json"));
  if (!out) throw DataError("cannot write manifest for " + command);
  out << obj.dump(2) << "\n";
}

std::string config_digest(const ExperimentConfig& config) {
  return sha256_hex(config.to_json().dump());
}

void require_artifact(const fs::path& path, const std::string& producer) {
  if (!fs::exists(path))
    throw PrerequisiteError("missing " + path.string() + "; run `unigrec " +
                            producer + "` first");
}

SequenceDataset require_dataset(const fs::path& run) {
  auto path = run / "dataset.json";
  require_artifact(path, "prepare");
  return SequenceDataset::load_json(path.string());
}

EmbeddingTable require_embeddings(const fs::path& run, std::int64_t items) {
  auto path = run / "embeddings.bin";
  require_artifact(path, "prepare");
  return load_embeddings(path.string(), items);
}

// Stage configs with the configured rung applied.
std::pair<Stage1Config, Stage2Config> rung_stages(const ExperimentConfig& config) {
  auto stage1 = config.stage1;
  auto stage2 = config.stage2;
  apply_rung(parse_rung(config.rung), stage1, stage2);
  return {stage1, stage2};
}

}  // namespace

int cmd_prepare(const ExperimentConfig& config, bool force) {
  fs::path run(config.run_dir());
  fs::create_directories(run);
  auto digest = config_digest(config);
  std::map<std::string, std::string> inputs;
  if (config.dataset.source != "synthetic")
    inputs[config.dataset.path] = sha256_file(config.dataset.path);
  if (config.embeddings.source == "file")
    inputs[config.embeddings.path] = sha256_file(config.embeddings.path);
  std::vector<std::string> outputs = {(run / "dataset.json").string(),
                                      (run / "embeddings.bin").string()};
  if (!force && manifest_satisfied(run, "prepare", digest, inputs)) {
    std::cout << "prepare: up to date\n";
    return 0;
  }

  std::vector<RawInteraction> records;
  if (config.dataset.source == "synthetic") {
    auto spec = config.dataset.synthetic;
    spec.seed = config.seed;
    records = synth_interactions(spec);
  } else if (config.dataset.source == "csv") {
    records = load_interactions(config.dataset.path, InteractionFormat::Csv);
  } else if (config.dataset.source == "jsonl") {
    records = load_interactions(config.dataset.path, InteractionFormat::JsonLines);
  } else {
    throw ConfigError("unknown dataset source: " + config.dataset.source);
  }
  records = apply_kcore(std::move(records), static_cast<int>(config.dataset.k_core));
  auto data = build_sequences(records);
  data.save_json((run / "dataset.json").string());

  EmbeddingTable table;
  if (config.embeddings.source == "synthetic") {
    if (config.dataset.source == "synthetic") {
      // Align embedding clusters with the generator's item clusters so the
      // semantic and collaborative structure agree.
      std::vector<std::int64_t> assignment(data.num_items());
      for (std::int64_t i = 0; i < data.num_items(); ++i)
        assignment[i] = fixture_item_cluster(data.item_ids[i], config.embeddings.clusters);
      table = synth_embeddings_assigned(assignment, config.embeddings.clusters,
                                        config.embeddings.dim,
                                        config.embeddings.noise_scale, config.seed + 11);
    } else {
      table = synth_embeddings(data.num_items(), config.embeddings.dim,
                               config.embeddings.clusters, config.embeddings.noise_scale,
                               config.seed + 11);
    }
  } else if (config.embeddings.source == "file") {
    table = load_embeddings(config.embeddings.path, data.num_items());
  } else {
    throw ConfigError("unknown embeddings source: " + config.embeddings.source);
  }
  save_embeddings(table, (run / "embeddings.bin").string());

  std::cout << "prepare: users=" << data.num_users() << " items=" << data.num_items()
            << " interactions=" << data.num_interactions() << " avg_len=" << std::fixed
            << std::setprecision(2) << data.avg_sequence_length() << "\n";
  write_manifest(run, "prepare", digest, inputs, outputs);
  return 0;
}

int cmd_train_teacher(const ExperimentConfig& config, bool force) {
  fs::path run(config.run_dir());
  auto data = require_dataset(run);
  auto digest = config_digest(config);
  std::map<std::string, std::string> inputs = {
      {(run / "dataset.json").string(), sha256_file((run / "dataset.json").string())}};
  auto teacher_dir = run / "teacher";
  std::vector<std::string> outputs = {(teacher_dir / "teacher.pt").string(),
                                      (teacher_dir / "teacher.json").string(),
                                      (teacher_dir / "item_embeddings.bin").string()};
  if (!force && manifest_satisfied(run, "train-teacher", digest, inputs)) {
    std::cout << "train-teacher: up to date\n";
    return 0;
  }

  auto teacher = train_teacher(data, config.teacher, config.seed + 101);
  save_teacher(teacher, teacher_dir.string());
  save_embeddings(export_item_embeddings(teacher),
                  (teacher_dir / "item_embeddings.bin").string());
  auto recall = teacher_valid_recall(teacher, data, 10);
  std::cout << "train-teacher: valid recall@10 " << std::fixed << std::setprecision(4)
            << recall << "\n";
  write_manifest(run, "train-teacher", digest, inputs, outputs);
  return 0;
}

int cmd_pretrain(const ExperimentConfig& config, bool force) {
  fs::path run(config.run_dir());
  auto data = require_dataset(run);
  auto table = require_embeddings(run, data.num_items());
  auto digest = config_digest(config);
  std::map<std::string, std::string> inputs = {
      {(run / "embeddings.bin").string(),
       sha256_file((run / "embeddings.bin").string())}};
  std::vector<std::string> outputs = {(run / "stage1" / "tokenizer.pt").string(),
                                      (run / "stage1" / "tokenizer.json").string(),
                                      (run / "identifiers-stage1.jsonl").string()};
  if (!force && manifest_satisfied(run, "pretrain", digest, inputs)) {
    std::cout << "pretrain: up to date\n";
    return 0;
  }

  auto [stage1, stage2] = rung_stages(config);
  MetricsLogger logger((run / "metrics.jsonl").string(), /*truncate=*/true);
  auto result = pretrain_tokenizer(table, config.tokenizer, stage1, config.seed + 202,
                                   &logger);
  save_tokenizer(result.tokenizer, (run / "stage1").string());
  snapshot_identifiers(result.tokenizer, table,
                       (run / "identifiers-stage1.jsonl").string());

  fs::create_directories(run / "analysis");
  std::ofstream csv(run / "analysis" / "collision_vs_epoch.csv");
  csv << "epoch,collision_rate,loss\n";
  for (std::size_t i = 0; i < result.collision_per_epoch.size(); ++i)
    csv << i << "," << result.collision_per_epoch[i] << "," << result.loss_per_epoch[i]
        << "\n";

  std::cout << "pretrain: final collision rate " << std::fixed << std::setprecision(4)
            << result.collision_per_epoch.back() << "\n";
  write_manifest(run, "pretrain", digest, inputs, outputs);
  return 0;
}

int cmd_joint(const ExperimentConfig& config, bool force) {
  fs::path run(config.run_dir());
  auto data = require_dataset(run);
  auto table = require_embeddings(run, data.num_items());
  require_artifact(run / "stage1" / "tokenizer.json", "pretrain");
  auto [stage1, stage2] = rung_stages(config);
  bool distill = stage2.lambda_cd_tokenizer > 0.0 || stage2.lambda_cd_recommender > 0.0;

  auto digest = config_digest(config);
  std::map<std::string, std::string> inputs = {
      {(run / "stage1" / "tokenizer.pt").string(),
       sha256_file((run / "stage1" / "tokenizer.pt").string())}};
  std::optional<EmbeddingTable> teacher_table;
  if (distill) {
    auto teacher_path = run / "teacher" / "item_embeddings.bin";
    require_artifact(teacher_path, "train-teacher");
    inputs[teacher_path.string()] = sha256_file(teacher_path.string());
    teacher_table = load_embeddings(teacher_path.string(), data.num_items());
  }
  std::vector<std::string> outputs = {(run / "stage2" / "tokenizer.pt").string(),
                                      (run / "stage2" / "recommender.pt").string(),
                                      (run / "identifiers-stage2.jsonl").string()};
  if (!force && manifest_satisfied(run, "joint", digest, inputs)) {
    std::cout << "joint: up to date\n";
    return 0;
  }

  auto tokenizer = load_tokenizer((run / "stage1").string());
  double teacher_sum = 0.0;
  if (teacher_table) teacher_sum = teacher_table->matrix.abs().sum().item<double>();

  MetricsLogger logger((run / "metrics.jsonl").string(), /*truncate=*/false);
  auto result = joint_train(data, table, tokenizer, teacher_table, config.recommender,
                            stage2, config.seed + 303, &logger);

  if (teacher_table) {
    auto after = teacher_table->matrix.abs().sum().item<double>();
    if (after != teacher_sum)
      throw TrainingError("teacher embedding table changed during joint training");
  }

  save_tokenizer(tokenizer, (run / "stage2").string());
  save_recommender(result.recommender, (run / "stage2").string());
  save_identifiers(result.identifiers, (run / "identifiers-stage2.jsonl").string());
  std::cout << "joint: best epoch " << result.best_epoch << " valid recall@10 "
            << std::fixed << std::setprecision(4) << result.best_valid_recall_at_10
            << "\n";
  write_manifest(run, "joint", digest, inputs, outputs);
  return 0;
}

int cmd_eval(const ExperimentConfig& config, bool force) {
  fs::path run(config.run_dir());
  auto data = require_dataset(run);
  require_artifact(run / "stage2" / "recommender.json", "joint");
  require_artifact(run / "identifiers-stage2.jsonl", "joint");

  auto digest = config_digest(config);
  std::map<std::string, std::string> inputs = {
      {(run / "stage2" / "recommender.pt").string(),
       sha256_file((run / "stage2" / "recommender.pt").string())},
      {(run / "identifiers-stage2.jsonl").string(),
       sha256_file((run / "identifiers-stage2.jsonl").string())}};
  std::vector<std::string> outputs = {(run / "ranked-test.jsonl").string()};
  if (!force && manifest_satisfied(run, "eval", digest, inputs)) {
    std::cout << "eval: up to date\n";
    return 0;
  }

  auto recommender = load_recommender((run / "stage2").string());
  auto identifiers = load_identifiers((run / "identifiers-stage2.jsonl").string());
  auto [stage1, stage2] = rung_stages(config);

  std::vector<std::vector<ScoredItem>> rankings;
  auto metrics = full_rank_evaluate(recommender, identifiers, data, Split::Test,
                                    stage2.beam_size, stage2.eval_batch, &rankings);

  std::ofstream ranked(run / "ranked-test.jsonl");
  if (!ranked) throw DataError("cannot write ranked-test.jsonl");
  for (std::int64_t u = 0; u < data.num_users(); ++u) {
    json row;
    row["user"] = data.user_ids[u];
    auto& items = row["items"] = json::array();
    auto& scores = row["scores"] = json::array();
    for (const auto& s : rankings[u]) {
      items.push_back(data.item_ids[s.item]);
      scores.push_back(s.score);
    }
    ranked << row.dump() << "\n";
  }

  MetricsLogger logger((run / "metrics.jsonl").string(), /*truncate=*/false);
  logger.append({{"stage", "test"},
                 {"recall_at_5", metrics.recall_at_5},
                 {"recall_at_10", metrics.recall_at_10},
                 {"ndcg_at_5", metrics.ndcg_at_5},
                 {"ndcg_at_10", metrics.ndcg_at_10}});
  std::cout << "eval: recall@5 " << std::fixed << std::setprecision(4)
            << metrics.recall_at_5 << " recall@10 " << metrics.recall_at_10
            << " ndcg@5 " << metrics.ndcg_at_5 << " ndcg@10 " << metrics.ndcg_at_10
            << "\n";
  write_manifest(run, "eval", digest, inputs, outputs);
  return 0;
}

int cmd_analyze(const ExperimentConfig& config, bool force) {
  fs::path run(config.run_dir());
  require_artifact(run / "identifiers-stage1.jsonl", "pretrain");
  require_artifact(run / "identifiers-stage2.jsonl", "joint");
  require_artifact(run / "stage2" / "tokenizer.json", "joint");

  auto digest = config_digest(config);
  std::map<std::string, std::string> inputs = {
      {(run / "identifiers-stage1.jsonl").string(),
       sha256_file((run / "identifiers-stage1.jsonl").string())},
      {(run / "identifiers-stage2.jsonl").string(),
       sha256_file((run / "identifiers-stage2.jsonl").string())}};
  auto analysis = run / "analysis";
  std::vector<std::string> outputs = {(analysis / "collision.csv").string(),
                                      (analysis / "usage_entropy.csv").string(),
                                      (analysis / "evolution_layers.csv").string(),
                                      (analysis / "evolution_patterns.csv").string()};
  if (!force && manifest_satisfied(run, "analyze", digest, inputs)) {
    std::cout << "analyze: up to date\n";
    return 0;
  }

  auto stage1_idents = load_identifiers((run / "identifiers-stage1.jsonl").string());
  auto stage2_idents = load_identifiers((run / "identifiers-stage2.jsonl").string());
  auto tokenizer = load_tokenizer((run / "stage2").string());
  const auto& tc = tokenizer->config();
  fs::create_directories(analysis);

  {
    std::ofstream csv(analysis / "collision.csv");
    csv << "dump,collision_rate\n";
    csv << "stage1," << collision_rate(stage1_idents) << "\n";
    csv << "stage2," << collision_rate(stage2_idents) << "\n";
  }
  {
    std::ofstream csv(analysis / "usage_entropy.csv");
    csv << "dump,level,entropy\n";
    auto h1 = usage_entropy(stage1_idents, tc.codewords, tc.entropy_log_base);
    auto h2 = usage_entropy(stage2_idents, tc.codewords, tc.entropy_log_base);
    for (std::size_t l = 0; l < h1.size(); ++l)
      csv << "stage1," << l << "," << h1[l] << "\n";
    for (std::size_t l = 0; l < h2.size(); ++l)
      csv << "stage2," << l << "," << h2[l] << "\n";
  }
  auto evolution = identifier_evolution(stage1_idents, stage2_idents);
  {
    std::ofstream csv(analysis / "evolution_layers.csv");
    csv << "level,change_rate\n";
    for (std::size_t l = 0; l < evolution.layer_change_rate.size(); ++l)
      csv << l << "," << evolution.layer_change_rate[l] << "\n";
  }
  {
    std::ofstream csv(analysis / "evolution_patterns.csv");
    csv << "pattern,fraction\n";
    for (const auto& [pattern, fraction] : evolution.pattern_distribution) {
      std::string name;
      for (auto l : pattern) name += (name.empty() ? "" : "+") + std::to_string(l);
      csv << (name.empty() ? "none" : name) << "," << fraction << "\n";
    }
  }
  for (std::int64_t l = 0; l < tc.levels; ++l) {
    auto coords = pca_project(tokenizer->codebook(l).detach());
    std::ofstream csv(analysis / ("pca_level" + std::to_string(l) + ".csv"));
    csv << "codeword,x,y\n";
    auto acc = coords.accessor<double, 2>();
    for (std::int64_t k = 0; k < coords.size(0); ++k)
      csv << k << "," << acc[k][0] << "," << acc[k][1] << "\n";
  }

  std::cout << "analyze: unchanged " << std::fixed << std::setprecision(4)
            << evolution.unchanged_fraction() << " at-most-one-layer "
            << evolution.at_most_one_layer_fraction() << "\n";
  write_manifest(run, "analyze", digest, inputs, outputs);
  return 0;
}

namespace {

MetricsRecord read_test_metrics(const fs::path& run) {
  std::ifstream in(run / "metrics.jsonl");
  if (!in) throw DataError("missing metrics log in " + run.string());
  MetricsRecord metrics;
  bool found = false;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto obj = json::parse(line);
    if (obj.value("stage", "") != "test") continue;
    metrics.recall_at_5 = obj.at("recall_at_5").get<double>();
    metrics.recall_at_10 = obj.at("recall_at_10").get<double>();
    metrics.ndcg_at_5 = obj.at("ndcg_at_5").get<double>();
    metrics.ndcg_at_10 = obj.at("ndcg_at_10").get<double>();
    found = true;
  }
  if (!found) throw DataError("no test metrics recorded in " + run.string());
  return metrics;
}

}  // namespace

int cmd_ablate(const ExperimentConfig& config, const std::vector<std::string>& rungs,
               bool force) {
  fs::path run(config.run_dir());
  cmd_prepare(config, force);

  std::vector<std::string> ladder = rungs;
  if (ladder.empty())
    for (int i = 0; i <= 6; ++i) ladder.push_back("M" + std::to_string(i));
  for (const auto& name : ladder) parse_rung(name);

  // Train the shared teacher only if some rung will distill.
  bool needs_teacher = false;
  for (const auto& name : ladder) {
    auto sub = config;
    sub.rung = name;
    auto [s1, s2] = rung_stages(sub);
    needs_teacher |= s2.lambda_cd_tokenizer > 0.0 || s2.lambda_cd_recommender > 0.0;
  }
  if (needs_teacher) cmd_train_teacher(config, force);

  std::vector<std::pair<std::string, MetricsRecord>> results;
  for (const auto& name : ladder) {
    auto sub = config;
    sub.rung = name;
    sub.out_dir = (fs::path(config.out_dir) / ("ablate-" + name)).string();
    fs::path subrun(sub.run_dir());
    fs::create_directories(subrun);
    fs::copy_file(run / "dataset.json", subrun / "dataset.json",
                  fs::copy_options::overwrite_existing);
    fs::copy_file(run / "embeddings.bin", subrun / "embeddings.bin",
                  fs::copy_options::overwrite_existing);
    if (needs_teacher) {
      fs::create_directories(subrun / "teacher");
      for (const auto& entry : fs::directory_iterator(run / "teacher"))
        fs::copy_file(entry.path(), subrun / "teacher" / entry.path().filename(),
                      fs::copy_options::overwrite_existing);
    }
    std::cout << "=== " << name << " ===\n";
    cmd_pretrain(sub, force);
    cmd_joint(sub, force);
    cmd_eval(sub, force);
    results.emplace_back(name, read_test_metrics(subrun));
  }

  std::ofstream csv(run / "ablation.csv");
  if (!csv) throw DataError("cannot write ablation.csv");
  csv << "rung,recall_at_5,recall_at_10,ndcg_at_5,ndcg_at_10\n";
  std::cout << "rung  recall@5  recall@10  ndcg@5  ndcg@10\n";
  for (const auto& [name, m] : results) {
    csv << name << "," << m.recall_at_5 << "," << m.recall_at_10 << "," << m.ndcg_at_5
        << "," << m.ndcg_at_10 << "\n";
    std::cout << name << "  " << std::fixed << std::setprecision(4) << m.recall_at_5
              << "    " << m.recall_at_10 << "     " << m.ndcg_at_5 << "  "
              << m.ndcg_at_10 << "\n";
  }
  return 0;
}

}  // namespace unigrec
