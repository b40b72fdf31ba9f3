#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <doctest.h>

#include "unigrec/errors.hpp"
#include "unigrec/experiment.hpp"

using namespace unigrec;

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

ExperimentConfig tiny_experiment(const std::string& out_dir) {
  ExperimentConfig config;
  config.seed = 7;
  config.out_dir = out_dir;
  config.rung = "M2";
  config.dataset.source = "synthetic";
  config.dataset.k_core = 1;
  config.dataset.synthetic.users = 20;
  config.dataset.synthetic.items = 30;
  config.dataset.synthetic.clusters = 3;
  config.dataset.synthetic.min_len = 8;
  config.dataset.synthetic.max_len = 12;
  config.embeddings.dim = 8;
  config.embeddings.clusters = 3;
  config.embeddings.noise_scale = 0.5;
  config.tokenizer.encoder_dims = {16};
  config.tokenizer.levels = 2;
  config.tokenizer.codewords = 8;
  config.tokenizer.code_dim = 8;
  config.tokenizer.tau_max = 1.0;
  config.tokenizer.tau_min = 0.1;
  config.recommender.model_dim = 16;
  config.recommender.encoder_layers = 1;
  config.recommender.decoder_layers = 1;
  config.recommender.heads = 2;
  config.recommender.ffn_dim = 32;
  config.recommender.dropout = 0.0;
  config.recommender.max_items = 6;
  config.stage1.batch_size = 64;
  config.stage1.lr = 1e-3;
  config.stage1.weight_decay = 0.0;
  config.stage1.epochs = 10;
  config.stage1.lambda_cu = 0.0;
  config.stage1.anneal = false;
  config.stage1.kmeans_init = false;
  config.stage2.batch_size = 64;
  config.stage2.backbone_lr = 1e-3;
  config.stage2.tokenizer_lr = 1e-4;
  config.stage2.weight_decay = 0.0;
  config.stage2.epochs = 2;
  config.stage2.patience = 2;
  config.stage2.lambda_recon = 0.5;
  config.stage2.beam_size = 30;
  config.stage2.eval_batch = 64;
  return config;
}

std::string fresh_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / name;
  fs::remove_all(dir);
  return dir.string();
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path);
  REQUIRE(static_cast<bool>(in));
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void spill(const fs::path& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
}

}  // namespace

TEST_SUITE("experiment") {

TEST_CASE("sha256 reproduces the published digests") {
  CHECK(sha256_hex("") ==
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  auto path = fs::temp_directory_path() / "unigrec_sha_test.txt";
  spill(path, "abc");
  CHECK(sha256_file(path.string()) == sha256_hex("abc"));
  fs::remove(path);
  CHECK_THROWS_AS(sha256_file(path.string()), DataError);
}

TEST_CASE("configs reject unknown keys instead of guessing") {
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"seeds", 1}}), ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"stage2", {{"bogus", 1}}}}),
                  ConfigError);
  CHECK_THROWS_AS(
      ExperimentConfig::from_json({{"dataset", {{"synthetic", {{"user", 5}}}}}}),
      ConfigError);
  CHECK_THROWS_AS(ExperimentConfig::from_json({{"rung", "M9"}}), ConfigError);
  CHECK_THROWS_AS(
      ExperimentConfig::from_json({{"stage1", {{"mode", "fuzzy"}}}}),
      ConfigError);
  CHECK_THROWS_AS(
      ExperimentConfig::from_json({{"tokenizer", {{"entropy_log_base", "ten"}}}}),
      ConfigError);
  CHECK_NOTHROW(ExperimentConfig::from_json(json::object()));
}

TEST_CASE("config serialization round-trips exactly") {
  auto config = tiny_experiment("/tmp/unigrec-roundtrip");
  config.stage1.mode = QuantizeMode::Hard;
  config.stage1.lambda_cu = 0.0;
  config.tokenizer.entropy_log_base = EntropyLogBase::Two;
  auto first = config.to_json();
  auto reparsed = ExperimentConfig::from_json(first);
  CHECK(reparsed.to_json().dump() == first.dump());
  CHECK(reparsed.stage1.mode == QuantizeMode::Hard);
  CHECK(reparsed.tokenizer.entropy_log_base == EntropyLogBase::Two);
}

TEST_CASE("config files must exist and hold valid JSON") {
  CHECK_THROWS_AS(ExperimentConfig::load("/nonexistent/config.json"), ConfigError);
  auto path = fs::temp_directory_path() / "unigrec_bad_config.json";
  spill(path, "{not json");
  CHECK_THROWS_AS(ExperimentConfig::load(path.string()), ConfigError);
  fs::remove(path);
}

TEST_CASE("the output root variable only reroots relative run dirs") {
  unsetenv("UNIGREC_OUT");
  ExperimentConfig config;
  config.out_dir = "runs/demo";
  CHECK(config.run_dir() == "runs/demo");
  setenv("UNIGREC_OUT", "/tmp/unigrec-root", 1);
  CHECK(config.run_dir() == "/tmp/unigrec-root/runs/demo");
  config.out_dir = "/abs/elsewhere";
  CHECK(config.run_dir() == "/abs/elsewhere");
  unsetenv("UNIGREC_OUT");
}

TEST_CASE("prepared artifacts are left alone until forced or reconfigured") {
  auto config = tiny_experiment(fresh_dir("unigrec-exp-noop"));
  cmd_prepare(config, false);
  fs::path run(config.run_dir());
  REQUIRE(fs::exists(run / "dataset.json"));
  REQUIRE(fs::exists(run / "embeddings.bin"));
  REQUIRE(fs::exists(run / "manifest-prepare.json"));

  // A satisfied manifest short-circuits the command entirely.
  spill(run / "dataset.json", "SENTINEL");
  cmd_prepare(config, false);
  CHECK(slurp(run / "dataset.json") == "SENTINEL");

  // force always regenerates.
  cmd_prepare(config, true);
  CHECK(slurp(run / "dataset.json") != "SENTINEL");

  // A config change invalidates the manifest without force.
  spill(run / "dataset.json", "SENTINEL");
  auto reseeded = config;
  reseeded.seed = 8;
  cmd_prepare(reseeded, false);
  CHECK(slurp(run / "dataset.json") != "SENTINEL");
  fs::remove_all(run);
}

TEST_CASE("each command names the producer of a missing prerequisite") {
  auto config = tiny_experiment(fresh_dir("unigrec-exp-prereq"));
  auto expect_mentions = [&](auto&& call, const std::string& producer) {
    try {
      call();
      FAIL("expected a missing-prerequisite error");
    } catch (const PrerequisiteError& e) {
      CHECK(std::string(e.what()).find("unigrec " + producer) != std::string::npos);
    }
  };
  expect_mentions([&] { cmd_pretrain(config, false); }, "prepare");
  expect_mentions([&] { cmd_train_teacher(config, false); }, "prepare");
  cmd_prepare(config, false);
  expect_mentions([&] { cmd_joint(config, false); }, "pretrain");
  expect_mentions([&] { cmd_eval(config, false); }, "joint");
  expect_mentions([&] { cmd_analyze(config, false); }, "pretrain");
  fs::remove_all(config.run_dir());
}

TEST_CASE("the staged pipeline lays down the full artifact tree") {
  auto config = tiny_experiment(fresh_dir("unigrec-exp-pipeline"));
  cmd_prepare(config, false);
  cmd_pretrain(config, false);
  cmd_joint(config, false);
  cmd_eval(config, false);
  cmd_analyze(config, false);

  fs::path run(config.run_dir());
  for (const char* artifact :
       {"dataset.json", "embeddings.bin", "stage1/tokenizer.pt",
        "stage1/tokenizer.json", "identifiers-stage1.jsonl", "stage2/tokenizer.pt",
        "stage2/recommender.pt", "stage2/recommender.json",
        "identifiers-stage2.jsonl", "metrics.jsonl", "ranked-test.jsonl",
        "analysis/collision.csv", "analysis/usage_entropy.csv",
        "analysis/evolution_layers.csv", "analysis/evolution_patterns.csv",
        "analysis/pca_level0.csv", "analysis/pca_level1.csv",
        "analysis/collision_vs_epoch.csv", "manifest-prepare.json",
        "manifest-pretrain.json", "manifest-joint.json", "manifest-eval.json",
        "manifest-analyze.json"}) {
    CHECK_MESSAGE(fs::exists(run / artifact), artifact);
  }

  // The metrics log records the stages in pipeline order.
  std::ifstream metrics(run / "metrics.jsonl");
  std::vector<std::string> stages;
  std::string line;
  while (std::getline(metrics, line))
    if (!line.empty()) stages.push_back(json::parse(line).at("stage"));
  REQUIRE(!stages.empty());
  CHECK(stages.front() == "tokenizer");
  CHECK(stages.back() == "test");
  CHECK(std::find(stages.begin(), stages.end(), "joint") != stages.end());

  // Ranked dumps carry raw ids and descending scores for every user.
  std::ifstream ranked(run / "ranked-test.jsonl");
  std::int64_t rows = 0;
  while (std::getline(ranked, line)) {
    if (line.empty()) continue;
    auto obj = json::parse(line);
    CHECK(obj.at("user").get<std::string>().starts_with("u"));
    auto items = obj.at("items");
    auto scores = obj.at("scores");
    REQUIRE(items.size() == scores.size());
    for (std::size_t i = 0; i + 1 < scores.size(); ++i)
      CHECK(scores[i].get<double>() >= scores[i + 1].get<double>());
    for (const auto& item : items)
      CHECK(item.get<std::string>().starts_with("i"));
    ++rows;
  }
  CHECK(rows == 20);

  // A satisfied eval manifest is a no-op.
  spill(run / "ranked-test.jsonl", "SENTINEL");
  cmd_eval(config, false);
  CHECK(slurp(run / "ranked-test.jsonl") == "SENTINEL");
  fs::remove_all(run);
}

TEST_CASE("the ablation command sweeps rungs into one table") {
  auto config = tiny_experiment(fresh_dir("unigrec-exp-ablate"));
  cmd_ablate(config, {"M0", "M1"}, false);
  fs::path run(config.run_dir());
  REQUIRE(fs::exists(run / "ablation.csv"));
  std::ifstream csv(run / "ablation.csv");
  std::string line;
  REQUIRE(std::getline(csv, line));
  CHECK(line == "rung,recall_at_5,recall_at_10,ndcg_at_5,ndcg_at_10");
  std::vector<std::string> rows;
  while (std::getline(csv, line))
    if (!line.empty()) rows.push_back(line);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].starts_with("M0,"));
  CHECK(rows[1].starts_with("M1,"));
  CHECK(fs::exists(run / "ablate-M0" / "stage2" / "recommender.pt"));
  CHECK(fs::exists(run / "ablate-M1" / "stage2" / "recommender.pt"));
  // Ladder entries must be valid before any training starts.
  CHECK_THROWS_AS(cmd_ablate(config, {"M0", "M9"}, false), ConfigError);
  fs::remove_all(run);
}

}  // TEST_SUITE
