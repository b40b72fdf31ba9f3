#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include <torch/torch.h>

#include <doctest.h>

#include "unigrec/dataset.hpp"
#include "unigrec/errors.hpp"
#include "unigrec/fixture.hpp"
#include "unigrec/teacher.hpp"

using namespace unigrec;

namespace {

TeacherConfig tiny_config() {
  TeacherConfig config;
  config.dim = 16;
  config.layers = 1;
  config.heads = 2;
  config.ffn_dim = 32;
  config.dropout = 0.0;
  config.max_len = 16;
  config.batch_size = 64;
  config.lr = 1e-3;
  config.epochs = 12;
  config.patience = 4;
  return config;
}

const SequenceDataset& clustered_data() {
  static SequenceDataset data = [] {
    SyntheticDataSpec spec;
    spec.users = 120;
    spec.items = 40;
    spec.clusters = 4;
    spec.min_len = 8;
    spec.max_len = 14;
    spec.seed = 99;
    return build_sequences(synth_interactions(spec));
  }();
  return data;
}

// Recall@10 of ranking every user's validation target by global train-split
// item frequency.
double popularity_recall(const SequenceDataset& data) {
  std::map<std::int64_t, std::int64_t> counts;
  for (std::int64_t u = 0; u < data.num_users(); ++u)
    for (auto item : data.train_items(u)) ++counts[item];
  std::vector<std::pair<std::int64_t, std::int64_t>> ranked;  // (-count, item)
  for (std::int64_t i = 0; i < data.num_items(); ++i)
    ranked.push_back({-counts[i], i});
  std::sort(ranked.begin(), ranked.end());
  std::int64_t hits = 0;
  for (std::int64_t u = 0; u < data.num_users(); ++u) {
    auto target = data.valid_target(u);
    for (int r = 0; r < 10; ++r)
      if (ranked[r].second == target) {
        ++hits;
        break;
      }
  }
  return static_cast<double>(hits) / data.num_users();
}

}  // namespace

TEST_SUITE("teacher") {

TEST_CASE("config validation rejects out-of-range values") {
  auto bad = tiny_config();
  bad.dim = 15;  // not a multiple of heads
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.max_len = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.patience = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  CHECK_NOTHROW(tiny_config().validate());
}

TEST_CASE("pad index sits one past the item range") {
  torch::manual_seed(1);
  Teacher teacher(25, tiny_config());
  CHECK(teacher->num_items() == 25);
  CHECK(teacher->pad_index() == 25);
  auto rows = teacher->item_embedding_rows();
  CHECK((rows.sizes() == torch::IntArrayRef({25, 16})));
}

TEST_CASE("states are causal over the item sequence") {
  torch::manual_seed(2);
  Teacher teacher(10, tiny_config());
  teacher->eval();
  auto items = torch::tensor({{3, 1, 4, 1, 5}}, torch::kLong);
  auto base = teacher->states(items);
  CHECK((base.sizes() == torch::IntArrayRef({1, 5, 16})));
  auto poked = items.clone();
  poked[0][3] = 9;
  auto after = teacher->states(poked);
  CHECK(torch::allclose(base.narrow(1, 0, 3), after.narrow(1, 0, 3), 1e-5, 1e-5));
  CHECK_FALSE(torch::allclose(base[0][3], after[0][3], 1e-3, 1e-3));
}

TEST_CASE("right padding never leaks into earlier states") {
  torch::manual_seed(3);
  Teacher teacher(10, tiny_config());
  teacher->eval();
  auto pad = static_cast<int>(teacher->pad_index());
  auto a = torch::tensor({{3, 1, 4, pad, pad}}, torch::kLong);
  auto b = torch::tensor({{3, 1, 4, 2, 7}}, torch::kLong);
  auto sa = teacher->states(a);
  auto sb = teacher->states(b);
  CHECK(torch::allclose(sa.narrow(1, 0, 3), sb.narrow(1, 0, 3), 1e-5, 1e-5));
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto first = train_teacher(clustered_data(), tiny_config(), 5);
  auto second = train_teacher(clustered_data(), tiny_config(), 5);
  CHECK(torch::equal(first->item_embedding_rows(), second->item_embedding_rows()));
  auto third = train_teacher(clustered_data(), tiny_config(), 6);
  CHECK_FALSE(torch::equal(first->item_embedding_rows(),
                           third->item_embedding_rows()));
}

TEST_CASE("trained teacher beats both chance and popularity ranking") {
  auto teacher = train_teacher(clustered_data(), tiny_config(), 5);
  double recall = teacher_valid_recall(teacher, clustered_data());
  double chance = 10.0 / clustered_data().num_items();
  CHECK(recall > chance);
  CHECK(recall > popularity_recall(clustered_data()));
}

TEST_CASE("training improves validation recall over the fresh model") {
  torch::manual_seed(4);
  Teacher fresh(clustered_data().num_items(), tiny_config());
  double before = teacher_valid_recall(fresh, clustered_data());
  auto trained = train_teacher(clustered_data(), tiny_config(), 5);
  double after = teacher_valid_recall(trained, clustered_data());
  CHECK(after > before);
}

TEST_CASE("learned embeddings group items by interaction cluster") {
  auto teacher = train_teacher(clustered_data(), tiny_config(), 5);
  auto rows = teacher->item_embedding_rows();
  auto unit = rows / rows.norm(2, 1, true).clamp_min(1e-12);
  auto sims = unit.matmul(unit.t());
  const auto& data = clustered_data();
  double within = 0.0, across = 0.0;
  std::int64_t n_within = 0, n_across = 0;
  for (std::int64_t i = 0; i < data.num_items(); ++i)
    for (std::int64_t j = i + 1; j < data.num_items(); ++j) {
      bool same = fixture_item_cluster(data.item_ids[i], 4) ==
                  fixture_item_cluster(data.item_ids[j], 4);
      (same ? within : across) += sims[i][j].item<double>();
      (same ? n_within : n_across) += 1;
    }
  CHECK(within / n_within > across / n_across);
}

TEST_CASE("exported embedding table matches the model rows") {
  auto teacher = train_teacher(clustered_data(), tiny_config(), 5);
  auto table = export_item_embeddings(teacher);
  CHECK(table.items() == clustered_data().num_items());
  CHECK(table.dim() == 16);
  CHECK(torch::equal(table.matrix, teacher->item_embedding_rows()));
  auto again = export_item_embeddings(teacher);
  CHECK(torch::equal(table.matrix, again.matrix));
}

TEST_CASE("validation recall stays within the unit interval") {
  torch::manual_seed(6);
  Teacher fresh(clustered_data().num_items(), tiny_config());
  double recall = teacher_valid_recall(fresh, clustered_data());
  CHECK(recall >= 0.0);
  CHECK(recall <= 1.0);
}

TEST_CASE("checkpoints restore identical states and recall") {
  auto teacher = train_teacher(clustered_data(), tiny_config(), 5);
  auto dir = (std::filesystem::temp_directory_path() / "teacher_ckpt").string();
  save_teacher(teacher, dir);
  auto restored = load_teacher(dir);
  CHECK(restored->num_items() == teacher->num_items());
  CHECK(restored->config().dim == 16);
  CHECK(torch::equal(restored->item_embedding_rows(),
                     teacher->item_embedding_rows()));
  CHECK(teacher_valid_recall(restored, clustered_data()) ==
        teacher_valid_recall(teacher, clustered_data()));
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
