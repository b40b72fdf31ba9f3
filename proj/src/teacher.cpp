#include "unigrec/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "unigrec/errors.hpp"

namespace unigrec {

void TeacherConfig::validate() const {
  if (dim <= 0 || layers <= 0 || heads <= 0 || ffn_dim <= 0)
    throw ConfigError("teacher dimensions must be positive");
  if (dim % heads != 0) throw ConfigError("teacher dim must be divisible by heads");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("teacher dropout out of range");
  if (max_len <= 0) throw ConfigError("teacher max_len must be positive");
  if (batch_size <= 0 || epochs <= 0 || patience <= 0)
    throw ConfigError("teacher training parameters must be positive");
  if (lr <= 0.0) throw ConfigError("teacher lr must be positive");
}

TeacherImpl::TeacherImpl(std::int64_t num_items, TeacherConfig config)
    : num_items_(num_items), config_(std::move(config)) {
  config_.validate();
  if (num_items_ <= 0) throw ArgumentError("teacher needs at least one item");
  item_embedding_ = register_module(
      "item_embedding", torch::nn::Embedding(num_items_ + 1, config_.dim));
  positions_ = register_module("positions",
                               torch::nn::Embedding(config_.max_len, config_.dim));
  {
    torch::NoGradGuard guard;
    item_embedding_->weight.normal_(0.0, 0.02);
    item_embedding_->weight[num_items_].zero_();
    positions_->weight.normal_(0.0, 0.02);
  }
  auto layer_opts = torch::nn::TransformerEncoderLayerOptions(config_.dim, config_.heads)
                        .dim_feedforward(config_.ffn_dim)
                        .dropout(config_.dropout);
  encoder_ = register_module(
      "encoder", torch::nn::TransformerEncoder(torch::nn::TransformerEncoderLayer(layer_opts),
                                               config_.layers));
}

torch::Tensor TeacherImpl::states(const torch::Tensor& items) {
  if (items.dim() != 2) throw ShapeError("teacher expects [batch, time] items");
  auto length = items.size(1);
  if (length > config_.max_len)
    throw ShapeError("teacher sequence length " + std::to_string(length) +
                     " exceeds max_len " + std::to_string(config_.max_len));
  auto pos = torch::arange(length, torch::kLong);
  auto x = item_embedding_->forward(items) + positions_->forward(pos).unsqueeze(0);
  auto causal = torch::full({length, length},
                           -std::numeric_limits<float>::infinity(), torch::kFloat);
  causal = torch::triu(causal, 1);
  // (T, B, D) layout for the transformer stack
  auto out = encoder_->forward(x.permute({1, 0, 2}), causal, {});
  return out.permute({1, 0, 2});
}

torch::Tensor TeacherImpl::item_embedding_rows() {
  return item_embedding_->weight.narrow(0, 0, num_items_);
}

namespace {

struct TeacherBatchSource {
  // Per user: window of the train prefix, inputs right-padded to max_len with
  // aligned next-item labels (-1 where padded).
  std::vector<std::vector<std::int64_t>> inputs;
  std::vector<std::vector<std::int64_t>> labels;
};

TeacherBatchSource build_teacher_examples(const SequenceDataset& data,
                                          std::int64_t max_len,
                                          std::int64_t pad_item) {
  TeacherBatchSource out;
  auto users = data.num_users();
  out.inputs.reserve(users);
  out.labels.reserve(users);
  for (std::int64_t u = 0; u < users; ++u) {
    auto prefix = data.train_items(u);
    std::vector<std::int64_t> window(prefix.begin(), prefix.end());
    if (std::ssize(window) > max_len + 1)
      window.erase(window.begin(), window.end() - (max_len + 1));
    auto real = std::ssize(window) - 1;
    std::vector<std::int64_t> in(max_len, pad_item);
    std::vector<std::int64_t> lab(max_len, -1);
    for (std::int64_t t = 0; t < real; ++t) {
      in[t] = window[t];
      lab[t] = window[t + 1];
    }
    out.inputs.push_back(std::move(in));
    out.labels.push_back(std::move(lab));
  }
  return out;
}

torch::Tensor rows_to_tensor(const std::vector<std::vector<std::int64_t>>& rows,
                             const std::vector<std::int64_t>& pick) {
  auto cols = std::ssize(rows.front());
  auto out = torch::empty({std::ssize(pick), cols}, torch::kLong);
  auto acc = out.accessor<std::int64_t, 2>();
  for (std::int64_t i = 0; i < std::ssize(pick); ++i)
    for (std::int64_t j = 0; j < cols; ++j) acc[i][j] = rows[pick[i]][j];
  return out;
}

}  // namespace

double teacher_valid_recall(Teacher& teacher, const SequenceDataset& data,
                            std::int64_t k) {
  torch::NoGradGuard guard;
  bool was_training = teacher->is_training();
  teacher->eval();
  auto max_len = teacher->config().max_len;
  auto pad_item = teacher->pad_index();
  auto users = data.num_users();
  double hits = 0.0;
  const std::int64_t chunk = 256;
  for (std::int64_t start = 0; start < users; start += chunk) {
    auto stop = std::min(users, start + chunk);
    auto batch = stop - start;
    auto items = torch::full({batch, max_len}, pad_item, torch::kLong);
    auto acc = items.accessor<std::int64_t, 2>();
    std::vector<std::int64_t> last_index(batch);
    for (std::int64_t i = 0; i < batch; ++i) {
      auto prefix = data.train_items(start + i);
      auto real = std::min<std::int64_t>(std::ssize(prefix), max_len);
      for (std::int64_t t = 0; t < real; ++t)
        acc[i][t] = prefix[prefix.size() - real + t];
      last_index[i] = real - 1;
    }
    auto states = teacher->states(items);
    auto gather = torch::from_blob(last_index.data(), {batch}, torch::kLong).clone();
    auto last = states
                    .gather(1, gather.view({batch, 1, 1})
                                   .expand({batch, 1, states.size(2)}))
                    .squeeze(1);  // [B, D] state at each row's last real position
    auto scores = last.matmul(teacher->item_embedding_rows().t());
    auto top = std::get<1>(scores.topk(std::min(k, teacher->num_items()), 1));
    auto top_acc = top.accessor<std::int64_t, 2>();
    for (std::int64_t i = 0; i < batch; ++i) {
      auto target = data.valid_target(start + i);
      for (std::int64_t j = 0; j < top.size(1); ++j)
        if (top_acc[i][j] == target) {
          hits += 1.0;
          break;
        }
    }
  }
  if (was_training) teacher->train();
  return hits / static_cast<double>(users);
}

Teacher train_teacher(const SequenceDataset& data, const TeacherConfig& config,
                      std::uint64_t seed) {
  config.validate();
  torch::manual_seed(seed);
  auto num_items = data.num_items();
  Teacher teacher(num_items, config);
  auto examples = build_teacher_examples(data, config.max_len, num_items);
  auto users = data.num_users();

  torch::optim::Adam optimizer(teacher->parameters(),
                               torch::optim::AdamOptions(config.lr));
  double best_recall = -1.0;
  std::int64_t stale = 0;
  std::stringstream best_state;

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    teacher->train();
    auto order = torch::randperm(users, torch::kLong);
    auto order_acc = order.accessor<std::int64_t, 1>();
    for (std::int64_t start = 0; start < users; start += config.batch_size) {
      auto stop = std::min<std::int64_t>(users, start + config.batch_size);
      std::vector<std::int64_t> pick;
      pick.reserve(stop - start);
      for (std::int64_t i = start; i < stop; ++i) pick.push_back(order_acc[i]);

      auto items = rows_to_tensor(examples.inputs, pick);
      auto labels = rows_to_tensor(examples.labels, pick);
      auto real = labels.ge(0);
      auto labels_safe = labels.clamp_min(0);

      auto states = teacher->states(items);
      auto table = teacher->item_embedding_rows();
      auto pos_emb = table.index_select(0, labels_safe.reshape(-1))
                         .reshape({labels.size(0), labels.size(1), config.dim});
      auto negatives = torch::randint(num_items, labels.sizes(), torch::kLong);
      negatives = torch::where(negatives.eq(labels_safe),
                               (negatives + 1) % num_items, negatives);
      auto neg_emb = table.index_select(0, negatives.reshape(-1))
                         .reshape({labels.size(0), labels.size(1), config.dim});

      auto pos_score = (states * pos_emb).sum(-1);
      auto neg_score = (states * neg_emb).sum(-1);
      auto real_f = real.to(torch::kFloat);
      auto count = real_f.sum().clamp_min(1.0);
      auto loss = ((torch::softplus(-pos_score) + torch::softplus(neg_score)) * real_f)
                      .sum() / count;
      if (!std::isfinite(loss.item<double>()))
        throw TrainingError("teacher loss became non-finite at epoch " +
                            std::to_string(epoch));
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
    }

    auto recall = teacher_valid_recall(teacher, data, 10);
    if (recall > best_recall) {
      best_recall = recall;
      stale = 0;
      best_state.str("");
      best_state.clear();
      torch::save(teacher, best_state);
    } else if (++stale >= config.patience) {
      break;
    }
  }
  if (best_state.str().empty()) throw TrainingError("teacher never completed an epoch");
  torch::load(teacher, best_state);
  teacher->eval();
  return teacher;
}

EmbeddingTable export_item_embeddings(Teacher& teacher) {
  torch::NoGradGuard guard;
  return EmbeddingTable{teacher->item_embedding_rows().detach().clone()};
}

void save_teacher(Teacher& teacher, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json meta;
  const auto& c = teacher->config();
  meta["num_items"] = teacher->num_items();
  meta["dim"] = c.dim;
  meta["layers"] = c.layers;
  meta["heads"] = c.heads;
  meta["ffn_dim"] = c.ffn_dim;
  meta["dropout"] = c.dropout;
  meta["max_len"] = c.max_len;
  std::ofstream out(fs::path(dir) / "teacher.json");
  if (!out) throw DataError("cannot write teacher metadata in " + dir);
  out << meta.dump(2) << "\n";
  torch::save(teacher, (fs::path(dir) / "teacher.pt").string());
}

Teacher load_teacher(const std::string& dir) {
  namespace fs = std::filesystem;
  std::ifstream in(fs::path(dir) / "teacher.json");
  if (!in) throw DataError("cannot read teacher metadata in " + dir);
  nlohmann::json meta = nlohmann::json::parse(in);
  TeacherConfig config;
  config.dim = meta.at("dim").get<std::int64_t>();
  config.layers = meta.at("layers").get<std::int64_t>();
  config.heads = meta.at("heads").get<std::int64_t>();
  config.ffn_dim = meta.at("ffn_dim").get<std::int64_t>();
  config.dropout = meta.at("dropout").get<double>();
  config.max_len = meta.at("max_len").get<std::int64_t>();
  Teacher teacher(meta.at("num_items").get<std::int64_t>(), config);
  torch::load(teacher, (fs::path(dir) / "teacher.pt").string());
  teacher->eval();
  return teacher;
}

}  // namespace unigrec
