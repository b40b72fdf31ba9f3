#include "unigrec/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "unigrec/errors.hpp"
#include "unigrec/evaluation.hpp"

namespace unigrec {

MetricsLogger::MetricsLogger(std::string path, bool truncate) : path_(std::move(path)) {
  std::ofstream out(path_, truncate ? std::ios::trunc : std::ios::app);
  if (!out) throw DataError("cannot open metrics log " + path_);
}

void MetricsLogger::append(const nlohmann::json& record) {
  if (path_.empty()) return;
  std::ofstream out(path_, std::ios::app);
  if (!out) throw DataError("cannot append to metrics log " + path_);
  out << record.dump() << "\n";
}

void Stage1Config::validate() const {
  if (batch_size <= 0 || epochs <= 0) throw ConfigError("stage-1 batch/epochs must be positive");
  if (lr <= 0.0) throw ConfigError("stage-1 lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("stage-1 weight decay must be non-negative");
  if (lambda_cu < 0.0) throw ConfigError("stage-1 lambda_cu must be non-negative");
  if (mode == QuantizeMode::Hard && lambda_cu != 0.0)
    throw ConfigError("codeword uniformity needs soft assignments; hard mode has none");
  if (kmeans_iterations <= 0) throw ConfigError("kmeans_iterations must be positive");
}

void Stage2Config::validate() const {
  if (batch_size <= 0 || epochs <= 0 || patience <= 0)
    throw ConfigError("stage-2 batch/epochs/patience must be positive");
  if (backbone_lr <= 0.0) throw ConfigError("stage-2 backbone lr must be positive");
  if (tokenizer_lr < 0.0) throw ConfigError("stage-2 tokenizer lr must be non-negative");
  if (weight_decay < 0.0) throw ConfigError("stage-2 weight decay must be non-negative");
  if (lambda_recon < 0.0 || lambda_cd_tokenizer < 0.0 || lambda_cd_recommender < 0.0)
    throw ConfigError("stage-2 loss weights must be non-negative");
  if (tau_prime <= 0.0) throw ConfigError("stage-2 tau_prime must be positive");
  if (beam_size < 10) throw ConfigError("stage-2 beam size below the largest metric cutoff");
  if (eval_batch <= 0) throw ConfigError("stage-2 eval_batch must be positive");
  if (!soft_input && joint)
    throw ConfigError("joint tokenizer updates need soft identifier inputs");
}

AblationRung parse_rung(const std::string& name) {
  for (int i = 0; i <= 6; ++i)
    if (name == "M" + std::to_string(i)) return static_cast<AblationRung>(i);
  throw ConfigError("unknown ablation rung: " + name + " (expected M0..M6)");
}

std::string rung_name(AblationRung rung) {
  return "M" + std::to_string(static_cast<int>(rung));
}

void apply_rung(AblationRung rung, Stage1Config& stage1, Stage2Config& stage2) {
  auto r = static_cast<int>(rung);
  stage1.mode = r == 0 ? QuantizeMode::Hard : QuantizeMode::Soft;
  if (r < 3) stage1.lambda_cu = 0.0;
  stage2.soft_input = r >= 1;
  stage2.joint = r >= 2;
  if (r < 2) {
    stage2.tokenizer_lr = 0.0;
    stage2.lambda_recon = 0.0;
  }
  if (r != 4 && r != 6) stage2.lambda_cd_tokenizer = 0.0;
  if (r != 5 && r != 6) stage2.lambda_cd_recommender = 0.0;
}

Stage1Result pretrain_tokenizer(const EmbeddingTable& embeddings,
                                const TokenizerConfig& tokenizer_config,
                                const Stage1Config& config, std::uint64_t seed,
                                MetricsLogger* logger) {
  config.validate();
  torch::manual_seed(seed);
  auto z = embeddings.matrix.to(torch::kFloat);
  auto n = z.size(0);
  Tokenizer tokenizer(z.size(1), tokenizer_config);
  tokenizer->calibrate_encoder_scale(z);
  if (config.kmeans_init)
    tokenizer->init_codebooks_kmeans(z, seed, static_cast<int>(config.kmeans_iterations));
  torch::optim::AdamW optimizer(
      tokenizer->parameters(),
      torch::optim::AdamWOptions(config.lr).weight_decay(config.weight_decay));

  auto steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  auto total_steps = config.epochs * steps_per_epoch;
  std::int64_t step = 0;
  const auto& tc = tokenizer->config();

  Stage1Result result;
  result.tokenizer = tokenizer;
  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    tokenizer->train();
    auto order = torch::randperm(n, torch::kLong);
    double epoch_loss = 0.0, epoch_recon = 0.0;
    std::int64_t batches = 0;
    double tau = tc.tau_max;
    for (std::int64_t start = 0; start < n; start += config.batch_size) {
      auto span = std::min(config.batch_size, n - start);
      auto batch = z.index_select(0, order.narrow(0, start, span));
      if (config.mode == QuantizeMode::Soft && config.anneal)
        tau = anneal_temperature(step, total_steps, tc.tau_max, tc.tau_min);

      auto q = tokenizer->quantize(batch, tau, config.mode);
      auto recon = tokenizer->decode(q.aggregated);
      auto l_recon = recon_loss(recon, batch);
      auto loss = l_recon;
      if (config.mode == QuantizeMode::Soft) {
        if (config.lambda_cu != 0.0)
          loss = loss + config.lambda_cu *
                            uniformity_loss(q.probs, tc.entropy_log_base);
      } else {
        loss = loss + quant_loss(q, tc.beta);
      }
      auto value = loss.item<double>();
      if (!std::isfinite(value))
        throw TrainingError("tokenizer pretraining diverged at epoch " +
                            std::to_string(epoch) + ", step " + std::to_string(step));
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      epoch_loss += value;
      epoch_recon += l_recon.item<double>();
      ++batches;
      ++step;
    }

    auto identifiers = assign_identifiers(tokenizer, z);
    auto collisions = collision_rate(identifiers);
    result.collision_per_epoch.push_back(collisions);
    result.loss_per_epoch.push_back(epoch_loss / batches);
    if (logger)
      logger->append({{"stage", "tokenizer"},
                      {"epoch", epoch},
                      {"loss", epoch_loss / batches},
                      {"recon", epoch_recon / batches},
                      {"collision_rate", collisions},
                      {"tau", tau}});
  }
  tokenizer->eval();
  return result;
}

namespace {

struct TrainExample {
  std::int64_t user = 0;
  std::int64_t position = 0;  // target index within the train prefix
};

std::vector<TrainExample> build_examples(const SequenceDataset& data) {
  std::vector<TrainExample> out;
  for (std::int64_t u = 0; u < data.num_users(); ++u) {
    auto m = std::ssize(data.train_items(u));
    for (std::int64_t t = 1; t < m; ++t) out.push_back({u, t});
  }
  if (out.empty())
    throw TrainingError("no training examples: every train prefix has length 1");
  return out;
}

struct Batch {
  torch::Tensor histories;  // [B, max_items] long, -1 = pad
  torch::Tensor targets;    // [B] long item indices
};

Batch make_batch(const SequenceDataset& data, const std::vector<TrainExample>& examples,
                 const torch::Tensor& picks, std::int64_t max_items) {
  auto b = picks.size(0);
  Batch batch{torch::empty({b, max_items}, torch::kLong),
              torch::empty({b}, torch::kLong)};
  auto hist = batch.histories.accessor<std::int64_t, 2>();
  auto tgt = batch.targets.accessor<std::int64_t, 1>();
  auto pick = picks.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < b; ++i) {
    const auto& ex = examples[pick[i]];
    auto prefix = data.train_items(ex.user);
    auto padded = truncate_pad(prefix.subspan(0, ex.position), max_items, -1);
    for (std::int64_t t = 0; t < max_items; ++t) hist[i][t] = padded.items[t];
    tgt[i] = prefix[ex.position];
  }
  return batch;
}

// Vocabulary ids of each item's dedup digit, [n_items] long.
torch::Tensor dedup_vocab_ids(const std::vector<ItemIdentifier>& identifiers,
                              const VocabularyLayout& layout) {
  auto out = torch::empty({std::ssize(identifiers)}, torch::kLong);
  auto acc = out.accessor<std::int64_t, 1>();
  for (std::int64_t i = 0; i < std::ssize(identifiers); ++i)
    acc[i] = layout.dedup_token(identifiers[i].dedup);
  return out;
}

}  // namespace

JointTrainResult joint_train(const SequenceDataset& data,
                             const EmbeddingTable& embeddings, Tokenizer& tokenizer,
                             const std::optional<EmbeddingTable>& teacher_embeddings,
                             const RecommenderConfig& recommender_config,
                             const Stage2Config& config, std::uint64_t seed,
                             MetricsLogger* logger) {
  config.validate();
  recommender_config.validate();
  bool distill = config.lambda_cd_tokenizer > 0.0 || config.lambda_cd_recommender > 0.0;
  if (distill && !teacher_embeddings)
    throw ConfigError("distillation weights set but no teacher embeddings given");
  if (teacher_embeddings && teacher_embeddings->matrix.size(0) != data.num_items())
    throw ShapeError("teacher table does not cover the item catalog");

  torch::manual_seed(seed);
  auto z = embeddings.matrix.to(torch::kFloat);
  if (z.size(0) != data.num_items())
    throw ShapeError("semantic embeddings do not cover the item catalog");
  auto tau = tokenizer->config().tau_min;

  // Vocabulary sizing: leave generous headroom over the worst dedup ordinal
  // seen at initialization, and fail loudly if joint drift ever exceeds it.
  auto initial = assign_identifiers(tokenizer, z);
  std::int64_t max_dedup = 0;
  for (const auto& ident : initial) max_dedup = std::max(max_dedup, ident.dedup);
  VocabularyLayout layout;
  layout.levels = tokenizer->config().levels;
  layout.codewords = tokenizer->config().codewords;
  layout.dedup_reserve = std::max<std::int64_t>(4, 4 * (max_dedup + 1));
  Recommender recommender(layout, recommender_config);

  DistillationHeads heads{nullptr};
  torch::Tensor teacher_table;
  if (distill) {
    teacher_table = teacher_embeddings->matrix.to(torch::kFloat).detach();
    heads = DistillationHeads(recommender_config.model_dim, teacher_table.size(1),
                              tokenizer->input_dim());
  }

  std::vector<torch::optim::OptimizerParamGroup> groups;
  {
    auto backbone = recommender->parameters();
    if (heads)
      for (auto& p : heads->parameters()) backbone.push_back(p);
    auto backbone_opts = std::make_unique<torch::optim::AdamWOptions>(config.backbone_lr);
    backbone_opts->weight_decay(config.weight_decay);
    groups.emplace_back(std::move(backbone), std::move(backbone_opts));
    if (config.joint) {
      auto tok_opts = std::make_unique<torch::optim::AdamWOptions>(config.tokenizer_lr);
      tok_opts->weight_decay(config.weight_decay);
      groups.emplace_back(tokenizer->parameters(), std::move(tok_opts));
    }
  }
  torch::optim::AdamW optimizer(groups, torch::optim::AdamWOptions(config.backbone_lr)
                                            .weight_decay(config.weight_decay));

  auto examples = build_examples(data);
  auto num_examples = std::ssize(examples);
  auto max_items = recommender_config.max_items;
  auto levels = layout.levels;

  // Frozen-tokenizer runs quantize the catalog once and reuse the result.
  torch::Tensor frozen_dists;
  if (config.soft_input && !config.joint) {
    torch::NoGradGuard guard;
    tokenizer->eval();
    frozen_dists = tokenizer->quantize(z, tau, QuantizeMode::Soft).probs;
  }

  auto level_offsets =
      torch::arange(levels, torch::kLong) * layout.codewords + VocabularyLayout::kSpecials;

  JointTrainResult result;
  result.recommender = recommender;
  result.heads = heads;

  std::stringstream best_recommender, best_tokenizer, best_heads;
  std::int64_t stale = 0;
  double best_recall = -1.0;

  for (std::int64_t epoch = 0; epoch < config.epochs; ++epoch) {
    auto epoch_idents =
        config.joint ? assign_identifiers(tokenizer, z, layout.dedup_reserve) : initial;
    auto ident_tokens = identifier_tokens(epoch_idents, layout);
    auto dedup_ids = dedup_vocab_ids(epoch_idents, layout);

    recommender->train();
    if (config.joint) tokenizer->train();
    if (heads) heads->train();

    double sums[4] = {0, 0, 0, 0};  // rec, recon, cd_tokenizer, cd_recommender
    double epoch_loss = 0.0;
    std::int64_t batches = 0;
    auto order = torch::randperm(num_examples, torch::kLong);
    for (std::int64_t start = 0; start < num_examples; start += config.batch_size) {
      auto span = std::min(config.batch_size, num_examples - start);
      auto batch = make_batch(data, examples, order.narrow(0, start, span), max_items);

      torch::Tensor dists, recon_all;
      if (config.soft_input) {
        if (config.joint) {
          auto q = tokenizer->quantize(z, tau, QuantizeMode::Soft);
          dists = q.probs;
          recon_all = tokenizer->decode(q.aggregated);
        } else {
          dists = frozen_dists;
        }
      }

      torch::Tensor memory, token_pad, target_states, labels;
      if (config.soft_input) {
        auto [emb, pad] = recommender->history_embeddings_soft(batch.histories, dists,
                                                               dedup_ids);
        memory = recommender->encode_history(emb, pad);
        token_pad = pad;
        auto target_dists = dists.index_select(0, batch.targets);
        target_states = recommender->decode_teacher_forced(
            memory, pad, recommender->target_embeddings_soft(target_dists));
        auto level_labels = target_dists.argmax(-1) + level_offsets.unsqueeze(0);
        auto dedup_labels = dedup_ids.index_select(0, batch.targets).unsqueeze(1);
        labels = torch::cat({level_labels, dedup_labels}, 1);
      } else {
        auto [emb, pad] = recommender->history_embeddings_hard(batch.histories,
                                                               ident_tokens);
        memory = recommender->encode_history(emb, pad);
        token_pad = pad;
        labels = ident_tokens.index_select(0, batch.targets);
        target_states = recommender->decode_teacher_forced(
            memory, pad, recommender->target_embeddings_hard(labels));
      }

      auto logits = recommender->vocab_logits(target_states);
      auto l_rec = rec_loss(logits, labels);
      auto loss = l_rec;
      sums[0] += l_rec.item<double>();

      if (config.joint && config.lambda_recon != 0.0) {
        auto diff = (recon_all - z).index_select(0, batch.targets);
        auto l_recon = diff.pow(2).sum(-1).mean();
        loss = loss + config.lambda_recon * l_recon;
        sums[1] += l_recon.item<double>();
      }
      if (config.lambda_cd_tokenizer > 0.0) {
        auto enc_z = heads->encoder_to_tokenizer->forward(
            pool_encoder(memory, token_pad));
        auto tea = teacher_table.index_select(0, batch.targets);
        auto tea_z = heads->teacher_to_tokenizer->forward(tea);
        auto l_cdt = tokenizer_distill_loss(tokenizer, enc_z, tea_z, tau);
        loss = loss + config.lambda_cd_tokenizer * l_cdt;
        sums[2] += l_cdt.item<double>();
      }
      if (config.lambda_cd_recommender > 0.0) {
        auto dec = heads->decoder_to_teacher->forward(pool_decoder(target_states));
        auto tea = teacher_table.index_select(0, batch.targets);
        auto l_cdr = recommender_distill_loss(dec, tea, config.tau_prime);
        loss = loss + config.lambda_cd_recommender * l_cdr;
        sums[3] += l_cdr.item<double>();
      }

      auto value = loss.item<double>();
      if (!std::isfinite(value))
        throw TrainingError("joint training diverged at epoch " + std::to_string(epoch));
      optimizer.zero_grad();
      loss.backward();
      optimizer.step();
      epoch_loss += value;
      ++batches;
    }

    // Validation on a freshly assigned identifier set (capacity-checked under
    // joint updates so silent vocabulary growth is impossible).
    auto valid_idents =
        config.joint ? assign_identifiers(tokenizer, z, layout.dedup_reserve) : initial;
    auto metrics = full_rank_evaluate(recommender, valid_idents, data, Split::Valid,
                                      config.beam_size, config.eval_batch);
    auto collisions = collision_rate(valid_idents);
    if (logger)
      logger->append({{"stage", "joint"},
                      {"epoch", epoch},
                      {"loss", epoch_loss / batches},
                      {"rec", sums[0] / batches},
                      {"recon", sums[1] / batches},
                      {"cd_tokenizer", sums[2] / batches},
                      {"cd_recommender", sums[3] / batches},
                      {"collision_rate", collisions},
                      {"valid_recall_at_10", metrics.recall_at_10},
                      {"valid_ndcg_at_10", metrics.ndcg_at_10}});

    if (metrics.recall_at_10 > best_recall) {
      best_recall = metrics.recall_at_10;
      result.best_epoch = epoch;
      stale = 0;
      auto reset = [](std::stringstream& s) { s.str(""); s.clear(); };
      reset(best_recommender);
      torch::save(recommender, best_recommender);
      reset(best_tokenizer);
      torch::save(tokenizer, best_tokenizer);
      if (heads) {
        reset(best_heads);
        torch::save(heads, best_heads);
      }
    } else if (++stale >= config.patience) {
      break;
    }
  }

  if (result.best_epoch < 0) throw TrainingError("joint training never completed an epoch");
  torch::load(recommender, best_recommender);
  torch::load(tokenizer, best_tokenizer);
  if (heads) torch::load(heads, best_heads);
  recommender->eval();
  tokenizer->eval();
  if (heads) heads->eval();

  result.best_valid_recall_at_10 = best_recall;
  result.identifiers =
      config.joint ? assign_identifiers(tokenizer, z, layout.dedup_reserve) : initial;
  return result;
}

void snapshot_identifiers(Tokenizer& tokenizer, const EmbeddingTable& embeddings,
                          const std::string& path) {
  auto identifiers =
      assign_identifiers(tokenizer, embeddings.matrix.to(torch::kFloat));
  save_identifiers(identifiers, path);
}

}  // namespace unigrec
