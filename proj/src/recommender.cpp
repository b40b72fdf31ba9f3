#include "unigrec/recommender.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "unigrec/errors.hpp"

namespace unigrec {

using json = nlohmann::json;

std::int64_t VocabularyLayout::level_offset(std::int64_t level) const {
  if (level < 0 || level >= levels) {
    throw std::out_of_range("vocabulary level " + std::to_string(level) +
                            " out of range [0, " + std::to_string(levels) + ")");
  }
  return kSpecials + level * codewords;
}

std::int64_t VocabularyLayout::code_token(std::int64_t level, std::int64_t k) const {
  if (k < 0 || k >= codewords) {
    throw std::out_of_range("codeword " + std::to_string(k) + " out of range");
  }
  return level_offset(level) + k;
}

std::int64_t VocabularyLayout::dedup_token(std::int64_t dedup) const {
  if (dedup < 0 || dedup >= dedup_reserve) {
    throw CapacityError("dedup token " + std::to_string(dedup) +
                        " exceeds reserve of " + std::to_string(dedup_reserve));
  }
  return dedup_offset() + dedup;
}

void VocabularyLayout::validate() const {
  if (levels < 1) throw ConfigError("layout levels must be >= 1");
  if (codewords < 2) throw ConfigError("layout codewords must be >= 2");
  if (dedup_reserve < 1) throw ConfigError("dedup_reserve must be >= 1");
}

torch::Tensor identifier_tokens(const std::vector<ItemIdentifier>& identifiers,
                                const VocabularyLayout& layout) {
  const auto n = static_cast<std::int64_t>(identifiers.size());
  auto tokens = torch::empty({n, layout.tokens_per_item()}, torch::kLong);
  auto acc = tokens.accessor<std::int64_t, 2>();
  for (std::int64_t i = 0; i < n; ++i) {
    const auto& ident = identifiers[i];
    if (static_cast<std::int64_t>(ident.codes.size()) != layout.levels) {
      throw ShapeError("identifier " + std::to_string(i) + " has " +
                       std::to_string(ident.codes.size()) + " codes, expected " +
                       std::to_string(layout.levels));
    }
    for (std::int64_t l = 0; l < layout.levels; ++l) {
      acc[i][l] = layout.code_token(l, ident.codes[l]);
    }
    acc[i][layout.levels] = layout.dedup_token(ident.dedup);
  }
  return tokens;
}

void RecommenderConfig::validate() const {
  if (model_dim < 1 || heads < 1 || model_dim % heads != 0) {
    throw ConfigError("model_dim must be a positive multiple of heads");
  }
  if (encoder_layers < 1 || decoder_layers < 1) {
    throw ConfigError("encoder_layers and decoder_layers must be >= 1");
  }
  if (ffn_dim < 1) throw ConfigError("ffn_dim must be >= 1");
  if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must be in [0, 1)");
  if (max_items < 1) throw ConfigError("max_items must be >= 1");
}

RecommenderImpl::RecommenderImpl(VocabularyLayout layout, RecommenderConfig config)
    : layout_(layout), config_(config) {
  layout_.validate();
  config_.validate();

  embedding_ = register_module(
      "embedding", torch::nn::Embedding(layout_.size(), config_.model_dim));
  encoder_positions_ = register_module(
      "encoder_positions",
      torch::nn::Embedding(config_.max_items * layout_.tokens_per_item(),
                           config_.model_dim));
  decoder_positions_ = register_module(
      "decoder_positions",
      torch::nn::Embedding(layout_.levels + 1, config_.model_dim));

  auto enc_layer = torch::nn::TransformerEncoderLayer(
      torch::nn::TransformerEncoderLayerOptions(config_.model_dim, config_.heads)
          .dim_feedforward(config_.ffn_dim)
          .dropout(config_.dropout));
  encoder_ = register_module(
      "encoder", torch::nn::TransformerEncoder(enc_layer, config_.encoder_layers));
  auto dec_layer = torch::nn::TransformerDecoderLayer(
      torch::nn::TransformerDecoderLayerOptions(config_.model_dim, config_.heads)
          .dim_feedforward(config_.ffn_dim)
          .dropout(config_.dropout));
  decoder_ = register_module(
      "decoder", torch::nn::TransformerDecoder(dec_layer, config_.decoder_layers));
}

torch::Tensor RecommenderImpl::embed_tokens(const torch::Tensor& ids) {
  return embedding_->forward(ids);
}

torch::Tensor RecommenderImpl::scatter_embed(const torch::Tensor& probs,
                                             std::int64_t level) {
  if (probs.size(-1) != layout_.codewords) {
    throw ShapeError("scatter_embed: distribution width " +
                     std::to_string(probs.size(-1)) + " != codewords " +
                     std::to_string(layout_.codewords));
  }
  auto block = embedding_->weight.narrow(0, layout_.level_offset(level),
                                         layout_.codewords);
  return probs.matmul(block);
}

torch::Tensor RecommenderImpl::encode_history(const torch::Tensor& token_embeddings,
                                              const torch::Tensor& pad_mask) {
  const auto seq_len = token_embeddings.size(1);
  const auto max_len = config_.max_items * layout_.tokens_per_item();
  if (seq_len > max_len) {
    throw ShapeError("history of " + std::to_string(seq_len) +
                     " tokens exceeds maximum " + std::to_string(max_len));
  }
  auto positions = torch::arange(seq_len, torch::kLong);
  auto input = token_embeddings + encoder_positions_->forward(positions).unsqueeze(0);
  auto states = encoder_->forward(input.permute({1, 0, 2}), {}, pad_mask);
  return states.permute({1, 0, 2});
}

torch::Tensor RecommenderImpl::decode_teacher_forced(
    const torch::Tensor& memory, const torch::Tensor& memory_pad_mask,
    const torch::Tensor& target_embeddings) {
  const auto tgt_len = target_embeddings.size(1);
  if (tgt_len > layout_.levels + 1) {
    throw ShapeError("decoder input of " + std::to_string(tgt_len) +
                     " positions exceeds maximum " +
                     std::to_string(layout_.levels + 1));
  }
  auto positions = torch::arange(tgt_len, torch::kLong);
  auto input = target_embeddings + decoder_positions_->forward(positions).unsqueeze(0);
  auto causal = torch::triu(
      torch::full({tgt_len, tgt_len}, -std::numeric_limits<double>::infinity(),
                  target_embeddings.options()),
      1);
  auto hidden = decoder_->forward(input.permute({1, 0, 2}),
                                  memory.permute({1, 0, 2}), causal, {}, {},
                                  memory_pad_mask);
  return hidden.permute({1, 0, 2});
}

torch::Tensor RecommenderImpl::vocab_logits(const torch::Tensor& hidden) {
  return hidden.matmul(embedding_->weight.t());
}

std::pair<torch::Tensor, torch::Tensor> RecommenderImpl::history_embeddings_hard(
    const torch::Tensor& items, const torch::Tensor& ident_tokens) {
  const auto batch = items.size(0);
  const auto num_items = items.size(1);
  const auto per_item = layout_.tokens_per_item();
  auto item_pad = items < 0;
  auto safe = items.clamp_min(0).reshape({-1});
  auto tokens = ident_tokens.index_select(0, safe)
                    .reshape({batch, num_items * per_item});
  auto token_pad = item_pad.unsqueeze(-1)
                       .expand({batch, num_items, per_item})
                       .reshape({batch, num_items * per_item});
  tokens = torch::where(token_pad, torch::full_like(tokens, VocabularyLayout::kPad),
                        tokens);
  return {embed_tokens(tokens), token_pad};
}

std::pair<torch::Tensor, torch::Tensor> RecommenderImpl::history_embeddings_soft(
    const torch::Tensor& items, const torch::Tensor& dists,
    const torch::Tensor& dedup_tokens) {
  const auto batch = items.size(0);
  const auto num_items = items.size(1);
  const auto per_item = layout_.tokens_per_item();
  auto item_pad = items < 0;
  auto safe = items.clamp_min(0).reshape({-1});

  auto item_dists = dists.index_select(0, safe);  // [B*T, L, K]
  std::vector<torch::Tensor> level_embeds;
  level_embeds.reserve(layout_.levels);
  for (std::int64_t l = 0; l < layout_.levels; ++l) {
    level_embeds.push_back(scatter_embed(item_dists.select(1, l), l));
  }
  auto dedup_embed = embed_tokens(dedup_tokens.index_select(0, safe));
  level_embeds.push_back(dedup_embed);
  auto embeds = torch::stack(level_embeds, 1)  // [B*T, L+1, D]
                    .reshape({batch, num_items * per_item, config_.model_dim});

  auto token_pad = item_pad.unsqueeze(-1)
                       .expand({batch, num_items, per_item})
                       .reshape({batch, num_items * per_item});
  auto pad_row = embedding_->weight[VocabularyLayout::kPad];
  embeds = torch::where(token_pad.unsqueeze(-1), pad_row, embeds);
  return {embeds, token_pad};
}

torch::Tensor RecommenderImpl::bos_row() {
  return embedding_->weight[VocabularyLayout::kBos];
}

torch::Tensor RecommenderImpl::target_embeddings_hard(
    const torch::Tensor& target_tokens) {
  const auto batch = target_tokens.size(0);
  auto code_tokens = target_tokens.narrow(1, 0, layout_.levels);
  auto code_embeds = embed_tokens(code_tokens);
  auto bos = bos_row().unsqueeze(0).unsqueeze(0).expand({batch, 1, config_.model_dim});
  return torch::cat({bos, code_embeds}, 1);
}

torch::Tensor RecommenderImpl::target_embeddings_soft(
    const torch::Tensor& target_dists) {
  const auto batch = target_dists.size(0);
  std::vector<torch::Tensor> level_embeds;
  level_embeds.reserve(layout_.levels);
  for (std::int64_t l = 0; l < layout_.levels; ++l) {
    level_embeds.push_back(scatter_embed(target_dists.select(1, l), l));
  }
  auto codes = torch::stack(level_embeds, 1);  // [B, L, D]
  auto bos = bos_row().unsqueeze(0).unsqueeze(0).expand({batch, 1, config_.model_dim});
  return torch::cat({bos, codes}, 1);
}

torch::Tensor rec_loss(const torch::Tensor& logits, const torch::Tensor& targets) {
  auto log_probs = torch::log_softmax(logits, -1);
  auto picked = log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1);
  return (-picked.sum(-1)).mean();
}

std::vector<std::pair<std::vector<std::int64_t>, std::int64_t>>
PrefixTrie::enumerate() const {
  std::vector<std::pair<std::vector<std::int64_t>, std::int64_t>> paths;
  std::vector<std::int64_t> prefix;
  auto walk = [&](auto&& self, std::int32_t index) -> void {
    const Node& n = nodes_[index];
    if (n.item >= 0) paths.emplace_back(prefix, n.item);
    for (const auto& [token, child] : n.children) {
      prefix.push_back(token);
      self(self, child);
      prefix.pop_back();
    }
  };
  walk(walk, 0);
  return paths;
}

PrefixTrie build_prefix_trie(const std::vector<ItemIdentifier>& identifiers,
                             const VocabularyLayout& layout) {
  PrefixTrie trie;
  trie.depth_ = layout.tokens_per_item();
  for (std::size_t item = 0; item < identifiers.size(); ++item) {
    auto tokens = identifier_tokens({identifiers[item]}, layout);
    auto acc = tokens.accessor<std::int64_t, 2>();
    std::int32_t node = 0;
    for (std::int64_t pos = 0; pos < layout.tokens_per_item(); ++pos) {
      std::int64_t token = acc[0][pos];
      auto& children = trie.nodes_[node].children;
      auto it = std::lower_bound(
          children.begin(), children.end(), token,
          [](const auto& entry, std::int64_t t) { return entry.first < t; });
      if (it != children.end() && it->first == token) {
        node = it->second;
      } else {
        auto next = static_cast<std::int32_t>(trie.nodes_.size());
        trie.nodes_.emplace_back();
        trie.nodes_[node].children.insert(it, {token, next});
        node = next;
      }
    }
    if (trie.nodes_[node].item >= 0) {
      throw DataError("duplicate identifier for items " +
                      std::to_string(trie.nodes_[node].item) + " and " +
                      std::to_string(item));
    }
    trie.nodes_[node].item = static_cast<std::int64_t>(item);
  }
  return trie;
}

namespace {

struct Beam {
  std::int32_t node;
  double score;
  std::vector<std::int64_t> tokens;
};

}  // namespace

std::vector<std::vector<ScoredItem>> constrained_beam_search_batch(
    Recommender& recommender, const torch::Tensor& memory,
    const torch::Tensor& memory_pad_mask, const PrefixTrie& trie,
    std::int64_t beam_size, std::int64_t top_n) {
  if (trie.node_count() <= 1) throw DataError("beam search over an empty trie");
  if (beam_size < top_n) {
    throw ArgumentError("beam_size must be >= top_n");
  }
  torch::NoGradGuard no_grad;
  const bool was_training = recommender->is_training();
  recommender->eval();

  const auto users = memory.size(0);
  const auto depth = trie.depth();
  std::vector<std::vector<Beam>> beams(users);
  for (std::int64_t u = 0; u < users; ++u) {
    beams[u].push_back({trie.root(), 0.0, {}});
  }

  for (std::int64_t step = 0; step < depth; ++step) {
    std::int64_t rows = 0;
    for (const auto& b : beams) rows += static_cast<std::int64_t>(b.size());
    auto tokens = torch::empty({rows, step + 1}, torch::kLong);
    auto user_of_row = torch::empty({rows}, torch::kLong);
    {
      auto tok = tokens.accessor<std::int64_t, 2>();
      auto usr = user_of_row.accessor<std::int64_t, 1>();
      std::int64_t row = 0;
      for (std::int64_t u = 0; u < users; ++u) {
        for (const auto& b : beams[u]) {
          tok[row][0] = VocabularyLayout::kBos;
          for (std::int64_t t = 0; t < step; ++t) tok[row][t + 1] = b.tokens[t];
          usr[row] = u;
          ++row;
        }
      }
    }
    auto mem_rows = memory.index_select(0, user_of_row);
    auto pad_rows = memory_pad_mask.index_select(0, user_of_row);
    auto hidden = recommender->decode_teacher_forced(
        mem_rows, pad_rows, recommender->embed_tokens(tokens));
    auto log_probs =
        torch::log_softmax(
            recommender->vocab_logits(hidden.select(1, step)), -1)
            .to(torch::kDouble)
            .contiguous();
    auto lp = log_probs.accessor<double, 2>();

    std::int64_t row = 0;
    for (std::int64_t u = 0; u < users; ++u) {
      std::vector<Beam> candidates;
      for (const auto& b : beams[u]) {
        for (const auto& [token, child] : trie.node(b.node).children) {
          Beam cand{child, b.score + lp[row][token], b.tokens};
          cand.tokens.push_back(token);
          candidates.push_back(std::move(cand));
        }
        ++row;
      }
      std::stable_sort(candidates.begin(), candidates.end(),
                       [](const Beam& a, const Beam& b) { return a.score > b.score; });
      if (static_cast<std::int64_t>(candidates.size()) > beam_size) {
        candidates.resize(beam_size);
      }
      beams[u] = std::move(candidates);
    }
  }

  std::vector<std::vector<ScoredItem>> results(users);
  for (std::int64_t u = 0; u < users; ++u) {
    auto& ranked = results[u];
    for (const auto& b : beams[u]) {
      ranked.push_back({trie.node(b.node).item, b.score});
    }
    std::sort(ranked.begin(), ranked.end(), [](const ScoredItem& a, const ScoredItem& b) {
      if (a.score != b.score) return a.score > b.score;
      return a.item < b.item;
    });
    if (static_cast<std::int64_t>(ranked.size()) > top_n) ranked.resize(top_n);
  }
  if (was_training) recommender->train();
  return results;
}

std::vector<ScoredItem> constrained_beam_search(Recommender& recommender,
                                                const torch::Tensor& memory,
                                                const torch::Tensor& memory_pad_mask,
                                                const PrefixTrie& trie,
                                                std::int64_t beam_size,
                                                std::int64_t top_n) {
  auto mem = memory.dim() == 2 ? memory.unsqueeze(0) : memory;
  auto pad = memory_pad_mask.dim() == 1 ? memory_pad_mask.unsqueeze(0)
                                        : memory_pad_mask;
  return constrained_beam_search_batch(recommender, mem, pad, trie, beam_size,
                                       top_n)[0];
}

void save_recommender(Recommender& recommender, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const auto& layout = recommender->layout();
  const auto& cfg = recommender->config();
  json obj = {
      {"levels", layout.levels},
      {"codewords", layout.codewords},
      {"dedup_reserve", layout.dedup_reserve},
      {"model_dim", cfg.model_dim},
      {"encoder_layers", cfg.encoder_layers},
      {"decoder_layers", cfg.decoder_layers},
      {"heads", cfg.heads},
      {"ffn_dim", cfg.ffn_dim},
      {"dropout", cfg.dropout},
      {"max_items", cfg.max_items},
  };
  std::ofstream out(dir + "/recommender.json");
  if (!out) throw DataError("cannot write " + dir + "/recommender.json");
  out << obj.dump(2) << "\n";
  torch::save(recommender, dir + "/recommender.pt");
}

Recommender load_recommender(const std::string& dir) {
  std::ifstream in(dir + "/recommender.json");
  if (!in) throw DataError("cannot open " + dir + "/recommender.json");
  json obj;
  in >> obj;
  VocabularyLayout layout;
  layout.levels = obj.at("levels").get<std::int64_t>();
  layout.codewords = obj.at("codewords").get<std::int64_t>();
  layout.dedup_reserve = obj.at("dedup_reserve").get<std::int64_t>();
  RecommenderConfig cfg;
  cfg.model_dim = obj.at("model_dim").get<std::int64_t>();
  cfg.encoder_layers = obj.at("encoder_layers").get<std::int64_t>();
  cfg.decoder_layers = obj.at("decoder_layers").get<std::int64_t>();
  cfg.heads = obj.at("heads").get<std::int64_t>();
  cfg.ffn_dim = obj.at("ffn_dim").get<std::int64_t>();
  cfg.dropout = obj.at("dropout").get<double>();
  cfg.max_items = obj.at("max_items").get<std::int64_t>();
  Recommender recommender(layout, cfg);
  torch::load(recommender, dir + "/recommender.pt");
  return recommender;
}

}  // namespace unigrec
