#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "unigrec/tokenizer.hpp"

namespace unigrec {

// Token id space shared by history and target sequences: two specials, then
// one disjoint block of K ids per quantization level, then the dedup block.
struct VocabularyLayout {
  std::int64_t levels = 3;
  std::int64_t codewords = 256;
  std::int64_t dedup_reserve = 4;

  static constexpr std::int64_t kPad = 0;
  static constexpr std::int64_t kBos = 1;
  static constexpr std::int64_t kSpecials = 2;

  std::int64_t level_offset(std::int64_t level) const;
  std::int64_t dedup_offset() const { return kSpecials + levels * codewords; }
  std::int64_t size() const { return dedup_offset() + dedup_reserve; }
  std::int64_t code_token(std::int64_t level, std::int64_t k) const;
  std::int64_t dedup_token(std::int64_t dedup) const;
  std::int64_t tokens_per_item() const { return levels + 1; }

  void validate() const;
};

// Vocabulary token rows, one identifier per item: [n_items, levels + 1].
torch::Tensor identifier_tokens(const std::vector<ItemIdentifier>& identifiers,
                                const VocabularyLayout& layout);

struct RecommenderConfig {
  std::int64_t model_dim = 128;
  std::int64_t encoder_layers = 2;
  std::int64_t decoder_layers = 2;
  std::int64_t heads = 4;
  std::int64_t ffn_dim = 256;
  double dropout = 0.1;
  std::int64_t max_items = 20;  // history length in items

  void validate() const;
};

// Encoder-decoder transformer over identifier tokens with a shared embedding
// table used both for input lookups and for output logits (inner product).
// Soft identifier input replaces the lookup with a probability-weighted
// aggregation over a level's embedding block.
class RecommenderImpl : public torch::nn::Module {
 public:
  RecommenderImpl(VocabularyLayout layout, RecommenderConfig config);

  const VocabularyLayout& layout() const { return layout_; }
  const RecommenderConfig& config() const { return config_; }

  torch::Tensor token_table() { return embedding_->weight; }
  torch::Tensor embed_tokens(const torch::Tensor& ids);

  // probs [..., K] for one level -> [..., D]; reduces to a plain row lookup
  // for one-hot probs.
  torch::Tensor scatter_embed(const torch::Tensor& probs, std::int64_t level);

  // token_embeddings [B, S, D], pad_mask [B, S] (true = pad). Positions are
  // added inside; pad positions are excluded from attention.
  torch::Tensor encode_history(const torch::Tensor& token_embeddings,
                               const torch::Tensor& pad_mask);

  // target_embeddings [B, T, D] starting with the BOS embedding; causal mask
  // applied so position t sees only targets < t.
  torch::Tensor decode_teacher_forced(const torch::Tensor& memory,
                                      const torch::Tensor& memory_pad_mask,
                                      const torch::Tensor& target_embeddings);

  torch::Tensor vocab_logits(const torch::Tensor& hidden);

  // History assembly. items [B, T] dense item indices with -1 for pad.
  // Hard: ident_tokens [n_items, L+1]. Soft: dists [n_items, L, K] plus the
  // per-item dedup vocab ids [n_items] (dedup positions are always hard).
  // Both return token embeddings [B, T*(L+1), D] and a token pad mask.
  std::pair<torch::Tensor, torch::Tensor> history_embeddings_hard(
      const torch::Tensor& items, const torch::Tensor& ident_tokens);
  std::pair<torch::Tensor, torch::Tensor> history_embeddings_soft(
      const torch::Tensor& items, const torch::Tensor& dists,
      const torch::Tensor& dedup_tokens);

  // Teacher-forced decoder input [B, L+1, D]: BOS followed by the target
  // item's L level embeddings (the dedup token is a target only).
  torch::Tensor target_embeddings_hard(const torch::Tensor& target_tokens);
  torch::Tensor target_embeddings_soft(const torch::Tensor& target_dists);

 private:
  torch::Tensor bos_row();

  VocabularyLayout layout_;
  RecommenderConfig config_;
  torch::nn::Embedding embedding_{nullptr};
  torch::nn::Embedding encoder_positions_{nullptr};
  torch::nn::Embedding decoder_positions_{nullptr};
  torch::nn::TransformerEncoder encoder_{nullptr};
  torch::nn::TransformerDecoder decoder_{nullptr};
};
TORCH_MODULE(Recommender);

// Negative log-likelihood of the target tokens, summed over positions and
// averaged over the batch.
torch::Tensor rec_loss(const torch::Tensor& logits, const torch::Tensor& targets);

// Trie over identifier token sequences; every path has exactly L+1 tokens and
// each leaf maps to one item.
class PrefixTrie {
 public:
  struct Node {
    std::vector<std::pair<std::int64_t, std::int32_t>> children;  // token -> node, sorted
    std::int64_t item = -1;
  };

  const Node& node(std::int32_t index) const { return nodes_[index]; }
  std::int32_t root() const { return 0; }
  std::size_t node_count() const { return nodes_.size(); }
  std::int64_t depth() const { return depth_; }

  // All complete token paths with their leaf items, in trie order.
  std::vector<std::pair<std::vector<std::int64_t>, std::int64_t>> enumerate() const;

  friend PrefixTrie build_prefix_trie(const std::vector<ItemIdentifier>&,
                                      const VocabularyLayout&);

 private:
  std::vector<Node> nodes_{Node{}};
  std::int64_t depth_ = 0;
};

PrefixTrie build_prefix_trie(const std::vector<ItemIdentifier>& identifiers,
                             const VocabularyLayout& layout);

struct ScoredItem {
  std::int64_t item = -1;
  double score = 0.0;
};

// Beam decode over trie-valid continuations. Scores are sums of full-vocabulary
// log-softmax values, so with a large enough beam the ranking matches
// exhaustive scoring of every identifier. memory: [S, D] encoder states for
// one user (or [1, S, D]); ties resolved by item index.
std::vector<ScoredItem> constrained_beam_search(Recommender& recommender,
                                                const torch::Tensor& memory,
                                                const torch::Tensor& memory_pad_mask,
                                                const PrefixTrie& trie,
                                                std::int64_t beam_size,
                                                std::int64_t top_n);

// Batched variant used by evaluation: memory [U, S, D], one result per user.
std::vector<std::vector<ScoredItem>> constrained_beam_search_batch(
    Recommender& recommender, const torch::Tensor& memory,
    const torch::Tensor& memory_pad_mask, const PrefixTrie& trie,
    std::int64_t beam_size, std::int64_t top_n);

void save_recommender(Recommender& recommender, const std::string& dir);
Recommender load_recommender(const std::string& dir);

}  // namespace unigrec
