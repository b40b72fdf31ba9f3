#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace unigrec {

enum class EntropyLogBase { Natural, Two };

struct TokenizerConfig {
  std::vector<std::int64_t> encoder_dims{512, 256, 128, 64};
  std::int64_t levels = 3;     // L
  std::int64_t codewords = 256;  // K per level
  std::int64_t code_dim = 32;  // d
  double beta = 0.25;          // commitment weight, hard-mode quantization loss
  double tau_max = 0.01;
  double tau_min = 0.001;
  EntropyLogBase entropy_log_base = EntropyLogBase::Natural;

  void validate() const;
};

enum class QuantizeMode { Soft, Hard };

struct QuantizeResult {
  QuantizeMode mode = QuantizeMode::Soft;
  torch::Tensor probs;       // [B, L, K], soft mode only
  torch::Tensor codes;       // [B, L] long, hard mode only
  torch::Tensor residuals;   // [B, L, d] residual entering each level
  torch::Tensor selected;    // [B, L, d], hard mode: chosen codeword rows
  torch::Tensor aggregated;  // [B, d]
};

// Residual-quantization tokenizer: MLP encoder, L codebooks of K codewords,
// MLP decoder. The soft path replaces argmin selection with a temperature
// softmax over negative squared distances and keeps the whole chain
// differentiable; the hard path reproduces plain residual quantization with a
// straight-through aggregated representation.
class TokenizerImpl : public torch::nn::Module {
 public:
  TokenizerImpl(std::int64_t input_dim, TokenizerConfig config);

  torch::Tensor encode(const torch::Tensor& z);
  torch::Tensor decode(const torch::Tensor& aggregated);

  // probs(k) proportional to exp(-|residual - e_k|^2 / tau)
  torch::Tensor soft_assign(const torch::Tensor& residual, std::int64_t level,
                            double tau) const;
  // argmin codeword index, exact ties broken toward the lowest index
  torch::Tensor hard_assign(const torch::Tensor& residual, std::int64_t level) const;

  QuantizeResult quantize(const torch::Tensor& z, double tau, QuantizeMode mode);

  torch::Tensor codebook(std::int64_t level) const;
  std::int64_t input_dim() const { return input_dim_; }
  const TokenizerConfig& config() const { return config_; }

  // Data-dependent initialization: rescales the encoder output layer so the
  // encoded batch has unit RMS row norm. The default layer init shrinks the
  // encoded scale far below the tau range, which saturates the assignment
  // softmax toward uniform and collapses the codebooks before training can
  // separate items.
  void calibrate_encoder_scale(const torch::Tensor& z_batch);

  // Seeds each level's codebook with k-means centers of the encoder outputs
  // (residuals for deeper levels). Falls back to normal(0, 1/sqrt(d)) when
  // the batch is smaller than K.
  void init_codebooks_kmeans(const torch::Tensor& z_batch, std::uint64_t seed,
                             int iterations = 10);

 private:
  torch::Tensor squared_distances(const torch::Tensor& residual,
                                  std::int64_t level) const;

  std::int64_t input_dim_;
  TokenizerConfig config_;
  torch::nn::Sequential encoder_{nullptr};
  torch::nn::Linear encoder_out_{nullptr};  // final encoder layer, rescaled at init
  torch::nn::Sequential decoder_{nullptr};
  std::vector<torch::Tensor> codebooks_;  // L parameters of shape [K, d]
};
TORCH_MODULE(Tokenizer);

// |recon - z|^2 per row, averaged over the batch (Recon term).
torch::Tensor recon_loss(const torch::Tensor& recon, const torch::Tensor& z);

// sum_l |sg(v_l) - e_l|^2 + beta |v_l - sg(e_l)|^2, averaged over the batch.
// Hard-mode results only; soft training does not use this loss.
torch::Tensor quant_loss(const QuantizeResult& result, double beta);

// sum_l sum_k pbar_l(k) log pbar_l(k) over batch-averaged assignment
// probabilities; bounded in [-L log K, 0].
torch::Tensor uniformity_loss(const torch::Tensor& probs, EntropyLogBase base);

// Linear temperature decay from tau_max (step 0) to tau_min (step total_step).
double anneal_temperature(std::int64_t step, std::int64_t total_step,
                          double tau_max, double tau_min);

struct ItemIdentifier {
  std::vector<std::int64_t> codes;  // L indices in [0, K)
  std::int64_t dedup = 0;

  bool operator==(const ItemIdentifier&) const = default;
};

// Hard codes for every item plus ordinal dedup tokens assigned in dense item
// index order; (codes, dedup) pairs are unique. dedup_capacity < 0 disables
// the capacity check.
std::vector<ItemIdentifier> assign_identifiers(Tokenizer& tokenizer,
                                               const torch::Tensor& all_z,
                                               std::int64_t dedup_capacity = -1);

// JSON-lines dump, one {"item", "codes", "dedup"} object per item.
void save_identifiers(const std::vector<ItemIdentifier>& identifiers,
                      const std::string& path);
std::vector<ItemIdentifier> load_identifiers(const std::string& path);

void save_tokenizer(Tokenizer& tokenizer, const std::string& dir);
Tokenizer load_tokenizer(const std::string& dir);

}  // namespace unigrec
