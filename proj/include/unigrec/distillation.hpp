#pragma once

#include <torch/torch.h>

#include "unigrec/tokenizer.hpp"

namespace unigrec {

// Masked mean over real (non-padded) history positions. states [B, S, D],
// pad_mask [B, S] true where padded; every row must contain a real position.
torch::Tensor pool_encoder(const torch::Tensor& states, const torch::Tensor& pad_mask);

// First-position decoder state, the slot that predicts the leading code.
torch::Tensor pool_decoder(const torch::Tensor& states);

// The three affine projectors used by the two distillation sites: recommender
// encoder pooling and teacher embedding into the tokenizer input space, and
// decoder pooling into the teacher space.
class DistillationHeadsImpl : public torch::nn::Module {
 public:
  DistillationHeadsImpl(std::int64_t model_dim, std::int64_t teacher_dim,
                        std::int64_t tokenizer_input_dim);

  torch::nn::Linear encoder_to_tokenizer{nullptr};
  torch::nn::Linear teacher_to_tokenizer{nullptr};
  torch::nn::Linear decoder_to_teacher{nullptr};
};
TORCH_MODULE(DistillationHeads);

// Mean over batch of sum_{level,codeword} of KL(p||q) + KL(q||p), with both
// distributions clamped below at eps before the logs.
torch::Tensor symmetric_kl(const torch::Tensor& p, const torch::Tensor& q,
                           double eps = 1e-10);

// Symmetric KL between the tokenizer's soft assignments of two projected
// vectors. Callers detach the teacher embedding before projecting; the
// projectors, the tokenizer encoder, and the codebooks all receive gradient.
torch::Tensor tokenizer_distill_loss(Tokenizer& tokenizer, const torch::Tensor& enc_z,
                                     const torch::Tensor& tea_z, double tau);

// In-batch InfoNCE over cosine similarities at temperature tau_prime; row i's
// positive is key i, the remaining rows are negatives.
torch::Tensor infonce(const torch::Tensor& queries, const torch::Tensor& keys,
                      double tau_prime);

// Bidirectional InfoNCE between projected decoder states and teacher
// embeddings; the teacher side is detached in both directions.
torch::Tensor recommender_distill_loss(const torch::Tensor& decoder_vecs,
                                       const torch::Tensor& teacher_vecs,
                                       double tau_prime);

}  // namespace unigrec
