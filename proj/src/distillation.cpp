#include "unigrec/distillation.hpp"

#include <cmath>

#include "unigrec/errors.hpp"

namespace unigrec {

torch::Tensor pool_encoder(const torch::Tensor& states, const torch::Tensor& pad_mask) {
  if (states.dim() != 3 || pad_mask.dim() != 2)
    throw ShapeError("pool_encoder expects [batch, time, dim] states and a 2-D mask");
  if (states.size(0) != pad_mask.size(0) || states.size(1) != pad_mask.size(1))
    throw ShapeError("pool_encoder mask does not match states");
  auto real = pad_mask.logical_not().to(states.dtype());
  auto counts = real.sum(1);
  if (counts.min().item<double>() <= 0.0)
    throw ArgumentError("pool_encoder saw a fully padded row");
  return (states * real.unsqueeze(-1)).sum(1) / counts.unsqueeze(-1);
}

torch::Tensor pool_decoder(const torch::Tensor& states) {
  if (states.dim() != 3) throw ShapeError("pool_decoder expects [batch, time, dim]");
  return states.select(1, 0);
}

DistillationHeadsImpl::DistillationHeadsImpl(std::int64_t model_dim,
                                             std::int64_t teacher_dim,
                                             std::int64_t tokenizer_input_dim) {
  if (model_dim <= 0 || teacher_dim <= 0 || tokenizer_input_dim <= 0)
    throw ArgumentError("distillation head dimensions must be positive");
  encoder_to_tokenizer = register_module(
      "encoder_to_tokenizer", torch::nn::Linear(model_dim, tokenizer_input_dim));
  teacher_to_tokenizer = register_module(
      "teacher_to_tokenizer", torch::nn::Linear(teacher_dim, tokenizer_input_dim));
  decoder_to_teacher = register_module("decoder_to_teacher",
                                       torch::nn::Linear(model_dim, teacher_dim));
}

torch::Tensor symmetric_kl(const torch::Tensor& p, const torch::Tensor& q, double eps) {
  if (!p.sizes().equals(q.sizes()))
    throw ShapeError("symmetric_kl operands must have matching shapes");
  if (eps <= 0.0) throw ArgumentError("symmetric_kl eps must be positive");
  auto pc = p.clamp_min(eps);
  auto qc = q.clamp_min(eps);
  auto diff = pc.log() - qc.log();
  auto per_row = ((pc - qc) * diff).reshape({p.size(0), -1}).sum(1);
  return per_row.mean();
}

torch::Tensor tokenizer_distill_loss(Tokenizer& tokenizer, const torch::Tensor& enc_z,
                                     const torch::Tensor& tea_z, double tau) {
  if (enc_z.size(0) != tea_z.size(0))
    throw ShapeError("tokenizer_distill_loss batch sizes differ");
  auto p_enc = tokenizer->quantize(enc_z, tau, QuantizeMode::Soft).probs;
  auto p_tea = tokenizer->quantize(tea_z, tau, QuantizeMode::Soft).probs;
  return symmetric_kl(p_enc, p_tea);
}

torch::Tensor infonce(const torch::Tensor& queries, const torch::Tensor& keys,
                      double tau_prime) {
  if (queries.dim() != 2 || keys.dim() != 2)
    throw ShapeError("infonce expects 2-D query and key batches");
  if (queries.size(0) != keys.size(0) || queries.size(1) != keys.size(1))
    throw ShapeError("infonce queries and keys must align");
  if (queries.size(0) < 1) throw ArgumentError("infonce needs at least one pair");
  if (tau_prime <= 0.0) throw ArgumentError("infonce temperature must be positive");
  auto q = torch::nn::functional::normalize(
      queries, torch::nn::functional::NormalizeFuncOptions().dim(1));
  auto k = torch::nn::functional::normalize(
      keys, torch::nn::functional::NormalizeFuncOptions().dim(1));
  auto sim = q.matmul(k.t()) / tau_prime;
  auto target = torch::arange(queries.size(0), torch::kLong);
  return torch::nn::functional::cross_entropy(sim, target);
}

torch::Tensor recommender_distill_loss(const torch::Tensor& decoder_vecs,
                                       const torch::Tensor& teacher_vecs,
                                       double tau_prime) {
  auto teacher = teacher_vecs.detach();
  return infonce(decoder_vecs, teacher, tau_prime) +
         infonce(teacher, decoder_vecs, tau_prime);
}

}  // namespace unigrec
