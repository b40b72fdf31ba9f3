#include "unigrec/tokenizer.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include <nlohmann/json.hpp>

#include "unigrec/errors.hpp"

namespace unigrec {

using json = nlohmann::json;

void TokenizerConfig::validate() const {
  if (encoder_dims.empty()) throw ConfigError("encoder_dims must be nonempty");
  for (auto d : encoder_dims)
    if (d < 1) throw ConfigError("encoder_dims entries must be >= 1");
  if (levels < 1) throw ConfigError("levels must be >= 1");
  if (codewords < 2) throw ConfigError("codewords must be >= 2");
  if (code_dim < 1) throw ConfigError("code_dim must be >= 1");
  if (beta < 0) throw ConfigError("beta must be >= 0");
  if (tau_min <= 0) throw ConfigError("tau_min must be > 0");
  if (tau_max < tau_min) throw ConfigError("tau_max must be >= tau_min");
}

TokenizerImpl::TokenizerImpl(std::int64_t input_dim, TokenizerConfig config)
    : input_dim_(input_dim), config_(std::move(config)) {
  if (input_dim < 1) throw ConfigError("tokenizer input_dim must be >= 1");
  config_.validate();

  encoder_ = torch::nn::Sequential();
  std::int64_t prev = input_dim_;
  for (auto width : config_.encoder_dims) {
    encoder_->push_back(torch::nn::Linear(prev, width));
    encoder_->push_back(torch::nn::ReLU());
    prev = width;
  }
  encoder_out_ = torch::nn::Linear(prev, config_.code_dim);
  encoder_->push_back(encoder_out_);
  register_module("encoder", encoder_);

  decoder_ = torch::nn::Sequential();
  prev = config_.code_dim;
  for (auto it = config_.encoder_dims.rbegin(); it != config_.encoder_dims.rend(); ++it) {
    decoder_->push_back(torch::nn::Linear(prev, *it));
    decoder_->push_back(torch::nn::ReLU());
    prev = *it;
  }
  decoder_->push_back(torch::nn::Linear(prev, input_dim_));
  register_module("decoder", decoder_);

  codebooks_.reserve(config_.levels);
  double scale = 1.0 / std::sqrt(static_cast<double>(config_.code_dim));
  for (std::int64_t l = 0; l < config_.levels; ++l) {
    auto book = torch::randn({config_.codewords, config_.code_dim}) * scale;
    codebooks_.push_back(
        register_parameter("codebook_" + std::to_string(l), book));
  }
}

torch::Tensor TokenizerImpl::encode(const torch::Tensor& z) {
  auto input = z.dim() == 1 ? z.unsqueeze(0) : z;
  if (input.size(-1) != input_dim_) {
    throw ShapeError("encode: input dim " + std::to_string(input.size(-1)) +
                     " does not match tokenizer input dim " +
                     std::to_string(input_dim_));
  }
  return encoder_->forward(input);
}

torch::Tensor TokenizerImpl::decode(const torch::Tensor& aggregated) {
  auto input = aggregated.dim() == 1 ? aggregated.unsqueeze(0) : aggregated;
  if (input.size(-1) != config_.code_dim) {
    throw ShapeError("decode: input dim " + std::to_string(input.size(-1)) +
                     " does not match code_dim " + std::to_string(config_.code_dim));
  }
  return decoder_->forward(input);
}

torch::Tensor TokenizerImpl::codebook(std::int64_t level) const {
  if (level < 0 || level >= config_.levels) {
    throw ShapeError("codebook level " + std::to_string(level) +
                     " out of range [0, " + std::to_string(config_.levels) + ")");
  }
  return codebooks_[level];
}

torch::Tensor TokenizerImpl::squared_distances(const torch::Tensor& residual,
                                               std::int64_t level) const {
  auto book = codebook(level);
  auto r2 = residual.pow(2).sum(-1, /*keepdim=*/true);     // [B, 1]
  auto e2 = book.pow(2).sum(-1).unsqueeze(0);              // [1, K]
  auto cross = residual.matmul(book.t());                  // [B, K]
  return (r2 + e2 - 2 * cross).clamp_min(0);
}

torch::Tensor TokenizerImpl::soft_assign(const torch::Tensor& residual,
                                         std::int64_t level, double tau) const {
  if (tau <= 0) throw ArgumentError("soft_assign: tau must be > 0");
  auto input = residual.dim() == 1 ? residual.unsqueeze(0) : residual;
  if (!torch::isfinite(input).all().item<bool>()) {
    throw NumericError("soft_assign: residual contains non-finite values");
  }
  auto logits = -squared_distances(input, level) / tau;
  return torch::softmax(logits, -1);  // max-subtracted internally
}

torch::Tensor TokenizerImpl::hard_assign(const torch::Tensor& residual,
                                         std::int64_t level) const {
  auto input = residual.dim() == 1 ? residual.unsqueeze(0) : residual;
  auto d2 = squared_distances(input, level);
  // argmin with an explicit lowest-index tie-break
  auto min_vals = std::get<0>(d2.min(-1, /*keepdim=*/true));
  auto index_or_k = torch::where(
      d2 == min_vals,
      torch::arange(config_.codewords, torch::kLong).unsqueeze(0).expand_as(d2),
      torch::full_like(d2, static_cast<double>(config_.codewords)).to(torch::kLong));
  return std::get<0>(index_or_k.min(-1));
}

QuantizeResult TokenizerImpl::quantize(const torch::Tensor& z, double tau,
                                       QuantizeMode mode) {
  auto r = encode(z);
  QuantizeResult result;
  result.mode = mode;
  auto residual = r;
  std::vector<torch::Tensor> residuals, probs, codes, selected;
  auto aggregated = torch::zeros_like(r);
  for (std::int64_t l = 0; l < config_.levels; ++l) {
    residuals.push_back(residual);
    if (mode == QuantizeMode::Soft) {
      auto p = soft_assign(residual, l, tau);         // [B, K]
      auto expected = p.matmul(codebook(l));          // [B, d]
      probs.push_back(p);
      aggregated = aggregated + expected;
      residual = residual - expected;
    } else {
      auto c = hard_assign(residual, l);              // [B]
      auto rows = codebook(l).index_select(0, c);     // [B, d]
      codes.push_back(c);
      selected.push_back(rows);
      aggregated = aggregated + rows.detach();
      residual = residual - rows.detach();
    }
  }
  result.residuals = torch::stack(residuals, 1);  // [B, L, d]
  if (mode == QuantizeMode::Soft) {
    result.probs = torch::stack(probs, 1);  // [B, L, K]
    result.aggregated = aggregated;
  } else {
    result.codes = torch::stack(codes, 1);        // [B, L]
    result.selected = torch::stack(selected, 1);  // [B, L, d]
    // straight-through: value of the codeword sum, gradient of the latent
    result.aggregated = r + (aggregated - r).detach();
  }
  return result;
}

void TokenizerImpl::calibrate_encoder_scale(const torch::Tensor& z_batch) {
  torch::NoGradGuard no_grad;
  auto rms = encode(z_batch).pow(2).sum(-1).mean().sqrt().item<double>();
  if (rms > 0) {
    encoder_out_->weight.mul_(1.0 / rms);
    encoder_out_->bias.mul_(1.0 / rms);
  }
}

void TokenizerImpl::init_codebooks_kmeans(const torch::Tensor& z_batch,
                                          std::uint64_t seed, int iterations) {
  torch::NoGradGuard no_grad;
  auto gen = at::detail::createCPUGenerator(seed);
  auto residual = encode(z_batch);
  const std::int64_t n = residual.size(0);
  const std::int64_t k = config_.codewords;
  double scale = 1.0 / std::sqrt(static_cast<double>(config_.code_dim));
  for (std::int64_t l = 0; l < config_.levels; ++l) {
    torch::Tensor centers;
    if (n >= k) {
      auto perm = torch::randperm(n, gen, torch::kLong);
      centers = residual.index_select(0, perm.slice(0, 0, k)).clone();
      for (int it = 0; it < iterations; ++it) {
        auto d2 = torch::cdist(residual, centers).pow(2);
        auto assign = std::get<1>(d2.min(-1));  // [n]
        auto sums = torch::zeros_like(centers);
        sums.index_add_(0, assign, residual);
        auto counts = torch::zeros({k}, residual.options());
        counts.index_add_(0, assign, torch::ones({n}, residual.options()));
        auto nonempty = counts > 0;
        auto updated = sums / counts.clamp_min(1).unsqueeze(1);
        centers = torch::where(nonempty.unsqueeze(1), updated, centers);
      }
    } else {
      centers = torch::randn({k, config_.code_dim}, gen, torch::kFloat32)
                    .to(residual.options()) * scale;
    }
    codebooks_[l].data().copy_(centers);
    auto c = hard_assign(residual, l);
    residual = residual - codebooks_[l].index_select(0, c);
  }
}

torch::Tensor recon_loss(const torch::Tensor& recon, const torch::Tensor& z) {
  auto a = recon.dim() == 1 ? recon.unsqueeze(0) : recon;
  auto b = z.dim() == 1 ? z.unsqueeze(0) : z;
  if (a.sizes() != b.sizes()) {
    throw ShapeError("recon_loss: shape mismatch");
  }
  return (a - b).pow(2).sum(-1).mean();
}

torch::Tensor quant_loss(const QuantizeResult& result, double beta) {
  if (result.mode != QuantizeMode::Hard) {
    throw ModeError("quant_loss requires a hard quantization result");
  }
  auto codebook_term = (result.residuals.detach() - result.selected).pow(2).sum(-1);
  auto commit_term = (result.residuals - result.selected.detach()).pow(2).sum(-1);
  return (codebook_term + beta * commit_term).sum(-1).mean();
}

torch::Tensor uniformity_loss(const torch::Tensor& probs, EntropyLogBase base) {
  if (probs.dim() != 3) {
    throw ShapeError("uniformity_loss expects [batch, levels, codewords]");
  }
  auto mean_probs = probs.mean(0);  // [L, K]
  // 0 log 0 = 0, with the log clamped so saturated assignments keep a finite
  // gradient instead of d/dx(x log x) -> -inf as x -> 0.
  auto terms = mean_probs * mean_probs.clamp_min(1e-12).log();
  auto loss = terms.sum();
  if (base == EntropyLogBase::Two) loss = loss / std::log(2.0);
  return loss;
}

double anneal_temperature(std::int64_t step, std::int64_t total_step,
                          double tau_max, double tau_min) {
  if (total_step < 1) throw ArgumentError("total_step must be >= 1");
  if (tau_min <= 0 || tau_max < tau_min) {
    throw ArgumentError("need tau_max >= tau_min > 0");
  }
  if (step < 0 || step > total_step) {
    std::cerr << "warning: anneal step " << step << " outside [0, " << total_step
              << "], clamping\n";
  }
  double frac = static_cast<double>(step) / static_cast<double>(total_step);
  double tau = tau_max - frac * (tau_max - tau_min);
  return std::clamp(tau, tau_min, tau_max);
}

std::vector<ItemIdentifier> assign_identifiers(Tokenizer& tokenizer,
                                               const torch::Tensor& all_z,
                                               std::int64_t dedup_capacity) {
  torch::NoGradGuard no_grad;
  auto result = tokenizer->quantize(all_z, tokenizer->config().tau_min,
                                    QuantizeMode::Hard);
  auto codes = result.codes.to(torch::kCPU).contiguous();
  const std::int64_t n = codes.size(0);
  const std::int64_t levels = codes.size(1);
  auto acc = codes.accessor<std::int64_t, 2>();
  std::vector<ItemIdentifier> identifiers(n);
  std::map<std::vector<std::int64_t>, std::int64_t> next_dedup;
  for (std::int64_t i = 0; i < n; ++i) {
    auto& ident = identifiers[i];
    ident.codes.resize(levels);
    for (std::int64_t l = 0; l < levels; ++l) ident.codes[l] = acc[i][l];
    ident.dedup = next_dedup[ident.codes]++;
    if (dedup_capacity >= 0 && ident.dedup >= dedup_capacity) {
      throw CapacityError("dedup token " + std::to_string(ident.dedup) +
                          " for item " + std::to_string(i) +
                          " exceeds reserve of " + std::to_string(dedup_capacity));
    }
  }
  return identifiers;
}

void save_identifiers(const std::vector<ItemIdentifier>& identifiers,
                      const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write identifier dump: " + path);
  for (std::size_t i = 0; i < identifiers.size(); ++i) {
    json obj = {{"item", i},
                {"codes", identifiers[i].codes},
                {"dedup", identifiers[i].dedup}};
    out << obj.dump() << "\n";
  }
}

std::vector<ItemIdentifier> load_identifiers(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open identifier dump: " + path);
  std::vector<std::pair<std::int64_t, ItemIdentifier>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json obj;
    try {
      obj = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("identifier dump line " + std::to_string(line_no) + ": " +
                       e.what());
    }
    ItemIdentifier ident;
    ident.codes = obj.at("codes").get<std::vector<std::int64_t>>();
    ident.dedup = obj.at("dedup").get<std::int64_t>();
    rows.emplace_back(obj.at("item").get<std::int64_t>(), std::move(ident));
  }
  std::vector<ItemIdentifier> identifiers(rows.size());
  std::vector<bool> seen(rows.size(), false);
  for (auto& [item, ident] : rows) {
    if (item < 0 || item >= static_cast<std::int64_t>(rows.size()) || seen[item]) {
      throw DataError("identifier dump has missing or duplicate item indices");
    }
    seen[item] = true;
    identifiers[item] = std::move(ident);
  }
  return identifiers;
}

void save_tokenizer(Tokenizer& tokenizer, const std::string& dir) {
  std::filesystem::create_directories(dir);
  const auto& cfg = tokenizer->config();
  json obj = {
      {"input_dim", tokenizer->input_dim()},
      {"encoder_dims", cfg.encoder_dims},
      {"levels", cfg.levels},
      {"codewords", cfg.codewords},
      {"code_dim", cfg.code_dim},
      {"beta", cfg.beta},
      {"tau_max", cfg.tau_max},
      {"tau_min", cfg.tau_min},
      {"entropy_log_base", cfg.entropy_log_base == EntropyLogBase::Two ? "two" : "natural"},
  };
  std::ofstream out(dir + "/tokenizer.json");
  if (!out) throw DataError("cannot write " + dir + "/tokenizer.json");
  out << obj.dump(2) << "\n";
  torch::save(tokenizer, dir + "/tokenizer.pt");
}

Tokenizer load_tokenizer(const std::string& dir) {
  std::ifstream in(dir + "/tokenizer.json");
  if (!in) throw DataError("cannot open " + dir + "/tokenizer.json");
  json obj;
  in >> obj;
  TokenizerConfig cfg;
  cfg.encoder_dims = obj.at("encoder_dims").get<std::vector<std::int64_t>>();
  cfg.levels = obj.at("levels").get<std::int64_t>();
  cfg.codewords = obj.at("codewords").get<std::int64_t>();
  cfg.code_dim = obj.at("code_dim").get<std::int64_t>();
  cfg.beta = obj.at("beta").get<double>();
  cfg.tau_max = obj.at("tau_max").get<double>();
  cfg.tau_min = obj.at("tau_min").get<double>();
  cfg.entropy_log_base = obj.at("entropy_log_base").get<std::string>() == "two"
                             ? EntropyLogBase::Two
                             : EntropyLogBase::Natural;
  Tokenizer tokenizer(obj.at("input_dim").get<std::int64_t>(), cfg);
  torch::load(tokenizer, dir + "/tokenizer.pt");
  return tokenizer;
}

}  // namespace unigrec
