#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include <doctest.h>

#include "unigrec/errors.hpp"
#include "unigrec/tokenizer.hpp"

using namespace unigrec;

namespace {

TokenizerConfig tiny_config(std::int64_t levels = 2, std::int64_t codewords = 4,
                            std::int64_t code_dim = 3) {
  TokenizerConfig config;
  config.encoder_dims = {8};
  config.levels = levels;
  config.codewords = codewords;
  config.code_dim = code_dim;
  config.tau_max = 1.0;
  config.tau_min = 0.01;
  return config;
}

// Highest-index encoder/decoder linear layer parameter, e.g. "encoder.2.weight".
torch::Tensor named_param(Tokenizer& tok, const std::string& name) {
  for (auto& p : tok->named_parameters())
    if (p.key() == name) return p.value();
  throw std::runtime_error("missing parameter " + name);
}

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-12});
}

}  // namespace

TEST_SUITE("tokenizer") {

TEST_CASE("config validation rejects degenerate shapes") {
  auto bad = tiny_config();
  bad.encoder_dims.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.codewords = 1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.tau_min = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.tau_max = bad.tau_min / 2;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("zero final encoder layer maps every input to the bias") {
  torch::manual_seed(0);
  Tokenizer tok(4, tiny_config());
  {
    torch::NoGradGuard guard;
    named_param(tok, "encoder.2.weight").zero_();
    named_param(tok, "encoder.2.bias").copy_(torch::tensor({0.5f, -1.0f, 2.0f}));
  }
  auto out = tok->encode(torch::randn({5, 4}));
  for (int i = 0; i < 5; ++i) {
    CHECK(out[i][0].item<float>() == doctest::Approx(0.5f));
    CHECK(out[i][1].item<float>() == doctest::Approx(-1.0f));
    CHECK(out[i][2].item<float>() == doctest::Approx(2.0f));
  }
}

TEST_CASE("encode preserves batch order and rejects wrong input width") {
  torch::manual_seed(1);
  Tokenizer tok(4, tiny_config());
  auto z = torch::randn({6, 4});
  auto batch = tok->encode(z);
  for (int i = 0; i < 6; ++i)
    CHECK(torch::allclose(batch[i], tok->encode(z[i]).squeeze(0), 1e-6, 1e-6));
  CHECK_THROWS_AS(tok->encode(torch::randn({2, 5})), ShapeError);
}

TEST_CASE("encoder jacobian matches central finite differences") {
  torch::manual_seed(3);
  Tokenizer tok(4, tiny_config());
  tok->to(torch::kDouble);
  auto z = torch::randn({4}, torch::kDouble) + 0.3;
  const double h = 1e-5;
  for (int j = 0; j < 3; ++j) {
    auto input = z.clone().requires_grad_(true);
    tok->encode(input)[0][j].backward();
    auto grad = input.grad();
    for (int i = 0; i < 4; ++i) {
      auto zp = z.clone(), zm = z.clone();
      zp[i] += h;
      zm[i] -= h;
      torch::NoGradGuard guard;
      double fd = (tok->encode(zp)[0][j].item<double>() -
                   tok->encode(zm)[0][j].item<double>()) /
                  (2 * h);
      double ad = grad[i].item<double>();
      if (std::abs(fd) > 1e-8 || std::abs(ad) > 1e-8)
        CHECK(rel_err(fd, ad) < 1e-4);
    }
  }
}

TEST_CASE("decoder jacobian matches central finite differences") {
  torch::manual_seed(4);
  Tokenizer tok(4, tiny_config());
  tok->to(torch::kDouble);
  auto r = torch::randn({3}, torch::kDouble) + 0.2;
  const double h = 1e-5;
  for (int j = 0; j < 4; ++j) {
    auto input = r.clone().requires_grad_(true);
    tok->decode(input)[0][j].backward();
    auto grad = input.grad();
    for (int i = 0; i < 3; ++i) {
      auto rp = r.clone(), rm = r.clone();
      rp[i] += h;
      rm[i] -= h;
      torch::NoGradGuard guard;
      double fd = (tok->decode(rp)[0][j].item<double>() -
                   tok->decode(rm)[0][j].item<double>()) /
                  (2 * h);
      double ad = grad[i].item<double>();
      if (std::abs(fd) > 1e-8 || std::abs(ad) > 1e-8)
        CHECK(rel_err(fd, ad) < 1e-4);
    }
  }
}

TEST_CASE("identity-wired decoder zero-pads the aggregated code") {
  torch::manual_seed(5);
  Tokenizer tok(4, tiny_config());
  {
    torch::NoGradGuard guard;
    auto w1 = named_param(tok, "decoder.0.weight");  // [8, 3]
    auto b1 = named_param(tok, "decoder.0.bias");
    auto w2 = named_param(tok, "decoder.2.weight");  // [4, 8]
    auto b2 = named_param(tok, "decoder.2.bias");
    w1.zero_();
    b1.zero_();
    w2.zero_();
    b2.zero_();
    for (int i = 0; i < 3; ++i) {
      w1[i][i] = 1.0;
      w2[i][i] = 1.0;
    }
  }
  auto aggregated = torch::tensor({0.7f, 0.0f, 1.3f});  // nonnegative: ReLU passes
  auto out = tok->decode(aggregated);
  CHECK(out[0][0].item<float>() == doctest::Approx(0.7f));
  CHECK(out[0][1].item<float>() == doctest::Approx(0.0f));
  CHECK(out[0][2].item<float>() == doctest::Approx(1.3f));
  CHECK(out[0][3].item<float>() == doctest::Approx(0.0f));
}

TEST_CASE("equidistant codewords split probability evenly at any temperature") {
  Tokenizer tok(4, tiny_config(1, 2, 3));
  {
    torch::NoGradGuard guard;
    tok->codebook(0).copy_(
        torch::tensor({{1.0f, 0.0f, 0.0f}, {-1.0f, 0.0f, 0.0f}}));
  }
  auto residual = torch::zeros({3});
  for (double tau : {0.05, 0.5, 5.0}) {
    auto p = tok->soft_assign(residual, 0, tau);
    CHECK(p[0][0].item<float>() == doctest::Approx(0.5f).epsilon(1e-6));
    CHECK(p[0][1].item<float>() == doctest::Approx(0.5f).epsilon(1e-6));
  }
}

TEST_CASE("squared distances zero and one at unit temperature give the "
          "logistic split") {
  Tokenizer tok(4, tiny_config(1, 2, 3));
  tok->to(torch::kDouble);
  {
    torch::NoGradGuard guard;
    tok->codebook(0).copy_(
        torch::tensor({{0.0, 0.0, 0.0}, {1.0, 0.0, 0.0}}, torch::kDouble));
  }
  auto p = tok->soft_assign(torch::zeros({3}, torch::kDouble), 0, 1.0);
  const double p0 = 1.0 / (1.0 + std::exp(-1.0));  // 0.7311
  CHECK(p[0][0].item<double>() == doctest::Approx(p0).epsilon(1e-9));
  CHECK(p[0][1].item<double>() == doctest::Approx(1.0 - p0).epsilon(1e-9));
}

TEST_CASE("probability mass concentrates on the nearest codeword as tau "
          "approaches zero") {
  torch::manual_seed(6);
  Tokenizer tok(4, tiny_config(1, 8, 3));
  auto residual = torch::randn({3});
  double last_max = 0.0;
  for (double tau : {1.0, 0.1, 0.01, 1e-4}) {
    auto p = tok->soft_assign(residual, 0, tau);
    double max_p = p.max().item<float>();
    CHECK(max_p >= last_max - 1e-6);
    last_max = max_p;
  }
  CHECK(last_max > 0.999);
}

TEST_CASE("assignment distributions always sum to one") {
  torch::manual_seed(7);
  Tokenizer tok(4, tiny_config(3, 16, 5));
  auto residual = torch::randn({32, 5}) * 3;
  for (double tau : {0.001, 0.01, 0.1, 1.0, 10.0}) {
    auto p = tok->soft_assign(residual, 0, tau);
    auto sums = p.sum(-1);
    CHECK(torch::allclose(sums, torch::ones_like(sums), 0, 1e-6));
    CHECK(p.min().item<float>() >= 0.0f);
  }
}

TEST_CASE("soft assignment is monotone in distance") {
  torch::manual_seed(8);
  Tokenizer tok(4, tiny_config(1, 12, 4));
  auto residual = torch::randn({4});
  auto p = tok->soft_assign(residual, 0, 0.7)[0];
  auto d2 = (tok->codebook(0) - residual.unsqueeze(0)).pow(2).sum(-1);
  for (int a = 0; a < 12; ++a)
    for (int b = 0; b < 12; ++b)
      if (d2[a].item<float>() < d2[b].item<float>() - 1e-6)
        CHECK(p[a].item<float>() > p[b].item<float>());
}

TEST_CASE("soft assignment rejects non-finite residuals and bad tau") {
  Tokenizer tok(4, tiny_config());
  auto nan_residual = torch::full({3}, std::numeric_limits<float>::quiet_NaN());
  CHECK_THROWS_AS(tok->soft_assign(nan_residual, 0, 0.5), NumericError);
  CHECK_THROWS_AS(tok->soft_assign(torch::zeros({3}), 0, 0.0), ArgumentError);
}

TEST_CASE("hard assignment returns the exact codeword index at zero distance") {
  torch::manual_seed(9);
  Tokenizer tok(4, tiny_config(1, 10, 3));
  auto residual = tok->codebook(0)[7].clone();
  CHECK(tok->hard_assign(residual, 0)[0].item<std::int64_t>() == 7);
}

TEST_CASE("exact distance ties break toward the lowest index") {
  Tokenizer tok(4, tiny_config(1, 6, 3));
  {
    torch::NoGradGuard guard;
    auto book = tok->codebook(0);
    book.copy_(torch::randn({6, 3}));
    book[5] = book[2];  // duplicate rows at 2 and 5
  }
  auto residual = tok->codebook(0)[2] + 0.01;
  CHECK(tok->hard_assign(residual, 0)[0].item<std::int64_t>() == 2);
}

TEST_CASE("hard assignment matches an exhaustive distance scan at K=256") {
  torch::manual_seed(10);
  TokenizerConfig config = tiny_config(1, 256, 8);
  Tokenizer tok(8, config);
  auto residuals = torch::randn({100, 8});
  auto got = tok->hard_assign(residuals, 0);
  auto d2 = torch::cdist(residuals, tok->codebook(0)).pow(2);
  auto expect = std::get<1>(d2.min(-1));
  CHECK(torch::equal(got, expect));
}

TEST_CASE("argmax of the soft assignment equals the hard assignment") {
  torch::manual_seed(11);
  Tokenizer tok(4, tiny_config(2, 32, 6));
  auto residuals = torch::randn({200, 6}) * 2;
  for (std::int64_t level = 0; level < 2; ++level) {
    auto hard = tok->hard_assign(residuals, level);
    auto soft = std::get<1>(tok->soft_assign(residuals, level, 0.3).max(-1));
    CHECK(torch::equal(hard, soft));
  }
}

TEST_CASE("soft aggregation converges to the hard aggregation as tau "
          "vanishes") {
  torch::manual_seed(12);
  Tokenizer tok(4, tiny_config(3, 8, 4));
  auto z = torch::randn({16, 4});
  auto hard = tok->quantize(z, /*tau=*/1e-6, QuantizeMode::Hard);
  auto soft = tok->quantize(z, /*tau=*/1e-6, QuantizeMode::Soft);
  CHECK(torch::allclose(soft.aggregated, hard.aggregated, 0, 1e-6));
}

TEST_CASE("single-level uniform assignment aggregates to the codebook mean") {
  Tokenizer tok(4, tiny_config(1, 4, 3));
  {
    torch::NoGradGuard guard;
    // Unit-norm rows, zero encoder output: all distances equal.
    auto book = torch::eye(4, 3);
    book[3][0] = -1.0;
    tok->codebook(0).copy_(book.narrow(1, 0, 3));
    named_param(tok, "encoder.2.weight").zero_();
    named_param(tok, "encoder.2.bias").zero_();
  }
  auto q = tok->quantize(torch::randn({2, 4}), 2.0, QuantizeMode::Soft);
  auto mean = tok->codebook(0).mean(0);
  CHECK(torch::allclose(q.aggregated[0], mean, 0, 1e-6));
  CHECK(torch::allclose(q.probs[0][0], torch::full({4}, 0.25f), 0, 1e-6));
}

TEST_CASE("hard aggregation is the sum of the selected codewords") {
  torch::manual_seed(13);
  Tokenizer tok(4, tiny_config(3, 8, 4));
  auto z = torch::randn({10, 4});
  auto q = tok->quantize(z, 0.01, QuantizeMode::Hard);
  auto manual = torch::zeros({10, 4});
  for (std::int64_t l = 0; l < 3; ++l)
    manual += tok->codebook(l).index_select(0, q.codes.select(1, l));
  CHECK(torch::allclose(q.aggregated, manual, 1e-5, 1e-5));
}

TEST_CASE("codeword gradient through the soft path matches finite "
          "differences") {
  torch::manual_seed(14);
  Tokenizer tok(4, tiny_config(2, 4, 3));
  tok->to(torch::kDouble);
  auto z = torch::randn({6, 4}, torch::kDouble);
  const double tau = 0.5, h = 1e-6;
  auto objective = [&]() {
    return tok->quantize(z, tau, QuantizeMode::Soft).aggregated.pow(2).sum();
  };
  tok->zero_grad();
  objective().backward();
  for (auto [level, row, col] : {std::tuple{0, 1, 2}, {1, 3, 0}}) {
    auto book = tok->codebook(level);
    double ad = book.grad()[row][col].item<double>();
    double fd;
    {
      torch::NoGradGuard guard;
      book[row][col] += h;
      double up = objective().item<double>();
      book[row][col] -= 2 * h;
      double down = objective().item<double>();
      book[row][col] += h;
      fd = (up - down) / (2 * h);
    }
    CHECK(rel_err(fd, ad) < 1e-3);
    CHECK(std::abs(ad) > 1e-8);
  }
}

TEST_CASE("encoder parameters receive gradient through the soft path") {
  torch::manual_seed(15);
  Tokenizer tok(4, tiny_config(2, 4, 3));
  tok->to(torch::kDouble);
  auto z = torch::randn({6, 4}, torch::kDouble);
  tok->zero_grad();
  tok->quantize(z, 0.5, QuantizeMode::Soft).aggregated.pow(2).sum().backward();
  auto weight = named_param(tok, "encoder.0.weight");
  REQUIRE(weight.grad().defined());
  CHECK(weight.grad().abs().max().item<double>() > 1e-8);
}

TEST_CASE("reconstruction loss closed forms and brute-force oracle") {
  auto z = torch::randn({7, 5}, torch::kDouble);
  CHECK(recon_loss(z, z).item<double>() == doctest::Approx(0.0));
  auto unit = torch::zeros({1, 5}, torch::kDouble);
  unit[0][3] = 1.0;
  CHECK(recon_loss(unit, torch::zeros({1, 5}, torch::kDouble)).item<double>() ==
        doctest::Approx(1.0).epsilon(1e-12));
  auto recon = torch::randn({7, 5}, torch::kDouble);
  double manual = 0.0;
  for (int i = 0; i < 7; ++i)
    for (int j = 0; j < 5; ++j)
      manual += std::pow(recon[i][j].item<double>() - z[i][j].item<double>(), 2);
  manual /= 7.0;
  CHECK(recon_loss(recon, z).item<double>() == doctest::Approx(manual).epsilon(1e-10));
}

TEST_CASE("quantization loss is zero when residuals equal their codewords") {
  torch::manual_seed(16);
  Tokenizer tok(4, tiny_config(1, 4, 3));
  {
    torch::NoGradGuard guard;
    named_param(tok, "encoder.2.weight").zero_();
    named_param(tok, "encoder.2.bias").copy_(tok->codebook(0)[1]);
  }
  auto q = tok->quantize(torch::randn({3, 4}), 0.01, QuantizeMode::Hard);
  CHECK(quant_loss(q, 0.25).item<float>() == doctest::Approx(0.0f).epsilon(1e-10));
}

TEST_CASE("quantization loss arithmetic: distance four at beta a quarter "
          "gives five") {
  QuantizeResult fake;
  fake.mode = QuantizeMode::Hard;
  auto v = torch::zeros({1, 1, 3});
  auto e = torch::zeros({1, 1, 3});
  v[0][0][0] = 2.0;  // |v - e|^2 = 4
  fake.residuals = v;
  fake.selected = e;
  CHECK(quant_loss(fake, 0.25).item<float>() == doctest::Approx(5.0f));
}

TEST_CASE("quantization loss rejects soft results") {
  torch::manual_seed(17);
  Tokenizer tok(4, tiny_config());
  auto q = tok->quantize(torch::randn({2, 4}), 0.5, QuantizeMode::Soft);
  CHECK_THROWS_AS(quant_loss(q, 0.25), ModeError);
}

TEST_CASE("stop-gradients route codebook and encoder branches separately") {
  torch::manual_seed(18);
  Tokenizer tok(4, tiny_config(1, 4, 3));
  tok->to(torch::kDouble);
  auto z = torch::randn({5, 4}, torch::kDouble);
  const double beta = 0.25;

  tok->zero_grad();
  auto q = tok->quantize(z, 0.01, QuantizeMode::Hard);
  quant_loss(q, beta).backward();
  auto book_grad = tok->codebook(0).grad().clone();
  auto enc_grad = named_param(tok, "encoder.0.weight").grad().clone();

  auto absent_or_zero = [](const torch::Tensor& grad) {
    return !grad.defined() || grad.abs().max().item<double>() == 0.0;
  };

  // Codebook reference: only |sg(v) - e|^2 contributes.
  tok->zero_grad();
  auto q2 = tok->quantize(z, 0.01, QuantizeMode::Hard);
  (q2.selected - q2.residuals.detach()).pow(2).sum(-1).sum(-1).mean().backward();
  CHECK(torch::allclose(book_grad, tok->codebook(0).grad(), 1e-9, 1e-9));
  CHECK(absent_or_zero(named_param(tok, "encoder.0.weight").grad()));

  // Encoder reference: only beta |v - sg(e)|^2 contributes.
  tok->zero_grad();
  auto q3 = tok->quantize(z, 0.01, QuantizeMode::Hard);
  (beta * (q3.residuals - q3.selected.detach()).pow(2).sum(-1).sum(-1))
      .mean()
      .backward();
  CHECK(torch::allclose(enc_grad, named_param(tok, "encoder.0.weight").grad(),
                        1e-9, 1e-9));
  CHECK(absent_or_zero(tok->codebook(0).grad()));
}

TEST_CASE("uniform assignment probabilities reach the entropy bound") {
  const std::int64_t L = 3, K = 256;
  auto probs = torch::full({4, L, K}, 1.0 / static_cast<double>(K), torch::kDouble);
  auto loss = uniformity_loss(probs, EntropyLogBase::Natural).item<double>();
  CHECK(loss == doctest::Approx(-L * std::log(static_cast<double>(K))).epsilon(1e-12));
  CHECK(loss == doctest::Approx(-16.63553233343869).epsilon(1e-10));
}

TEST_CASE("all mass on one codeword maximizes the uniformity loss at zero") {
  auto probs = torch::zeros({5, 2, 8}, torch::kDouble);
  probs.index_put_({torch::indexing::Slice(), torch::indexing::Slice(), 3}, 1.0);
  CHECK(uniformity_loss(probs, EntropyLogBase::Natural).item<double>() ==
        doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("uniformity loss matches the brute-force double loop") {
  torch::manual_seed(19);
  auto raw = torch::rand({6, 3, 5}, torch::kDouble);
  auto probs = raw / raw.sum(-1, true);
  double manual = 0.0;
  auto mean = probs.mean(0);
  for (int l = 0; l < 3; ++l)
    for (int k = 0; k < 5; ++k) {
      double p = mean[l][k].item<double>();
      if (p > 0) manual += p * std::log(p);
    }
  CHECK(uniformity_loss(probs, EntropyLogBase::Natural).item<double>() ==
        doctest::Approx(manual).epsilon(1e-10));
  // Base-2 variant scales by 1/ln 2.
  CHECK(uniformity_loss(probs, EntropyLogBase::Two).item<double>() ==
        doctest::Approx(manual / std::log(2.0)).epsilon(1e-10));
}

TEST_CASE("uniformity loss stays within its analytic bounds") {
  torch::manual_seed(20);
  for (int trial = 0; trial < 10; ++trial) {
    auto raw = torch::rand({4, 3, 7}, torch::kDouble);
    auto probs = raw / raw.sum(-1, true);
    double loss = uniformity_loss(probs, EntropyLogBase::Natural).item<double>();
    CHECK(loss <= 1e-12);
    CHECK(loss >= -3 * std::log(7.0) - 1e-12);
  }
}

TEST_CASE("temperature anneals linearly between its endpoints") {
  CHECK(anneal_temperature(0, 100, 0.01, 0.001) == doctest::Approx(0.01));
  CHECK(anneal_temperature(100, 100, 0.01, 0.001) == doctest::Approx(0.001));
  CHECK(anneal_temperature(50, 100, 0.01, 0.001) ==
        doctest::Approx(0.0055).epsilon(1e-12));
  double last = 1e9;
  for (int step = 0; step <= 20; ++step) {
    double tau = anneal_temperature(step, 20, 0.05, 0.001);
    CHECK(tau <= last + 1e-15);
    last = tau;
  }
}

TEST_CASE("out-of-range annealing steps clamp to the endpoints") {
  CHECK(anneal_temperature(-5, 100, 0.01, 0.001) == doctest::Approx(0.01));
  CHECK(anneal_temperature(150, 100, 0.01, 0.001) == doctest::Approx(0.001));
  CHECK_THROWS_AS(anneal_temperature(0, 0, 0.01, 0.001), ArgumentError);
}

TEST_CASE("identifiers for distinct code tuples carry dedup zero") {
  torch::manual_seed(21);
  Tokenizer tok(4, tiny_config(2, 16, 6));
  auto z = torch::randn({12, 4}) * 3;
  auto identifiers = assign_identifiers(tok, z);
  REQUIRE(identifiers.size() == 12);
  std::set<std::pair<std::vector<std::int64_t>, std::int64_t>> seen;
  for (const auto& ident : identifiers) {
    CHECK(ident.codes.size() == 2);
    for (auto c : ident.codes) {
      CHECK(c >= 0);
      CHECK(c < 16);
    }
    CHECK(seen.insert({ident.codes, ident.dedup}).second);
  }
}

TEST_CASE("identical items receive ordinal dedup tokens in item order") {
  torch::manual_seed(22);
  Tokenizer tok(4, tiny_config(2, 8, 3));
  auto z = torch::randn({1, 4}).repeat({5, 1});
  auto identifiers = assign_identifiers(tok, z);
  for (int i = 0; i < 5; ++i) {
    CHECK(identifiers[i].codes == identifiers[0].codes);
    CHECK(identifiers[i].dedup == i);
  }
}

TEST_CASE("dedup overflow beyond the configured capacity is an error") {
  torch::manual_seed(23);
  Tokenizer tok(4, tiny_config(2, 8, 3));
  auto z = torch::randn({1, 4}).repeat({5, 1});
  CHECK_THROWS_AS(assign_identifiers(tok, z, /*dedup_capacity=*/4), CapacityError);
  CHECK_NOTHROW(assign_identifiers(tok, z, /*dedup_capacity=*/5));
}

TEST_CASE("identifier dumps round-trip through the json-lines format") {
  torch::manual_seed(24);
  Tokenizer tok(4, tiny_config(3, 8, 3));
  auto identifiers = assign_identifiers(tok, torch::randn({20, 4}));
  auto path =
      (std::filesystem::temp_directory_path() / "tok_idents.jsonl").string();
  save_identifiers(identifiers, path);
  CHECK((load_identifiers(path) == identifiers));
  std::remove(path.c_str());
}

TEST_CASE("tokenizer checkpoints restore a bitwise-identical forward pass") {
  torch::manual_seed(25);
  Tokenizer tok(4, tiny_config(2, 8, 3));
  auto z = torch::randn({6, 4});
  auto before = tok->quantize(z, 0.3, QuantizeMode::Soft);
  auto dir = (std::filesystem::temp_directory_path() / "tok_ckpt").string();
  save_tokenizer(tok, dir);
  auto restored = load_tokenizer(dir);
  auto after = restored->quantize(z, 0.3, QuantizeMode::Soft);
  CHECK(torch::equal(before.aggregated, after.aggregated));
  CHECK(torch::equal(before.probs, after.probs));
  CHECK(restored->config().codewords == 8);
  std::filesystem::remove_all(dir);
}

TEST_CASE("encoder calibration leaves the encoded batch at unit rms norm") {
  torch::manual_seed(26);
  Tokenizer tok(4, tiny_config());
  auto z = torch::randn({50, 4}) * 7;
  tok->calibrate_encoder_scale(z);
  auto rms = tok->encode(z).pow(2).sum(-1).mean().sqrt().item<double>();
  CHECK(rms == doctest::Approx(1.0).epsilon(1e-4));
}

}  // TEST_SUITE
