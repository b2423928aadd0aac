#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "doctest.h"
#include "test_util.hpp"
#include "unlearn/losses.hpp"

using namespace unlearn;
using corpus::Encoded;
using diff::Tensor;
using model::ModelState;

namespace {

model::ModelConfig tiny_config() {
  model::ModelConfig cfg;
  cfg.vocab_size = 11;
  cfg.model_dim = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.context_len = 32;
  cfg.lora_rank = 3;
  cfg.lora_alpha = 3.0;
  return cfg;
}

Encoded make_encoded(std::vector<int> tokens, int sep_pos) {
  Encoded e;
  e.tokens = std::move(tokens);
  e.sep_pos = sep_pos;
  const size_t t = e.tokens.size() - 1;
  e.targets.resize(t);
  e.mask.resize(t);
  for (size_t i = 0; i < t; ++i) {
    e.targets[i] = e.tokens[i + 1];
    e.mask[i] = static_cast<int>(i) >= sep_pos ? 1 : 0;
  }
  return e;
}

std::vector<Encoded> synthetic_batch(int n, int len, int vocab, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Encoded> out;
  for (int i = 0; i < n; ++i) {
    std::vector<int> tokens(static_cast<size_t>(len));
    for (int& t : tokens) t = static_cast<int>(rng() % static_cast<uint64_t>(vocab));
    out.push_back(make_encoded(std::move(tokens), len / 2));
  }
  return out;
}

void perturb_lora_b(ModelState& state, double magnitude, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, magnitude);
  for (model::NamedParam& p : model::trainable_parameters(state)) {
    if (p.name.ends_with(".b")) {
      for (double& v : p.tensor->data) v += dist(rng);
    }
  }
}

// uniform next-token distribution regardless of context
ModelState uniform_model(const model::ModelConfig& cfg, uint64_t seed) {
  ModelState s = model::init_model(cfg, seed);
  for (double& v : s.w_out.data) v = 0.0;
  for (double& v : s.b_out.data) v = 0.0;
  return s;
}

double rel_gap(const std::vector<losses::GradVec>& a, const std::vector<losses::GradVec>& b) {
  REQUIRE(a.size() == b.size());
  double diff = 0.0, base = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].name == b[i].name);
    REQUIRE(a[i].values.size() == b[i].values.size());
    for (size_t j = 0; j < a[i].values.size(); ++j) {
      const double d = a[i].values[j] - b[i].values[j];
      diff += d * d;
      base += b[i].values[j] * b[i].values[j];
    }
  }
  return std::sqrt(diff) / std::sqrt(base);
}

double worst_elementwise_rel(const std::vector<losses::GradVec>& a, const std::vector<losses::GradVec>& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    for (size_t j = 0; j < a[i].values.size(); ++j) {
      const double x = a[i].values[j], y = b[i].values[j];
      worst = std::max(worst, std::abs(x - y) / std::max({std::abs(x), std::abs(y), 1e-30}));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("fresh-model NPO equals (2/beta) ln 2") {
  const ModelState s = model::init_model(tiny_config(), 1);
  const std::vector<Encoded> batch = synthetic_batch(3, 12, 11, 2);
  for (double beta : {0.1, 0.5, 2.0}) {
    const double loss = losses::npo_loss(s, batch, beta);
    CHECK(std::abs(loss - (2.0 / beta) * std::log(2.0)) <= 1e-12);
  }
  CHECK(std::abs(losses::npo_loss(s, batch, 0.5) - 2.772588722239781) <= 1e-12);
}

TEST_CASE("NPO term formula at a fixed log-ratio") {
  // beta = 0.5, log-ratio = +2 per completion token
  diff::Graph g;
  const auto term = g.scaled_log1p_exp(g.input(Tensor({1}, {2.0})), 0.5);
  CHECK(g.value(term).data[0] == doctest::Approx(4.0 * std::log1p(std::exp(1.0))).epsilon(1e-12));
  // fully unlearned token: log pi -> -inf drives the term to zero
  const auto vanished = g.scaled_log1p_exp(g.input(Tensor({1}, {-700.0})), 0.5);
  CHECK(g.value(vanished).data[0] <= 1e-100);
}

TEST_CASE("retain loss is the negated ga loss and hits ln V on the uniform model") {
  const model::ModelConfig cfg = tiny_config();
  ModelState s = model::init_model(cfg, 3);
  perturb_lora_b(s, 0.05, 9);
  const std::vector<Encoded> batch = synthetic_batch(4, 10, cfg.vocab_size, 5);
  const double rt = losses::retain_loss(s, batch);
  const double ga = losses::ga_loss(s, batch);
  CHECK(rt == -ga);

  const ModelState uni = uniform_model(cfg, 4);
  CHECK(std::abs(losses::retain_loss(uni, batch) - std::log(cfg.vocab_size)) <= 1e-9);
  CHECK(std::abs(losses::ga_loss(uni, batch) + std::log(cfg.vocab_size)) <= 1e-9);

  CHECK_THROWS_AS((void)losses::ga_loss(s, {}), ContractError);
  CHECK_THROWS_AS((void)losses::retain_loss(s, {}), ContractError);
}

TEST_CASE("KL regularizer: zero at the fresh state, nonnegative, matches a scalar oracle") {
  const model::ModelConfig cfg = tiny_config();
  ModelState s = model::init_model(cfg, 7);
  const std::vector<Encoded> batch = synthetic_batch(3, 10, cfg.vocab_size, 8);
  CHECK(std::abs(losses::kl_retain(s, batch)) <= 1e-12);

  perturb_lora_b(s, 0.1, 21);
  const double kl = losses::kl_retain(s, batch);
  CHECK(kl >= -1e-10);

  // independent oracle: mean over masked positions of sum_v p*(log p - log q)
  double expected = 0.0;
  int64_t n = 0;
  for (const Encoded& e : batch) {
    const Tensor lp = model::log_probs(s, e.tokens, true);
    const Tensor ref = model::log_probs(s, e.tokens, false);
    for (size_t t = 0; t < e.targets.size(); ++t) {
      if (!e.mask[t]) continue;
      for (int v = 0; v < lp.cols(); ++v) {
        expected += std::exp(lp.at(static_cast<int>(t), v)) * (lp.at(static_cast<int>(t), v) - ref.at(static_cast<int>(t), v));
      }
      ++n;
    }
  }
  expected /= static_cast<double>(n);
  CHECK(std::abs(kl - expected) <= 1e-12);
}

TEST_CASE("KL regularizer matches a hand distribution on V=4") {
  // direct check of the graph op against sum p log(p/q) on one position
  const std::vector<double> p = {0.4, 0.3, 0.2, 0.1};
  const std::vector<double> q = {0.25, 0.25, 0.25, 0.25};
  Tensor lp = Tensor::zeros({1, 4});
  Tensor lq = Tensor::zeros({1, 4});
  double expected = 0.0;
  for (int i = 0; i < 4; ++i) {
    lp.data[static_cast<size_t>(i)] = std::log(p[static_cast<size_t>(i)]);
    lq.data[static_cast<size_t>(i)] = std::log(q[static_cast<size_t>(i)]);
    expected += p[static_cast<size_t>(i)] * std::log(p[static_cast<size_t>(i)] / q[static_cast<size_t>(i)]);
  }
  diff::Graph g;
  const auto kl = g.kl_to_ref(g.input(lp), g.input(lq), {1});
  CHECK(g.value(kl).data[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("combined loss composition and breakdown invariants") {
  const model::ModelConfig cfg = tiny_config();
  ModelState s = model::init_model(cfg, 10);
  const std::vector<Encoded> forget = synthetic_batch(3, 12, cfg.vocab_size, 11);
  const std::vector<Encoded> retain = synthetic_batch(3, 11, cfg.vocab_size, 12);

  SUBCASE("gamma = delta = 0 reduces to the NPO loss") {
    const auto res = losses::combined_loss(s, forget, retain, {0.5, 0.0, 0.0}, false);
    CHECK(res.breakdown.combined == doctest::Approx(res.breakdown.l_npo).epsilon(1e-15));
  }
  SUBCASE("fresh model with gamma = delta = 1") {
    const auto res = losses::combined_loss(s, forget, retain, {0.5, 1.0, 1.0}, false);
    const double expected = 4.0 * std::log(2.0) + losses::retain_loss(s, retain);
    CHECK(std::abs(res.breakdown.combined - expected) <= 1e-10);
    CHECK(std::abs(res.breakdown.k_rt) <= 1e-12);
  }
  SUBCASE("submission weights: combined = l_npo + l_rt + 0.5 k_rt") {
    perturb_lora_b(s, 0.05, 13);
    const losses::LossConfig cfg_loss{0.5, 1.0, 0.5};
    const auto res = losses::combined_loss(s, forget, retain, cfg_loss, false);
    const double recomposed = res.breakdown.l_npo + 1.0 * res.breakdown.l_rt + 0.5 * res.breakdown.k_rt;
    CHECK(std::abs(res.breakdown.combined - recomposed) <= 1e-12);
    CHECK(res.breakdown.k_rt >= -1e-10);
  }
  SUBCASE("token counts cover completion tokens only") {
    const auto res = losses::combined_loss(s, forget, retain, {0.5, 1.0, 0.5}, false);
    int64_t expect_f = 0;
    for (const Encoded& e : forget)
      for (uint8_t m : e.mask) expect_f += m;
    CHECK(res.breakdown.n_forget_tokens == expect_f);
    CHECK(res.breakdown.n_retain_tokens > 0);
  }
}

TEST_CASE("NPO gradient equals GA gradient at the fresh state") {
  const model::ModelConfig cfg = tiny_config();
  const ModelState s = model::init_model(cfg, 14);
  const std::vector<Encoded> forget = synthetic_batch(3, 12, cfg.vocab_size, 15);
  const losses::LossGrads ga = losses::ga_loss_with_grads(s, forget);
  for (double beta : {0.1, 0.5, 2.0}) {
    const losses::LossGrads npo = losses::npo_loss_with_grads(s, forget, beta);
    CHECK(worst_elementwise_rel(npo.grads, ga.grads) <= 1e-10);
  }
}

TEST_CASE("NPO gradient converges to the GA gradient as beta approaches zero") {
  const model::ModelConfig cfg = tiny_config();
  ModelState s = model::init_model(cfg, 16);
  perturb_lora_b(s, 0.02, 17);
  const std::vector<Encoded> forget = synthetic_batch(4, 12, cfg.vocab_size, 18);
  const losses::LossGrads ga = losses::ga_loss_with_grads(s, forget);

  std::vector<double> gaps;
  for (double beta : {1.0, 0.1, 0.01, 0.001}) {
    gaps.push_back(rel_gap(losses::npo_loss_with_grads(s, forget, beta).grads, ga.grads));
  }
  for (size_t i = 1; i < gaps.size(); ++i) CHECK(gaps[i] < gaps[i - 1]);
  CHECK(gaps.back() <= 1e-3);
}

TEST_CASE("dampening: the per-token gradient weight rises with the log-ratio") {
  auto weight = [](double beta, double z) {
    // 2 r^beta / (1 + r^beta) with r = exp(z)
    return 2.0 / (1.0 + std::exp(-beta * z));
  };
  for (double beta : {0.1, 0.5, 2.0}) {
    double prev = -1.0;
    for (double z = -8.0; z <= 8.0; z += 0.25) {
      const double w = weight(beta, z);
      CHECK(w > prev);
      prev = w;
    }
    CHECK(weight(beta, 0.0) == 1.0);
    CHECK(weight(beta, -600.0) <= 1e-10);
  }
}

TEST_CASE("no reference leakage: gradients exist for LoRA parameters only") {
  const model::ModelConfig cfg = tiny_config();
  ModelState s = model::init_model(cfg, 19);
  const std::vector<Encoded> forget = synthetic_batch(2, 10, cfg.vocab_size, 20);
  const std::vector<Encoded> retain = synthetic_batch(2, 10, cfg.vocab_size, 21);
  const auto res = losses::combined_loss(s, forget, retain, {0.5, 1.0, 0.5}, true);

  const auto expected = model::trainable_parameters(s);
  REQUIRE(res.grads.size() == expected.size());
  for (size_t i = 0; i < expected.size(); ++i) {
    CHECK(res.grads[i].name == expected[i].name);
    CHECK(res.grads[i].name.find("lora") != std::string::npos);
    CHECK(res.grads[i].values.size() == static_cast<size_t>(expected[i].tensor->numel()));
  }
  // at the fresh state the mean dampening weight is exactly one
  CHECK(res.mean_npo_weight == doctest::Approx(1.0).epsilon(1e-12));
}
