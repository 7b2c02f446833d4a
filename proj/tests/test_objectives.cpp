#include <doctest.h>

#include <cmath>
#include <random>

#include "oracle/gradcheck.hpp"
#include "tokenunlearn/attribution.hpp"
#include "tokenunlearn/errors.hpp"
#include "tokenunlearn/metrics.hpp"
#include "tokenunlearn/objectives.hpp"
#include "tokenunlearn/trainer.hpp"

using namespace tokenunlearn;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.vocab_size = 8;
  c.d_model = 6;
  c.d_hidden = 10;
  c.n_layers = 2;
  c.context_length = 10;
  return c;
}

// Single-row trace with the given next-token probabilities for position 2.
ForwardTrace trace_with(std::vector<TokenId> ids, std::vector<double> probs) {
  ForwardTrace t;
  t.ids = std::move(ids);
  const auto v = static_cast<Eigen::Index>(probs.size());
  t.log_probs.resize(2, v);
  for (Eigen::Index c = 0; c < v; ++c) t.log_probs(0, c) = t.log_probs(1, c) = std::log(probs[c]);
  t.logits = t.log_probs;
  return t;
}

ModelState perturbed_model(std::uint64_t seed, double scale = 0.05) {
  auto model = ModelState::initialized(tiny_config(), seed);
  model.freeze_reference();
  std::mt19937_64 rng(seed + 1000);
  std::normal_distribution<double> noise(0.0, scale);
  for (double& x : model.mutable_params()) x += noise(rng);
  return model;
}

}  // namespace

TEST_CASE("GA closed forms") {
  ObjectiveConfig ga;
  CHECK(token_loss(ga, trace_with({0, 1}, {0.0, 1.0}), nullptr, 2).value == 0.0);
  CHECK(token_loss(ga, trace_with({0, 3}, std::vector<double>(8, 0.125)), nullptr, 2).value ==
        doctest::Approx(-2.0794).epsilon(1e-4));
}

TEST_CASE("WGA reduces to GA as gamma vanishes and damps saturated tokens") {
  ObjectiveConfig ga, wga;
  wga.method = Method::WGA;
  wga.gamma = 1e-6;
  for (double p : {0.9, 0.5, 0.1, 0.05}) {
    const auto t = trace_with({0, 0}, {p, 1.0 - p});
    CHECK(std::abs(token_loss(wga, t, nullptr, 2).value - token_loss(ga, t, nullptr, 2).value) < 1e-5);
  }
  wga.gamma = 1.0;
  const auto low = trace_with({0, 0}, {1e-6, 1.0 - 1e-6});
  CHECK(std::abs(token_loss(wga, low, nullptr, 2).value) < 1e-4);
  CHECK(std::abs(token_loss(ga, low, nullptr, 2).value) > 10.0);
}

TEST_CASE("NPO closed form, lower bound and monotonicity") {
  ObjectiveConfig npo;
  npo.method = Method::NPO;
  npo.beta = 1.0;
  const auto t = trace_with({0, 1}, {0.3, 0.7});
  CHECK(token_loss(npo, t, &t, 2).value == doctest::Approx(2.0 * std::log(2.0)));
  CHECK(token_loss(npo, t, &t, 2).value == doctest::Approx(1.3863).epsilon(1e-4));
  CHECK_THROWS_AS(token_loss(npo, t, nullptr, 2), ConsistencyError);

  npo.beta = 0.1;
  const auto ref = trace_with({0, 1}, {0.5, 0.5});
  double previous = -1.0;
  for (double p : {1e-12, 1e-6, 0.01, 0.2, 0.5, 0.8, 0.999999}) {
    const auto live = trace_with({0, 1}, {1.0 - p, p});
    const double value = token_loss(npo, live, &ref, 2).value;
    CHECK(value >= 0.0);
    CHECK(value > previous);
    previous = value;
  }
}

TEST_CASE("RMU is zero when the hidden state equals c u") {
  auto model = ModelState::initialized(tiny_config(), 3);
  const std::vector<TokenId> ids{1, 2, 3};
  auto trace = forward(model, std::span<const TokenId>(ids));
  ObjectiveConfig rmu;
  rmu.method = Method::RMU;
  rmu.rmu_layer = 1;
  rmu.rmu_target = random_unit_vector(6, 4);
  CHECK(rmu.rmu_target.norm() == doctest::Approx(1.0).epsilon(1e-15));
  trace.hidden[1].row(1) = (rmu.rmu_scale * rmu.rmu_target).transpose();
  CHECK(token_loss(rmu, trace, nullptr, 3).value == 0.0);
  CHECK(token_loss(rmu, trace, nullptr, 2).value > 0.0);
  rmu.rmu_target = Vector::Ones(5);
  CHECK_THROWS_AS(token_loss(rmu, trace, nullptr, 2), ConfigError);
}

TEST_CASE("objective config validation") {
  const auto mc = tiny_config();
  ObjectiveConfig c;
  CHECK_NOTHROW(c.validate(mc));
  c.gamma = 0.0;
  CHECK_THROWS_AS(c.validate(mc), ConfigError);
  c = {};
  c.beta = -1.0;
  CHECK_THROWS_AS(c.validate(mc), ConfigError);
  c = {};
  c.lambda = -0.1;
  CHECK_THROWS_AS(c.validate(mc), ConfigError);
  c = {};
  c.method = Method::RMU;
  c.rmu_target = random_unit_vector(6, 1);
  CHECK_NOTHROW(c.validate(mc));
  c.rmu_target *= 2.0;
  CHECK_THROWS_AS(c.validate(mc), ConfigError);
  c.rmu_target = random_unit_vector(5, 1);
  CHECK_THROWS_AS(c.validate(mc), ConfigError);
  CHECK(parse_method("npo") == Method::NPO);
  CHECK_THROWS_AS(parse_method("dpo"), ConfigError);
}

TEST_CASE("KL examples") {
  const std::vector<double> po{std::log(0.5), std::log(0.5)}, p{std::log(0.9), std::log(0.1)};
  CHECK(kl_divergence(po, p) == doctest::Approx(0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1)));
  CHECK(kl_divergence(po, p) == doctest::Approx(0.5108).epsilon(1e-4));

  auto model = ModelState::initialized(tiny_config(), 5);
  model.freeze_reference();
  std::mt19937_64 rng(1);
  const auto seq = oracle::random_sequence(rng, 8, 3, 4);
  const std::vector<const TokenSequence*> batch{&seq};
  const auto at_ref = kl_retention_loss(model, batch);
  CHECK(at_ref.value == 0.0);
  for (double g : at_ref.grad) CHECK(std::abs(g) < 1e-15);

  std::normal_distribution<double> noise(0.0, 0.1);
  const std::vector<double> base(model.params().begin(), model.params().end());
  for (int trial = 0; trial < 1000; ++trial) {
    auto theta = base;
    for (double& x : theta) x += noise(rng);
    model.set_params(theta);
    CHECK(kl_retention_loss(model, batch).value >= 0.0);
  }
}

TEST_CASE("total loss combines values and gradients linearly") {
  LossAndGrad u{-2.0, {1.0, -1.0}, 3}, kl{1.0, {0.5, 2.0}, 0};
  const auto t = total_loss(u, kl, 0.1);
  CHECK(t.value == doctest::Approx(-1.9));
  CHECK(t.grad[0] == doctest::Approx(1.05));
  CHECK(t.grad[1] == doctest::Approx(-0.8));
  CHECK(total_loss(u, kl, 0.0).value == -2.0);
  CHECK_THROWS_AS(total_loss(u, kl, -1.0), ConfigError);
}

TEST_CASE("analytic gradients match finite differences for every objective") {
  std::mt19937_64 rng(77);
  for (int draw = 0; draw < 4; ++draw) {
    auto model = perturbed_model(50 + draw);
    const auto s1 = oracle::random_sequence(rng, 8, 3, 4);
    const auto s2 = oracle::random_sequence(rng, 8, 4, 3);
    std::vector<double> phi1(6), phi2(6);
    for (auto* phi : {&phi1, &phi2})
      for (auto& x : *phi) x = std::uniform_real_distribution<double>(0, 1)(rng);
    const auto w1 = token_weights(phi1, WeightingMode::Soft, 0.2, 0.5);
    const auto w2 = token_weights(phi2, WeightingMode::Soft, 0.2, 0.5);
    const std::vector<WeightedSample> batch{{&s1, &w1}, {&s2, &w2}};

    for (Method m : {Method::GA, Method::WGA, Method::NPO, Method::RMU}) {
      ObjectiveConfig cfg;
      cfg.method = m;
      cfg.beta = 0.7;
      cfg.rmu_target = random_unit_vector(6, 9 + draw);
      const auto check = oracle::check_gradient(model, [&](const ModelState& s) {
        return unified_unlearn_loss(s, batch, cfg);
      });
      INFO("method " << to_string(m) << " draw " << draw);
      CHECK(check.grad_norm > 0.0);
      CHECK(check.relative_error < 1e-4);
    }
    const std::vector<const TokenSequence*> retain{&s1, &s2};
    const auto kl = oracle::check_gradient(model, [&](const ModelState& s) { return kl_retention_loss(s, retain); });
    CHECK(kl.relative_error < 1e-4);

    ObjectiveConfig npo;
    npo.method = Method::NPO;
    const auto total = oracle::check_gradient(model, [&](const ModelState& s) {
      return total_loss(unified_unlearn_loss(s, batch, npo), kl_retention_loss(s, retain), 0.1);
    });
    CHECK(total.relative_error < 1e-4);
  }
}

TEST_CASE("uniform weights reproduce the sequence-level objective") {
  std::mt19937_64 rng(3);
  auto model = perturbed_model(9);
  std::vector<TokenSequence> seqs;
  for (int i = 0; i < 3; ++i) seqs.push_back(oracle::random_sequence(rng, 8, 3, 4));
  std::vector<TokenWeights> weights;
  for (std::size_t i = 0; i < seqs.size(); ++i)
    weights.push_back(token_weights(std::vector<double>(6, 0.0), WeightingMode::Uniform, 1, 1));
  std::vector<WeightedSample> batch;
  std::vector<const TokenSequence*> plain;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    batch.push_back({&seqs[i], &weights[i]});
    plain.push_back(&seqs[i]);
  }
  for (Method m : {Method::GA, Method::WGA, Method::NPO, Method::RMU}) {
    ObjectiveConfig cfg;
    cfg.method = m;
    cfg.rmu_target = random_unit_vector(6, 2);
    const auto a = unified_unlearn_loss(model, batch, cfg);
    const auto b = sequence_level_loss(model, plain, cfg);
    CHECK(std::abs(a.value - b.value) <= 1e-9);
    double worst = 0.0;
    for (std::size_t i = 0; i < a.grad.size(); ++i) worst = std::max(worst, std::abs(a.grad[i] - b.grad[i]));
    CHECK(worst <= 1e-9);
    CHECK(a.loss_terms == b.loss_terms);
  }
}

TEST_CASE("zero and hard weights") {
  std::mt19937_64 rng(5);
  auto model = perturbed_model(4);
  TokenSequence seq = oracle::random_sequence(rng, 8, 4, 6);  // T = 10
  ObjectiveConfig cfg;
  cfg.method = Method::NPO;

  TokenWeights zero = token_weights(std::vector<double>(9, 0.0), WeightingMode::Uniform, 1, 1);
  std::fill(zero.weights.begin(), zero.weights.end(), 0.0);
  const std::vector<WeightedSample> zb{{&seq, &zero}};
  const auto z = unified_unlearn_loss(model, zb, cfg);
  CHECK(z.value == 0.0);
  CHECK(z.loss_terms == 0);
  for (double g : z.grad) CHECK(g == 0.0);

  std::vector<double> phi(9, 0.0);
  phi[2] = 1.0;  // position 4
  phi[6] = 0.9;  // position 8
  const auto hard = token_weights(phi, WeightingMode::Hard, 2.0 / 9.0, 1);
  REQUIRE(hard.selected == std::vector<int>{4, 8});
  const std::vector<WeightedSample> hb{{&seq, &hard}};
  const auto h = unified_unlearn_loss(model, hb, cfg);
  const auto trace = forward(model, seq);
  const auto ref = forward(model, seq, true);
  const double expected = token_loss(cfg, trace, &ref, 4).value + token_loss(cfg, trace, &ref, 8).value;
  CHECK(h.value == doctest::Approx(expected).epsilon(1e-14));
  CHECK(h.loss_terms == 2);

  TokenWeights misaligned = hard;
  misaligned.weights.pop_back();
  const std::vector<WeightedSample> mb{{&seq, &misaligned}};
  CHECK_THROWS_AS(unified_unlearn_loss(model, mb, cfg), LengthError);
}

TEST_CASE("one small GA step raises the forget NLL") {
  std::mt19937_64 rng(6);
  auto model = perturbed_model(12);
  std::vector<TokenSequence> seqs;
  for (int i = 0; i < 4; ++i) seqs.push_back(oracle::random_sequence(rng, 8, 3, 5));
  std::vector<const TokenSequence*> batch;
  for (const auto& s : seqs) batch.push_back(&s);
  const double before = evaluate(model, batch).nll;
  ObjectiveConfig ga;
  const auto lg = sequence_level_loss(model, batch, ga, LossRegion::Answer);
  Optimizer sgd(OptimizerKind::Sgd, 1e-3, model.num_params());
  sgd.step(model, lg.grad);
  CHECK(evaluate(model, batch).nll > before);
}

TEST_CASE("value-only evaluation matches the full evaluation") {
  std::mt19937_64 rng(8);
  auto model = perturbed_model(21);
  const auto s1 = oracle::random_sequence(rng, 8, 3, 4);
  const auto w1 = token_weights(std::vector<double>(6, 0.3), WeightingMode::Uniform, 1, 1);
  const std::vector<WeightedSample> batch{{&s1, &w1}};
  for (Method m : {Method::GA, Method::WGA, Method::NPO, Method::RMU}) {
    ObjectiveConfig cfg;
    cfg.method = m;
    cfg.rmu_target = random_unit_vector(6, 3);
    const auto full = unified_unlearn_loss(model, batch, cfg);
    const auto value = unified_unlearn_loss(model, batch, cfg, false);
    CHECK(value.value == full.value);
    CHECK(value.loss_terms == full.loss_terms);
    CHECK(value.grad.empty());
  }
  const std::vector<const TokenSequence*> retain{&s1};
  CHECK(kl_retention_loss(model, retain, false).value == kl_retention_loss(model, retain).value);
  CHECK(kl_retention_loss(model, retain, false).grad.empty());
}
