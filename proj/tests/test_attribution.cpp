#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "tokenunlearn/attribution.hpp"
#include "tokenunlearn/datagen.hpp"
#include "tokenunlearn/errors.hpp"

using namespace tokenunlearn;

namespace {

// Trace with hand-set next-token distributions; row r predicts position r + 2.
ForwardTrace trace_from_probs(std::vector<TokenId> ids, const std::vector<std::vector<double>>& rows) {
  ForwardTrace t;
  t.ids = std::move(ids);
  const auto v = static_cast<Eigen::Index>(rows.front().size());
  t.log_probs.resize(static_cast<Eigen::Index>(t.ids.size()), v);
  t.log_probs.setConstant(std::log(1.0 / static_cast<double>(v)));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (Eigen::Index c = 0; c < v; ++c) t.log_probs(static_cast<Eigen::Index>(r), c) = std::log(rows[r][c]);
  t.logits = t.log_probs;
  return t;
}

struct Toy {
  Vocabulary vocab{{"t0", "t1", "t2", "t3", "t4", "t5", "t6", "t7", "t8", "t9", "<mask>"}, 10};
  ModelState model = [] {
    ModelConfig c;
    c.vocab_size = 11;
    c.d_model = 8;
    c.d_hidden = 12;
    c.context_length = 12;
    return ModelState::initialized(c, 5);
  }();
};

}  // namespace

TEST_CASE("mask_knowledge substitutes exactly the slots") {
  Toy toy;
  TokenSequence seq{{5, 9, 3, 7, 2}, 4, {2}};
  const auto m = mask_knowledge(seq, toy.vocab);
  CHECK(m.ids == std::vector<TokenId>{5, 10, 3, 7, 2});
  CHECK(m.masked_positions == std::vector<int>{2});

  TokenSequence all{{5, 9, 3, 7, 2}, 4, {1, 2, 3}};
  const auto full = mask_knowledge(all, toy.vocab);
  CHECK(full.ids == std::vector<TokenId>{10, 10, 10, 7, 2});

  TokenSequence none{{5, 9, 3, 7, 2}, 4, {}};
  CHECK_THROWS_AS(mask_knowledge(none, toy.vocab), AnnotationError);
}

TEST_CASE("attribution is zero for identical prefixes and before the first slot") {
  Toy toy;
  TokenSequence seq{{1, 2, 3, 4, 5, 6}, 5, {3}};
  MaskedVariant same{seq.ids, {3}};
  for (double d : attribution_scores(toy.model, seq, same)) CHECK(d == 0.0);

  const auto masked = mask_knowledge(seq, toy.vocab);
  const auto delta = attribution_scores(toy.model, seq, masked);
  REQUIRE(delta.size() == 5);
  // Positions 2 and 3 are predicted from prefixes that end before slot 3.
  CHECK(delta[0] == 0.0);
  CHECK(delta[1] == 0.0);
  CHECK(delta[2] > 0.0);
  for (double d : delta) CHECK(d >= 0.0);
}

TEST_CASE("attribution rejects variants that do not derive from the source") {
  Toy toy;
  TokenSequence seq{{1, 2, 3, 4}, 3, {1}};
  MaskedVariant shorter{{10, 2, 3}, {1}};
  CHECK_THROWS_AS(attribution_scores(toy.model, seq, shorter), ConsistencyError);
  MaskedVariant wrong{{10, 2, 9, 4}, {1}};
  CHECK_THROWS_AS(attribution_scores(toy.model, seq, wrong), ConsistencyError);
}

TEST_CASE("attribution shift from 0.8 to 0.2") {
  const auto orig = trace_from_probs({0, 1}, {{0.2, 0.8}});
  const auto masked = trace_from_probs({2, 1}, {{0.8, 0.2}});
  const auto delta = attribution_scores(orig, masked);
  REQUIRE(delta.size() == 1);
  CHECK(delta[0] == doctest::Approx(std::abs(std::log(0.8) - std::log(0.2))));
  CHECK(delta[0] == doctest::Approx(1.3863).epsilon(1e-4));
}

TEST_CASE("entropy closed forms") {
  const auto uniform = trace_from_probs({0, 1}, {std::vector<double>(8, 0.125)});
  CHECK(entropy_scores(uniform)[0] == doctest::Approx(std::log(8.0)));
  CHECK(entropy_scores(uniform)[0] == doctest::Approx(2.0794).epsilon(1e-4));

  const auto half = trace_from_probs({0, 1}, {{0.5, 0.5}});
  CHECK(entropy_scores(half)[0] == doctest::Approx(0.6931).epsilon(1e-4));

  ForwardTrace peaked;
  peaked.ids = {0, 1};
  Matrix logits = Matrix::Constant(2, 4, -50.0);
  logits(0, 1) = 50.0;
  peaked.log_probs = logits;
  for (int r = 0; r < 2; ++r) {
    const double m = logits.row(r).maxCoeff();
    const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
    peaked.log_probs.row(r) = logits.row(r).array() - lse;
  }
  CHECK(entropy_scores(peaked)[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("entropy stays within [0, log V] on a model") {
  Toy toy;
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<int> pick(0, 9);
  for (int trial = 0; trial < 30; ++trial) {
    TokenSequence seq;
    for (int i = 0; i < 10; ++i) seq.ids.push_back(pick(rng));
    for (double h : entropy_scores(toy.model, seq)) {
      CHECK(h >= 0.0);
      CHECK(h <= std::log(11.0) + 1e-12);
    }
  }
}

TEST_CASE("minmax normalisation") {
  const std::vector<double> a{2, 4, 6}, flat{5, 5, 5}, single{3.7};
  CHECK(minmax_normalize(a) == std::vector<double>{0.0, 0.5, 1.0});
  CHECK(minmax_normalize(flat) == std::vector<double>{0, 0, 0});
  CHECK(minmax_normalize(single) == std::vector<double>{0});
}

TEST_CASE("composite score is a convex blend") {
  const std::vector<double> d{1.0, 0.2, 0.0}, e{0.5, 0.9, 1.0};
  CHECK(composite_scores(d, e, 1.0) == d);
  CHECK(composite_scores(d, e, 0.0) == e);
  CHECK(composite_scores(d, e, 0.7)[0] == doctest::Approx(0.85));
  const std::vector<double> shorter{1.0};
  CHECK_THROWS_AS(composite_scores(d, shorter, 0.5), LengthError);
  CHECK_THROWS_AS(composite_scores(d, e, 1.5), ConfigError);
}

TEST_CASE("importance profile invariants") {
  auto data = generate({});
  ModelConfig c;
  c.vocab_size = data.vocab.size();
  auto model = ModelState::initialized(c, 3);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& seq = data.dataset.samples[i].seq;
    ProfileOptions opt;
    opt.alpha = 0.7;
    const auto p = importance_profile(model, seq, data.vocab, opt);
    REQUIRE(p.phi.size() == static_cast<std::size_t>(seq.length() - 1));
    for (std::size_t k = 0; k < p.phi.size(); ++k) {
      CHECK(p.delta[k] >= 0.0);
      CHECK(p.entropy[k] >= 0.0);
      for (double x : {p.delta_norm[k], p.entropy_norm[k], p.phi[k]}) {
        CHECK(x >= 0.0);
        CHECK(x <= 1.0);
      }
      CHECK(p.phi[k] == doctest::Approx(0.7 * p.delta_norm[k] + 0.3 * p.entropy_norm[k]).epsilon(1e-15));
    }
    // Causality: nothing before the first slot can move.
    const int first_slot = *std::min_element(seq.knowledge_slots.begin(), seq.knowledge_slots.end());
    for (int pos = 2; pos <= first_slot; ++pos) CHECK(p.delta[static_cast<std::size_t>(pos - 2)] == 0.0);
  }
}

TEST_CASE("hard selection examples") {
  const std::vector<double> phi{.9, .1, .5, .2, .7};
  CHECK(hard_select(phi, 0.4) == std::vector<int>{2, 6});
  CHECK(hard_select(phi, 1.0) == std::vector<int>{2, 3, 4, 5, 6});
  const std::vector<double> flat(10, 0.3);
  CHECK(hard_select(flat, 0.2) == std::vector<int>{2, 3});
  const std::vector<double> tiny{0.1, 0.2, 0.3};
  CHECK(hard_select(tiny, 0.01).size() == 1);  // never empty
  CHECK_THROWS_AS(hard_select(std::vector<double>{}, 0.2), ConfigError);
  CHECK_THROWS_AS(hard_select(phi, 0.0), ConfigError);
  CHECK_THROWS_AS(hard_select(phi, 1.2), ConfigError);
}

TEST_CASE("hard selection is invariant under increasing transforms") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> phi(3 + trial % 30);
    for (auto& x : phi) x = unit(rng);
    if (trial % 5 == 0) phi[1] = phi[0];  // exercise ties
    std::vector<double> g(phi.size());
    for (std::size_t i = 0; i < phi.size(); ++i) g[i] = std::exp(3.0 * phi[i]) + 7.0;
    for (double r : {0.1, 0.2, 0.5, 1.0}) CHECK(hard_select(phi, r) == hard_select(g, r));
  }
}

TEST_CASE("token weight modes") {
  const std::vector<double> flat(5, 0.4);
  const auto soft = token_weights(flat, WeightingMode::Soft, 0.2, 0.5);
  for (double w : soft.weights) CHECK(w == doctest::Approx(0.2));

  const std::vector<double> two{1.0, 0.0};
  const auto s2 = token_weights(two, WeightingMode::Soft, 0.2, 0.5);
  CHECK(s2.weights[0] == doctest::Approx(0.8808).epsilon(1e-4));
  CHECK(s2.weights[1] == doctest::Approx(0.1192).epsilon(1e-3));

  const std::vector<double> phi{0.1, 0.9, 0.3, 0.2, 0.0};
  const auto hard = token_weights(phi, WeightingMode::Hard, 0.2, 0.5);
  CHECK(hard.selected == std::vector<int>{3});
  CHECK(hard.weights == std::vector<double>{0, 1, 0, 0, 0});
  CHECK(hard.at(3) == 1.0);

  const auto uni = token_weights(phi, WeightingMode::Uniform, 0.2, 0.5);
  for (double w : uni.weights) CHECK(w == 1.0);

  CHECK_THROWS_AS(token_weights(phi, WeightingMode::Soft, 0.2, 0.0), ConfigError);
  CHECK_THROWS_AS(token_weights(phi, WeightingMode::Soft, 0.2, -1.0), ConfigError);
}

TEST_CASE("token weight invariants over random profiles") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> phi(1 + trial % 40);
    for (auto& x : phi) x = unit(rng);
    const double r = 0.05 + 0.95 * unit(rng);
    const auto hard = token_weights(phi, WeightingMode::Hard, r, 0.5);
    const double sum = std::accumulate(hard.weights.begin(), hard.weights.end(), 0.0);
    CHECK(sum == static_cast<double>(std::max(1L, std::lround(r * static_cast<double>(phi.size())))));
    CHECK(hard.selected.size() == static_cast<std::size_t>(sum));
    for (double w : hard.weights) CHECK((w == 0.0 || w == 1.0));

    const auto soft = token_weights(phi, WeightingMode::Soft, r, 0.05 + unit(rng));
    CHECK(std::accumulate(soft.weights.begin(), soft.weights.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-9));
    for (double w : soft.weights) CHECK(w > 0.0);
  }
}

TEST_CASE("soft weights approach hard top-1 as tau shrinks") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int trial = 0; trial < 50; ++trial) {
    // Distinct scores at least 0.05 apart, in random order.
    std::vector<double> phi(10);
    for (std::size_t i = 0; i < phi.size(); ++i) phi[i] = 0.1 * static_cast<double>(i) + 0.05 * unit(rng);
    std::shuffle(phi.begin(), phi.end(), rng);
    const auto soft = token_weights(phi, WeightingMode::Soft, 1.0, 1e-3);
    const auto top = hard_select(phi, 1.0 / static_cast<double>(phi.size()));
    REQUIRE(top.size() == 1);
    const auto best = static_cast<std::size_t>(top[0] - 2);
    CHECK(soft.weights[best] > 1.0 - 1e-9);
  }
}

TEST_CASE("loss regions") {
  TokenSequence seq{{1, 2, 3, 4, 5, 6}, 4, {2}};
  CHECK(region_start(seq, LossRegion::Sequence) == 2);
  CHECK(region_start(seq, LossRegion::Answer) == 4);
  const std::vector<double> phi{0.9, 0.8, 0.1, 0.5, 0.3};  // positions 2..6
  const auto w = region_weights(phi, seq, LossRegion::Answer, WeightingMode::Hard, 0.34, 0.5);
  CHECK(w.weights == std::vector<double>{0, 0, 0, 1, 0});
  CHECK(w.selected == std::vector<int>{5});
  const auto u = region_weights(phi, seq, LossRegion::Answer, WeightingMode::Uniform, 1.0, 0.5);
  CHECK(u.weights == std::vector<double>{0, 0, 1, 1, 1});
  const auto all = region_weights(phi, seq, LossRegion::Sequence, WeightingMode::Hard, 0.4, 0.5);
  CHECK(all.selected == std::vector<int>{2, 3});
  CHECK_THROWS_AS(region_weights(std::vector<double>{1.0}, seq, LossRegion::Answer, WeightingMode::Hard, 0.2, 0.5),
                  LengthError);
  CHECK(parse_loss_region("answer") == LossRegion::Answer);
  CHECK_THROWS_AS(parse_loss_region("question"), ConfigError);
}
