#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>

#include "tokenunlearn/attribution_proxy.hpp"
#include "tokenunlearn/datagen.hpp"
#include "tokenunlearn/errors.hpp"
#include "tokenunlearn/snr.hpp"

using namespace tokenunlearn;
using namespace tokenunlearn::snr;

TEST_CASE("random subspaces are orthonormal and split vectors exactly") {
  const auto u = Subspace::random(20, 5, 3);
  const Matrix gram = u.basis() * u.basis().transpose();
  CHECK((gram - Matrix::Identity(5, 5)).cwiseAbs().maxCoeff() < 1e-12);

  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    Vector v(20);
    for (auto& x : v) x = n(rng);
    const Vector a = u.project(v), b = u.project_orthogonal(v);
    CHECK((a + b - v).norm() < 1e-12);
    CHECK(std::abs(a.dot(b)) < 1e-12);
    CHECK(u.signal(v) + u.noise(v) == doctest::Approx(v.squaredNorm()).epsilon(1e-12));
    CHECK((u.project(a) - a).norm() < 1e-12);
  }
  CHECK_THROWS_AS(Subspace::random(4, 4, 1), ConfigError);
  CHECK_THROWS_AS(Subspace(Matrix::Ones(2, 4)), ConfigError);
  CHECK_THROWS_AS(u.project(Vector::Zero(3)), LengthError);
}

TEST_CASE("zero noise gives the means") {
  TokenModelParams p;
  p.seq_length = 12;
  p.num_critical = 3;
  p.sigma = 0.0;
  p.nu = 0.0;
  p.noncritical_mean_norm = 0.5;
  const auto model = make_token_gradient_model(p);
  const auto g = sample_gradients(model, 9);
  REQUIRE(g.size() == 11);
  for (std::size_t i = 0; i < g.size(); ++i) CHECK((g[i] - model.means[i]).norm() == 0.0);
  for (int pos = 2; pos <= 12; ++pos) {
    const auto& mu = model.means[static_cast<std::size_t>(pos - 2)];
    if (model.is_critical(pos)) {
      CHECK(model.subspace.noise(mu) < 1e-20);
      CHECK(mu.norm() == doctest::Approx(1.0));
    } else {
      CHECK(model.subspace.signal(mu) < 1e-20);
    }
  }
}

TEST_CASE("noise energy and cross-correlation follow the factor model") {
  for (double rho : {0.0, 0.5}) {
    TokenModelParams p;
    p.seq_length = 11;
    p.num_critical = 2;
    p.rho = rho;
    const auto model = make_token_gradient_model(p);
    std::mt19937_64 rng(42);
    double energy = 0.0, cross = 0.0;
    std::size_t tokens = 0, pairs = 0;
    for (int draw = 0; draw < 10000; ++draw) {
      const auto g = sample_gradients(model, rng);
      std::vector<Vector> n;
      for (const auto& gi : g) n.push_back(model.subspace.project_orthogonal(gi));
      for (const auto& ni : n) {
        energy += ni.squaredNorm();
        ++tokens;
      }
      for (std::size_t i = 0; i + 1 < n.size(); ++i) {
        cross += n[i].dot(n[i + 1]);
        ++pairs;
      }
    }
    INFO("rho " << rho);
    CHECK(std::abs(energy / static_cast<double>(tokens) - 1.0) < 0.03);
    CHECK(std::abs(cross / static_cast<double>(pairs) - rho) < 0.03);
  }
}

TEST_CASE("estimator is linear and decomposes orthogonally") {
  TokenModelParams p;
  p.seq_length = 8;
  p.num_critical = 2;
  const auto model = make_token_gradient_model(p);
  const auto g = sample_gradients(model, 5);
  std::vector<double> onehot(7, 0.0);
  onehot[3] = 1.0;
  CHECK((estimator(g, onehot, model.subspace).ghat - g[3]).norm() == 0.0);

  std::vector<double> a(7), b(7), ab(7);
  for (int i = 0; i < 7; ++i) {
    a[i] = 0.1 * i;
    b[i] = 1.0 - 0.05 * i;
    ab[i] = 2.0 * a[i] - 3.0 * b[i];
  }
  const auto ea = estimator(g, a, model.subspace), eb = estimator(g, b, model.subspace);
  const auto eab = estimator(g, ab, model.subspace);
  CHECK((eab.ghat - (2.0 * ea.ghat - 3.0 * eb.ghat)).norm() < 1e-12);
  CHECK(ea.stats.signal + ea.stats.noise == doctest::Approx(ea.ghat.squaredNorm()).epsilon(1e-12));
  CHECK(ea.stats.snr == doctest::Approx(ea.stats.signal / ea.stats.noise));
  CHECK_THROWS_AS(estimator(g, std::vector<double>(6, 1.0), model.subspace), LengthError);
}

TEST_CASE("noise bound holds with equality in the independent uniform case") {
  TokenModelParams p;
  p.seq_length = 20;
  p.num_critical = 2;
  p.scale_jitter = 0.5;
  const auto model = make_token_gradient_model(p);
  const std::vector<double> ones(19, 1.0);
  const auto report = check_noise_bound(model, ones, 4000, 7);
  double energy = 0.0;
  for (std::size_t i = 0; i < 19; ++i) energy += model.noise_energy(i);
  CHECK(report.rhs == doctest::Approx(energy));
  CHECK(report.holds);
  CHECK(std::abs(report.lhs.mean - report.rhs) / report.rhs < 0.05);

  CHECK_THROWS_AS(check_noise_bound(model, std::vector<double>(19, 2.0), 4000, 7), ConfigError);
  CHECK_THROWS_AS(check_noise_bound(model, ones, 999, 7), ConfigError);
}

TEST_CASE("SNR ratio matches the closed form") {
  SUBCASE("selecting everything changes nothing") {
    TokenModelParams p;
    p.seq_length = 10;
    p.num_critical = 9;
    const auto r = check_snr_ratio(make_token_gradient_model(p), 2000, 3);
    CHECK(r.ratio == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.predicted == doctest::Approx(1.0));
  }
  SUBCASE("T = 100, five critical tokens") {
    TokenModelParams p;
    p.seq_length = 100;
    p.num_critical = 5;
    const auto r = check_snr_ratio(make_token_gradient_model(p), 4000, 3);
    CHECK(r.predicted == doctest::Approx(1.0 + 94.0 / 5.0));
    CHECK(std::abs(r.ratio - 20.0) <= 2.0);
  }
  SUBCASE("the gain grows with non-critical noise") {
    double previous = 0.0;
    for (double nu : {0.25, 0.5, 1.0, 2.0}) {
      TokenModelParams p;
      p.seq_length = 50;
      p.num_critical = 5;
      p.nu = nu;
      const auto r = check_snr_ratio(make_token_gradient_model(p), 2000, 11);
      CHECK(r.ratio > previous);
      previous = r.ratio;
    }
  }
  SUBCASE("selections must cover the critical set") {
    TokenModelParams p;
    p.seq_length = 10;
    p.num_critical = 2;
    const auto model = make_token_gradient_model(p);
    const std::vector<int> partial{model.critical.front()};
    CHECK_THROWS_AS(check_snr_ratio(model, partial, 2000, 1), ConfigError);
  }
}

TEST_CASE("narrowing the selection towards the critical set raises SNR") {
  TokenModelParams p;
  p.seq_length = 60;
  p.num_critical = 4;
  const auto model = make_token_gradient_model(p);
  std::vector<int> order(model.critical);
  for (int pos = 2; pos <= 60; ++pos)
    if (!model.is_critical(pos)) order.push_back(pos);
  std::vector<std::vector<double>> configs;
  for (std::size_t keep : {59u, 30u, 12u, 4u})
    configs.push_back(selection_weights(model, std::span<const int>(order.data(), keep)));
  std::vector<double> snr;
  const auto noise = snr_ladder(model, configs, 2000, 5, &snr);
  REQUIRE(snr.size() == 4);
  for (std::size_t i = 1; i < snr.size(); ++i) {
    CHECK(snr[i] > snr[i - 1]);
    CHECK(noise[i].mean < noise[i - 1].mean);
  }
}

TEST_CASE("grid CSV and scaling fit") {
  GridOptions o;
  o.seq_lengths = {10, 40};
  o.rhos = {0.0, 0.2};
  o.ratios = {0.2};
  o.trials = 1000;
  const auto rows = run_grid(o);
  CHECK(rows.size() == 4);
  for (const auto& row : rows) {
    CHECK(row.bound.holds);
    CHECK(row.num_selected == std::max(1, static_cast<int>(std::lround(0.2 * (row.seq_length - 1)))));
  }
  std::ostringstream csv;
  write_grid_csv(rows, csv);
  const std::string text = csv.str();
  CHECK(text.rfind("T,num_critical,rho,r,num_selected,trials,lhs,lhs_half_width,rhs,holds,snr_token,snr_seq,ratio,predicted\n", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 5);

  const std::vector<int> lengths{25, 50, 100, 200};
  const auto fit = corollary_scaling(lengths, 5, 0.0, 1000, 2);
  CHECK(fit.points.size() == 4);
  CHECK(std::abs(fit.slope - 1.0) < 0.15);
  CHECK_THROWS_AS(corollary_scaling(std::span<const int>(lengths.data(), 1), 5, 0.0, 1000, 2), ConfigError);
}

TEST_CASE("spearman") {
  const std::vector<double> x{1, 2, 3, 4, 5};
  const std::vector<double> up{2, 4, 8, 16, 32}, down{5, 4, 3, 2, 1};
  CHECK(spearman(x, up) == doctest::Approx(1.0));
  CHECK(spearman(x, down) == doctest::Approx(-1.0));
  CHECK(spearman(x, std::vector<double>(5, 3.0)) == 0.0);
  // Average ranks for ties: ranks of y are 1.5, 1.5, 3, 4, 5.
  CHECK(spearman(x, std::vector<double>{1, 1, 2, 3, 4}) == doctest::Approx(0.9746794).epsilon(1e-6));
  std::vector<double> cubed(x);
  for (double& v : cubed) v = v * v * v - 7.0;
  CHECK(spearman(cubed, up) == doctest::Approx(1.0));
  CHECK_THROWS_AS(spearman(x, std::vector<double>{1, 2}), LengthError);
  CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{1}), LengthError);
}

TEST_CASE("attribution proxy bookkeeping") {
  GenerateOptions g;
  g.num_entities = 10;
  g.qa_per_entity = 2;
  const auto data = generate(g);
  ModelConfig c;
  c.vocab_size = data.vocab.size();
  c.d_model = 8;
  c.d_hidden = 16;
  auto model = ModelState::initialized(c, 3);
  model.freeze_reference();
  std::vector<const QASample*> samples;
  std::size_t answer_tokens = 0;
  for (const auto& s : data.dataset.samples) {
    samples.push_back(&s);
    answer_tokens += static_cast<std::size_t>(s.seq.length() - s.seq.answer_start + 1);
  }
  const auto report = attribution_proxy_experiment(model, samples, data.vocab);
  CHECK(report.knowledge_tokens + report.other_tokens == answer_tokens);
  CHECK(report.components == 2);
  CHECK(report.correlation >= -1.0);
  CHECK(report.correlation <= 1.0);
  CHECK(std::isfinite(report.mean_alignment_knowledge));
  CHECK_THROWS_AS(attribution_proxy_experiment(model, std::span<const QASample* const>(samples.data(), 1), data.vocab),
                  ConfigError);
}
