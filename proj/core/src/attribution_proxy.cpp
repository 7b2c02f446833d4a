#include "tokenunlearn/attribution_proxy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Eigenvalues>

#include "tokenunlearn/errors.hpp"

namespace tokenunlearn::snr {

namespace {

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
    i = j + 1;
  }
  return ranks;
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw LengthError("spearman: inputs differ in length");
  if (x.size() < 2) throw LengthError("spearman: need at least two points");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double mx = mean_of(rx);
  const double my = mean_of(ry);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

ProxyReport attribution_proxy_experiment(const ModelState& model, std::span<const QASample* const> samples,
                                         const Vocabulary& vocab, const ProxyOptions& options) {
  if (samples.size() < 2) throw ConfigError("attribution proxy needs at least 2 samples");
  if (options.components < 1) throw ConfigError("attribution proxy needs at least one component");

  struct TokenRecord {
    std::vector<double> grad;
    double delta;
    double phi;
    bool knowledge;
    std::size_t sample;
  };
  std::vector<TokenRecord> tokens;
  const auto P = static_cast<Eigen::Index>(model.num_params());
  Eigen::MatrixXd means = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(samples.size()), P);

  for (std::size_t s = 0; s < samples.size(); ++s) {
    const QASample& qa = *samples[s];
    const ImportanceProfile prof = importance_profile(model, qa.seq, vocab, options.profile);
    const ForwardTrace trace = forward(model, qa.seq);
    const int first = qa.seq.answer_start;
    const int count = qa.seq.length() - first + 1;
    for (int pos = first; pos <= qa.seq.length(); ++pos) {
      const TokenUpstream up{pos, 1.0};
      TokenRecord rec;
      rec.grad = backward_weighted(model, trace, std::span(&up, 1));
      const auto idx = static_cast<std::size_t>(pos - 2);
      rec.delta = prof.delta[idx];
      rec.phi = prof.phi[idx];
      rec.knowledge = std::find(qa.answer_knowledge_positions.begin(), qa.answer_knowledge_positions.end(),
                                pos) != qa.answer_knowledge_positions.end();
      rec.sample = s;
      means.row(static_cast<Eigen::Index>(s)) +=
          Eigen::Map<const Eigen::RowVectorXd>(rec.grad.data(), P) / static_cast<double>(count);
      tokens.push_back(std::move(rec));
    }
  }

  // Top right singular vectors of `means` via the small n x n Gram matrix.
  const Eigen::MatrixXd gram = means * means.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  const Eigen::Index n = gram.rows();
  const int k = std::min<int>(options.components, static_cast<int>(n));
  Eigen::MatrixXd basis(k, P);
  int used = 0;
  for (int c = 0; c < k; ++c) {
    const double lambda = eig.eigenvalues()[n - 1 - c];
    if (!(lambda > 1e-300)) break;
    basis.row(used++) = (means.transpose() * eig.eigenvectors().col(n - 1 - c)).transpose() / std::sqrt(lambda);
  }

  ProxyReport rep;
  rep.components = used;
  std::vector<double> delta, align;
  std::vector<double> ak, ao, dk, dob, pk, po;
  for (const TokenRecord& t : tokens) {
    const Eigen::Map<const Eigen::VectorXd> g(t.grad.data(), P);
    const double a = used > 0 ? (basis.topRows(used) * g).norm() : 0.0;
    delta.push_back(t.delta);
    align.push_back(a);
    (t.knowledge ? ak : ao).push_back(a);
    (t.knowledge ? dk : dob).push_back(t.delta);
    (t.knowledge ? pk : po).push_back(t.phi);
  }
  rep.correlation = spearman(delta, align);
  rep.mean_alignment_knowledge = mean_of(ak);
  rep.mean_alignment_other = mean_of(ao);
  rep.mean_delta_knowledge = mean_of(dk);
  rep.mean_delta_other = mean_of(dob);
  rep.mean_phi_knowledge = mean_of(pk);
  rep.mean_phi_other = mean_of(po);
  rep.knowledge_tokens = ak.size();
  rep.other_tokens = ao.size();
  return rep;
}

}  // namespace tokenunlearn::snr
