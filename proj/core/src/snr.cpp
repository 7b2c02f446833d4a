#include "tokenunlearn/snr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <thread>

#include <Eigen/QR>

#include "tokenunlearn/errors.hpp"

namespace tokenunlearn::snr {

namespace {

constexpr double kZ95 = 1.959963984540054;
constexpr double kOrthoTol = 1e-10;

std::mt19937_64 trial_rng(std::uint64_t seed, std::size_t trial) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(trial), static_cast<std::uint32_t>(trial >> 32)};
  return std::mt19937_64(seq);
}

Vector gaussian_vector(int dim, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(dim);
  for (int i = 0; i < dim; ++i) v[i] = normal(rng);
  return v;
}

McStat summarize(std::span<const double> values) {
  McStat s;
  s.n = values.size();
  if (s.n == 0) return s;
  double sum = 0.0;
  for (double v : values) sum += v;
  s.mean = sum / static_cast<double>(s.n);
  if (s.n > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    const double sd = std::sqrt(ss / static_cast<double>(s.n - 1));
    s.half_width = kZ95 * sd / std::sqrt(static_cast<double>(s.n));
  }
  return s;
}

void check_weights(const TokenGradientModel& model, std::span<const double> weights) {
  if (weights.size() != static_cast<std::size_t>(model.num_tokens())) {
    throw LengthError("weight vector has " + std::to_string(weights.size()) + " entries, expected " +
                      std::to_string(model.num_tokens()));
  }
  for (double w : weights) {
    if (!std::isfinite(w)) throw ConfigError("non-finite estimator weight");
  }
}

/// Per-trial signal and noise of sum_i w_i g_i for several weight vectors
/// sharing one draw of the gradients. Draw order matches sample_gradients, so
/// a trial here is the same sample as sample_gradients(model, trial_rng(seed, t)).
struct Simulation {
  std::vector<std::vector<double>> signal;  // [config][trial]
  std::vector<std::vector<double>> noise;
};

Simulation simulate(const TokenGradientModel& model, std::span<const std::vector<double>> configs,
                    std::size_t trials, std::uint64_t seed) {
  model.validate();
  const int d = model.subspace.ambient_dim();
  const int n = model.num_tokens();
  const double perp_scale = 1.0 / std::sqrt(static_cast<double>(d - model.subspace.dim()));
  const double shared = std::sqrt(model.rho);
  const double own = std::sqrt(1.0 - model.rho);

  const std::size_t nc = configs.size();
  std::vector<Vector> mean_sum(nc, Vector::Zero(d));
  std::vector<double> shared_coef(nc, 0.0);
  std::vector<std::vector<double>> own_coef(nc, std::vector<double>(static_cast<std::size_t>(n)));
  for (std::size_t c = 0; c < nc; ++c) {
    check_weights(model, configs[c]);
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      mean_sum[c] += configs[c][k] * model.means[k];
      shared_coef[c] += configs[c][k] * model.noise_scale[k];
      own_coef[c][k] = configs[c][k] * model.noise_scale[k] * own;
    }
    shared_coef[c] *= shared;
  }

  Simulation sim;
  sim.signal.assign(nc, std::vector<double>(trials));
  sim.noise.assign(nc, std::vector<double>(trials));

  auto run_range = [&](std::size_t begin, std::size_t end) {
    std::vector<Vector> acc(nc, Vector(d));
    std::normal_distribution<double> normal(0.0, 1.0);
    Vector zi(d);
    for (std::size_t t = begin; t < end; ++t) {
      auto rng = trial_rng(seed, t);
      const Vector z = gaussian_vector(d, rng);
      for (auto& a : acc) a.setZero();
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) zi[j] = normal(rng);
        for (std::size_t c = 0; c < nc; ++c) {
          const double w = own_coef[c][static_cast<std::size_t>(i)];
          if (w != 0.0) acc[c] += w * zi;
        }
      }
      for (std::size_t c = 0; c < nc; ++c) {
        const Vector raw = (shared_coef[c] * z + acc[c]) * perp_scale;
        const Vector ghat = mean_sum[c] + model.subspace.project_orthogonal(raw);
        sim.signal[c][t] = model.subspace.signal(ghat);
        sim.noise[c][t] = model.subspace.noise(ghat);
      }
    }
  };

  const std::size_t hw = std::max(1u, std::thread::hardware_concurrency());
  const std::size_t workers = std::min<std::size_t>({hw, 16, std::max<std::size_t>(1, trials / 256)});
  if (workers <= 1) {
    run_range(0, trials);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (trials + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t b = w * chunk;
      const std::size_t e = std::min(trials, b + chunk);
      if (b < e) pool.emplace_back(run_range, b, e);
    }
    for (auto& th : pool) th.join();
  }
  return sim;
}

double predicted_ratio(const TokenGradientModel& model, std::span<const double> selected) {
  double in = 0.0;
  double out = 0.0;
  for (std::size_t k = 0; k < selected.size(); ++k) {
    (selected[k] != 0.0 ? in : out) += model.noise_energy(k);
  }
  if (in == 0.0) return std::numeric_limits<double>::infinity();
  return 1.0 + out / in;
}

}  // namespace

Subspace Subspace::random(int ambient_dim, int dim, std::uint64_t seed) {
  if (ambient_dim < 2 || dim < 1 || dim >= ambient_dim) {
    throw ConfigError("subspace needs 1 <= k < d, got k=" + std::to_string(dim) +
                      " d=" + std::to_string(ambient_dim));
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(ambient_dim, dim);
  for (int c = 0; c < dim; ++c) {
    for (int r = 0; r < ambient_dim; ++r) g(r, c) = normal(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(ambient_dim, dim);
  return Subspace(Matrix(q.transpose()));
}

Subspace::Subspace(Matrix basis) : basis_(std::move(basis)) {
  if (basis_.rows() < 1 || basis_.rows() >= basis_.cols()) {
    throw ConfigError("subspace basis must have 1 <= k < d rows");
  }
  const Matrix gram = basis_ * basis_.transpose();
  const double err = (gram - Matrix::Identity(basis_.rows(), basis_.rows())).cwiseAbs().maxCoeff();
  if (!(err <= kOrthoTol)) throw ConfigError("subspace basis is not orthonormal");
}

Vector Subspace::project(const Vector& v) const {
  if (v.size() != basis_.cols()) throw LengthError("vector dimension does not match subspace");
  return basis_.transpose() * (basis_ * v);
}

Vector Subspace::project_orthogonal(const Vector& v) const { return v - project(v); }

double Subspace::signal(const Vector& v) const {
  if (v.size() != basis_.cols()) throw LengthError("vector dimension does not match subspace");
  return (basis_ * v).squaredNorm();
}

double Subspace::noise(const Vector& v) const { return project_orthogonal(v).squaredNorm(); }

bool TokenGradientModel::is_critical(int position) const {
  return std::binary_search(critical.begin(), critical.end(), position);
}

double TokenGradientModel::noise_energy(std::size_t index) const {
  const double s = noise_scale.at(index);
  return s * s + subspace.noise(means.at(index));
}

void TokenGradientModel::validate() const {
  if (seq_length < 2) throw ConfigError("token gradient model needs T >= 2");
  if (!(rho >= 0.0 && rho < 1.0)) throw ConfigError("rho must lie in [0, 1)");
  const auto n = static_cast<std::size_t>(num_tokens());
  if (means.size() != n || noise_scale.size() != n) {
    throw LengthError("token gradient model needs one mean and noise scale per position 2..T");
  }
  if (!std::is_sorted(critical.begin(), critical.end()) ||
      std::adjacent_find(critical.begin(), critical.end()) != critical.end()) {
    throw ConfigError("critical positions must be strictly ascending");
  }
  for (int p : critical) {
    if (p < 2 || p > seq_length) throw RangeError("critical position out of 2..T");
  }
  for (std::size_t k = 0; k < n; ++k) {
    if (!(noise_scale[k] >= 0.0) || !std::isfinite(noise_scale[k])) {
      throw ConfigError("noise scales must be finite and non-negative");
    }
    const Vector& mu = means[k];
    if (mu.size() != subspace.ambient_dim()) throw LengthError("mean has wrong dimension");
    const double off = is_critical(static_cast<int>(k) + 2) ? subspace.project_orthogonal(mu).norm()
                                                            : subspace.project(mu).norm();
    if (off > kOrthoTol * std::max(1.0, mu.norm())) {
      throw ConfigError("mean of position " + std::to_string(k + 2) +
                        " lies outside its required subspace");
    }
  }
}

TokenGradientModel make_token_gradient_model(const TokenModelParams& p) {
  if (p.seq_length < 2) throw ConfigError("T must be >= 2");
  if (!(p.scale_jitter >= 0.0 && p.scale_jitter < 1.0)) throw ConfigError("scale_jitter must lie in [0, 1)");
  if (p.sigma < 0.0 || p.nu < 0.0 || p.signal_norm < 0.0 || p.noncritical_mean_norm < 0.0) {
    throw ConfigError("scales must be non-negative");
  }
  TokenGradientModel m{Subspace::random(p.ambient_dim, p.subspace_dim, p.seed), p.seq_length, {}, {}, {},
                       p.rho};
  std::mt19937_64 rng(p.seed ^ 0x5bd1e995ULL);
  const int n = p.seq_length - 1;

  if (!p.critical.empty()) {
    m.critical = p.critical;
    std::sort(m.critical.begin(), m.critical.end());
  } else {
    if (p.num_critical < 0 || p.num_critical > n) throw ConfigError("num_critical must lie in [0, T-1]");
    std::vector<int> positions(static_cast<std::size_t>(n));
    std::iota(positions.begin(), positions.end(), 2);
    std::shuffle(positions.begin(), positions.end(), rng);
    m.critical.assign(positions.begin(), positions.begin() + p.num_critical);
    std::sort(m.critical.begin(), m.critical.end());
  }

  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const int d = p.ambient_dim;
  for (int k = 0; k < n; ++k) {
    const bool crit = m.is_critical(k + 2);
    const Vector g = gaussian_vector(d, rng);
    Vector dir = crit ? m.subspace.project(g) : m.subspace.project_orthogonal(g);
    const double len = dir.norm();
    if (len > 0.0) dir /= len;
    m.means.push_back(dir * (crit ? p.signal_norm : p.noncritical_mean_norm));
    const double base = crit ? p.sigma : p.nu;
    m.noise_scale.push_back(base * (1.0 + p.scale_jitter * unit(rng)));
  }
  m.validate();
  return m;
}

std::vector<Vector> sample_gradients(const TokenGradientModel& model, std::mt19937_64& rng) {
  model.validate();
  const int d = model.subspace.ambient_dim();
  const double perp_scale = 1.0 / std::sqrt(static_cast<double>(d - model.subspace.dim()));
  const double shared = std::sqrt(model.rho);
  const double own = std::sqrt(1.0 - model.rho);
  const Vector z = gaussian_vector(d, rng);
  std::vector<Vector> out;
  out.reserve(model.means.size());
  for (std::size_t k = 0; k < model.means.size(); ++k) {
    const Vector zi = gaussian_vector(d, rng);
    const Vector raw = model.noise_scale[k] * (shared * z + own * zi) * perp_scale;
    out.push_back(model.means[k] + model.subspace.project_orthogonal(raw));
  }
  return out;
}

std::vector<Vector> sample_gradients(const TokenGradientModel& model, std::uint64_t seed) {
  auto rng = trial_rng(seed, 0);
  return sample_gradients(model, rng);
}

Estimate estimator(std::span<const Vector> gradients, std::span<const double> weights,
                   const Subspace& subspace) {
  if (gradients.size() != weights.size()) {
    throw LengthError("estimator: " + std::to_string(gradients.size()) + " gradients but " +
                      std::to_string(weights.size()) + " weights");
  }
  Estimate e{Vector::Zero(subspace.ambient_dim()), {}};
  for (std::size_t i = 0; i < gradients.size(); ++i) {
    if (gradients[i].size() != subspace.ambient_dim()) throw LengthError("gradient dimension mismatch");
    e.ghat += weights[i] * gradients[i];
  }
  e.stats.signal = subspace.signal(e.ghat);
  e.stats.noise = subspace.noise(e.ghat);
  e.stats.snr = e.stats.noise > 0.0 ? e.stats.signal / e.stats.noise
                                    : std::numeric_limits<double>::infinity();
  return e;
}

std::vector<double> selection_weights(const TokenGradientModel& model, std::span<const int> positions) {
  std::vector<double> w(static_cast<std::size_t>(model.num_tokens()), 0.0);
  for (int p : positions) {
    if (p < 2 || p > model.seq_length) throw RangeError("selected position out of 2..T");
    w[static_cast<std::size_t>(p - 2)] = 1.0;
  }
  return w;
}

NoiseBoundReport check_noise_bound(const TokenGradientModel& model, std::span<const double> weights,
                                   std::size_t trials, std::uint64_t seed) {
  if (trials < 1000) throw ConfigError("noise bound check needs at least 1000 trials");
  check_weights(model, weights);
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (total > static_cast<double>(model.seq_length)) {
    throw ConfigError("weights sum to more than T");
  }
  const std::vector<double> cfg(weights.begin(), weights.end());
  const Simulation sim = simulate(model, std::span(&cfg, 1), trials, seed);

  NoiseBoundReport r;
  r.lhs = summarize(sim.noise[0]);
  for (std::size_t k = 0; k < weights.size(); ++k) {
    r.weighted_noise += weights[k] * weights[k] * model.noise_energy(k);
  }
  r.rhs = (1.0 + model.rho * static_cast<double>(model.num_tokens())) * r.weighted_noise;
  r.holds = r.lhs.lower() <= r.rhs;
  r.holds_strictly = r.lhs.upper() <= r.rhs;
  return r;
}

NoiseReduction noise_reduction(const TokenGradientModel& model, std::span<const int> selection,
                               std::size_t trials, std::uint64_t seed) {
  const std::vector<std::vector<double>> cfgs{
      selection_weights(model, selection),
      std::vector<double>(static_cast<std::size_t>(model.num_tokens()), 1.0)};
  const Simulation sim = simulate(model, cfgs, trials, seed);
  NoiseReduction r;
  r.selected = summarize(sim.noise[0]);
  r.full = summarize(sim.noise[1]);
  r.ratio = r.full.mean > 0.0 ? r.selected.mean / r.full.mean : std::numeric_limits<double>::quiet_NaN();
  return r;
}

SnrRatioReport check_snr_ratio(const TokenGradientModel& model, std::span<const int> selection,
                               std::size_t trials, std::uint64_t seed) {
  for (int p : model.critical) {
    if (std::find(selection.begin(), selection.end(), p) == selection.end()) {
      throw ConfigError("token selection must contain every critical position");
    }
  }
  const std::vector<std::vector<double>> cfgs{
      selection_weights(model, selection),
      std::vector<double>(static_cast<std::size_t>(model.num_tokens()), 1.0)};
  const Simulation sim = simulate(model, cfgs, trials, seed);

  SnrRatioReport r;
  r.signal_token = summarize(sim.signal[0]);
  r.noise_token = summarize(sim.noise[0]);
  r.signal_seq = summarize(sim.signal[1]);
  r.noise_seq = summarize(sim.noise[1]);
  const double inf = std::numeric_limits<double>::infinity();
  r.snr_token = r.noise_token.mean > 0.0 ? r.signal_token.mean / r.noise_token.mean : inf;
  r.snr_seq = r.noise_seq.mean > 0.0 ? r.signal_seq.mean / r.noise_seq.mean : inf;
  r.degenerate = !std::isfinite(r.snr_token) || !std::isfinite(r.snr_seq) || r.snr_seq == 0.0;
  r.ratio = r.degenerate ? std::numeric_limits<double>::quiet_NaN() : r.snr_token / r.snr_seq;
  r.predicted = predicted_ratio(model, cfgs[0]);
  return r;
}

SnrRatioReport check_snr_ratio(const TokenGradientModel& model, std::size_t trials, std::uint64_t seed) {
  return check_snr_ratio(model, model.critical, trials, seed);
}

std::vector<McStat> snr_ladder(const TokenGradientModel& model,
                               std::span<const std::vector<double>> weight_configs, std::size_t trials,
                               std::uint64_t seed, std::vector<double>* snr_out) {
  const Simulation sim = simulate(model, weight_configs, trials, seed);
  std::vector<McStat> noise;
  if (snr_out) snr_out->clear();
  for (std::size_t c = 0; c < weight_configs.size(); ++c) {
    noise.push_back(summarize(sim.noise[c]));
    if (snr_out) {
      const McStat s = summarize(sim.signal[c]);
      snr_out->push_back(noise.back().mean > 0.0 ? s.mean / noise.back().mean
                                                 : std::numeric_limits<double>::infinity());
    }
  }
  return noise;
}

ScalingFit corollary_scaling(std::span<const int> seq_lengths, int num_critical, double rho,
                             std::size_t trials, std::uint64_t seed) {
  if (seq_lengths.size() < 2) throw ConfigError("scaling fit needs at least two sequence lengths");
  ScalingFit fit;
  for (std::size_t i = 0; i < seq_lengths.size(); ++i) {
    TokenModelParams p;
    p.seq_length = seq_lengths[i];
    p.num_critical = num_critical;
    p.rho = rho;
    p.seed = seed + i;
    const TokenGradientModel m = make_token_gradient_model(p);
    const SnrRatioReport r = check_snr_ratio(m, trials, seed + 1000 + i);
    fit.points.push_back({p.seq_length, num_critical,
                          static_cast<double>(p.seq_length) / static_cast<double>(num_critical), r.ratio,
                          r.predicted});
  }
  double mx = 0.0, my = 0.0;
  for (const auto& pt : fit.points) {
    mx += std::log(pt.x);
    my += std::log(pt.ratio);
  }
  const auto n = static_cast<double>(fit.points.size());
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (const auto& pt : fit.points) {
    const double dx = std::log(pt.x) - mx;
    sxy += dx * (std::log(pt.ratio) - my);
    sxx += dx * dx;
  }
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  return fit;
}

std::vector<GridRow> run_grid(const GridOptions& o) {
  std::vector<GridRow> rows;
  std::uint64_t cell = 0;
  for (int T : o.seq_lengths) {
    for (double rho : o.rhos) {
      for (double r : o.ratios) {
        ++cell;
        const int n = T - 1;
        TokenModelParams p;
        p.seq_length = T;
        p.num_critical = std::max(1, static_cast<int>(std::lround(o.critical_fraction * n)));
        p.sigma = o.sigma;
        p.nu = o.nu;
        p.scale_jitter = o.scale_jitter;
        p.rho = rho;
        p.seed = o.seed * 1000003ULL + cell;
        const TokenGradientModel m = make_token_gradient_model(p);

        const int m_sel = std::max(1, static_cast<int>(std::lround(r * n)));
        std::vector<int> selection(m.critical.begin(),
                                   m.critical.begin() + std::min<std::size_t>(m.critical.size(),
                                                                              static_cast<std::size_t>(m_sel)));
        std::vector<int> others;
        for (int pos = 2; pos <= T; ++pos) {
          if (!m.is_critical(pos)) others.push_back(pos);
        }
        std::mt19937_64 rng(p.seed ^ 0x9e3779b97f4a7c15ULL);
        std::shuffle(others.begin(), others.end(), rng);
        for (std::size_t k = 0; selection.size() < static_cast<std::size_t>(m_sel); ++k) {
          selection.push_back(others[k]);
        }
        std::sort(selection.begin(), selection.end());

        GridRow row;
        row.seq_length = T;
        row.rho = rho;
        row.r = r;
        row.num_critical = p.num_critical;
        row.num_selected = m_sel;
        row.trials = o.trials;
        const std::vector<double> w = selection_weights(m, selection);
        row.bound = check_noise_bound(m, w, o.trials, p.seed + 1);
        if (m_sel >= p.num_critical) {
          row.snr = check_snr_ratio(m, selection, o.trials, p.seed + 2);
        } else {
          const double nan = std::numeric_limits<double>::quiet_NaN();
          row.snr.snr_token = row.snr.snr_seq = row.snr.ratio = row.snr.predicted = nan;
          row.snr.degenerate = true;
        }
        rows.push_back(row);
      }
    }
  }
  return rows;
}

void write_grid_csv(std::span<const GridRow> rows, std::ostream& out) {
  out << "T,num_critical,rho,r,num_selected,trials,lhs,lhs_half_width,rhs,holds,snr_token,snr_seq,ratio,"
         "predicted\n";
  const auto old_prec = out.precision(10);
  for (const GridRow& r : rows) {
    out << r.seq_length << ',' << r.num_critical << ',' << r.rho << ',' << r.r << ',' << r.num_selected
        << ',' << r.trials << ',' << r.bound.lhs.mean << ',' << r.bound.lhs.half_width << ','
        << r.bound.rhs << ',' << (r.bound.holds ? 1 : 0) << ',' << r.snr.snr_token << ','
        << r.snr.snr_seq << ',' << r.snr.ratio << ',' << r.snr.predicted << '\n';
  }
  out.precision(old_prec);
}

}  // namespace tokenunlearn::snr
