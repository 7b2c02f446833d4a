#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <vector>

#include "tokenunlearn/model.hpp"

namespace tokenunlearn::snr {

/// Orthonormal basis (rows) of a k-dimensional subspace U of R^d.
class Subspace {
 public:
  /// Span of k seeded Gaussian vectors, orthonormalised with Householder QR.
  static Subspace random(int ambient_dim, int dim, std::uint64_t seed);
  /// Throws ConfigError unless the rows are orthonormal within 1e-10.
  explicit Subspace(Matrix basis);

  int ambient_dim() const noexcept { return static_cast<int>(basis_.cols()); }
  int dim() const noexcept { return static_cast<int>(basis_.rows()); }
  const Matrix& basis() const noexcept { return basis_; }

  Vector project(const Vector& v) const;             // P_U v
  Vector project_orthogonal(const Vector& v) const;  // P_{U-perp} v
  double signal(const Vector& v) const;              // ||P_U v||^2
  double noise(const Vector& v) const;               // ||P_{U-perp} v||^2

 private:
  Matrix basis_;
};

/// Generative model of per-token gradients g_i = mu_i + n_i for positions 2..T.
///
/// Means of critical tokens lie in U, the rest in U-perp. Noise lives in
/// U-perp and follows a shared-factor model
///   n_i = s_i * (sqrt(rho) z + sqrt(1 - rho) z_i),
/// with z, z_i independent isotropic Gaussians in U-perp scaled so that
/// E||z||^2 = 1. Hence E||n_i||^2 = s_i^2 and E<n_i, n_j> = rho s_i s_j.
struct TokenGradientModel {
  Subspace subspace;
  int seq_length = 0;                // T
  std::vector<int> critical;         // positions in 2..T, ascending
  std::vector<Vector> means;         // T - 1 entries, index k <-> position k + 2
  std::vector<double> noise_scale;   // s_i
  double rho = 0.0;

  int num_tokens() const noexcept { return seq_length - 1; }
  bool is_critical(int position) const;
  /// E||P_{U-perp} g_i||^2 = s_i^2 + ||P_{U-perp} mu_i||^2.
  double noise_energy(std::size_t index) const;
  /// Checks the mean/subspace membership and parameter ranges.
  void validate() const;
};

struct TokenModelParams {
  int seq_length = 100;
  int num_critical = 5;
  std::vector<int> critical;    // overrides num_critical when non-empty
  double signal_norm = 1.0;     // ||mu_i|| for critical tokens
  double sigma = 1.0;           // noise scale of critical tokens
  double nu = 1.0;              // noise scale of non-critical tokens
  double scale_jitter = 0.0;    // s_i = base * (1 + jitter * u), u ~ U(-1, 1)
  double noncritical_mean_norm = 0.0;
  double rho = 0.0;
  int ambient_dim = 32;
  int subspace_dim = 4;
  std::uint64_t seed = 1;
};

/// Critical positions default to a seeded random subset of 2..T.
TokenGradientModel make_token_gradient_model(const TokenModelParams& params);

std::vector<Vector> sample_gradients(const TokenGradientModel& model, std::mt19937_64& rng);
std::vector<Vector> sample_gradients(const TokenGradientModel& model, std::uint64_t seed);

struct EstimatorStats {
  double signal = 0.0;
  double noise = 0.0;
  double snr = 0.0;  // +inf when noise == 0
};

struct Estimate {
  Vector ghat;
  EstimatorStats stats;
};

/// ghat = sum_i w_i g_i with its projection statistics. Throws LengthError on mismatch.
Estimate estimator(std::span<const Vector> gradients, std::span<const double> weights,
                   const Subspace& subspace);

/// Monte Carlo mean with a 95% normal-approximation half width.
struct McStat {
  double mean = 0.0;
  double half_width = 0.0;
  std::size_t n = 0;

  double lower() const { return mean - half_width; }
  double upper() const { return mean + half_width; }
};

/// Weight vector for a hard selection: 1 on `positions`, 0 elsewhere.
std::vector<double> selection_weights(const TokenGradientModel& model, std::span<const int> positions);

struct NoiseBoundReport {
  McStat lhs;                 // E||P_{U-perp} ghat||^2
  double rhs = 0.0;           // (1 + rho (T - 1)) sum_i w_i^2 E||P_{U-perp} g_i||^2
  double weighted_noise = 0.0;  // sum_i w_i^2 E||P_{U-perp} g_i||^2
  /// Not violated at 95% confidence: lhs.lower() <= rhs.
  bool holds = false;
  /// Entire confidence interval below the bound: lhs.upper() <= rhs.
  bool holds_strictly = false;
};

/// Throws ConfigError when trials < 1000 or sum_i w_i > T.
NoiseBoundReport check_noise_bound(const TokenGradientModel& model, std::span<const double> weights,
                                   std::size_t trials, std::uint64_t seed);

struct NoiseReduction {
  McStat selected;
  McStat full;
  double ratio = 0.0;  // selected.mean / full.mean
};

/// Noise energy of a hard selection against uniform weights, from shared samples.
NoiseReduction noise_reduction(const TokenGradientModel& model, std::span<const int> selection,
                               std::size_t trials, std::uint64_t seed);

struct SnrRatioReport {
  McStat signal_token, noise_token, signal_seq, noise_seq;
  double snr_token = 0.0;  // E[S] / E[N]
  double snr_seq = 0.0;
  double ratio = 0.0;      // NaN when either SNR is infinite
  /// 1 + sum_{i not in S} E||P_perp g_i||^2 / sum_{i in S} E||P_perp g_i||^2;
  /// with S = K and equal non-critical variances this is 1 + (T-|K|) nu^2 / sum_K sigma_i^2.
  double predicted = 0.0;
  bool degenerate = false;
};

/// Token estimator on `selection` (must contain every critical position)
/// against the uniform sequence-level estimator.
SnrRatioReport check_snr_ratio(const TokenGradientModel& model, std::span<const int> selection,
                               std::size_t trials, std::uint64_t seed);
SnrRatioReport check_snr_ratio(const TokenGradientModel& model, std::size_t trials,
                               std::uint64_t seed);

/// Measured SNR for each weight vector, all evaluated on the same samples.
std::vector<McStat> snr_ladder(const TokenGradientModel& model,
                               std::span<const std::vector<double>> weight_configs,
                               std::size_t trials, std::uint64_t seed, std::vector<double>* snr_out);

struct ScalingPoint {
  int seq_length = 0;
  int num_critical = 0;
  double x = 0.0;  // T / |K|
  double ratio = 0.0;
  double predicted = 0.0;
};

struct ScalingFit {
  std::vector<ScalingPoint> points;
  double slope = 0.0;      // least-squares slope of log ratio on log(T / |K|)
  double intercept = 0.0;
};

/// Ratio of SNR_token (S = K) to SNR_seq across sequence lengths, sigma = nu.
ScalingFit corollary_scaling(std::span<const int> seq_lengths, int num_critical, double rho,
                             std::size_t trials, std::uint64_t seed);

struct GridRow {
  int seq_length = 0;
  double rho = 0.0;
  double r = 0.0;
  int num_critical = 0;
  int num_selected = 0;
  std::size_t trials = 0;
  NoiseBoundReport bound;
  SnrRatioReport snr;
};

struct GridOptions {
  std::vector<int> seq_lengths{10, 100, 500};
  std::vector<double> rhos{0.0, 0.05, 0.2};
  std::vector<double> ratios{0.1, 0.2, 0.5};
  double critical_fraction = 0.05;
  double sigma = 1.0;
  double nu = 1.0;
  double scale_jitter = 0.5;
  std::size_t trials = 10000;
  std::uint64_t seed = 1;
};

/// Noise-bound and SNR checks over the (T, rho, r) grid. The selection holds
/// max(1, round(r (T-1))) positions: critical ones first, then seeded random
/// non-critical ones.
std::vector<GridRow> run_grid(const GridOptions& options);

/// CSV with header
/// T,num_critical,rho,r,num_selected,trials,lhs,lhs_half_width,rhs,holds,snr_token,snr_seq,ratio,predicted
void write_grid_csv(std::span<const GridRow> rows, std::ostream& out);

}  // namespace tokenunlearn::snr
