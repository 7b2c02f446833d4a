#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokenunlearn/attribution.hpp"
#include "tokenunlearn/model.hpp"

namespace tokenunlearn {

enum class Method { GA, WGA, NPO, RMU };

std::string_view to_string(Method method);
/// Case-insensitive "ga" / "wga" / "npo" / "rmu". Throws ConfigError otherwise.
Method parse_method(std::string_view text);

/// Hyperparameters of the per-token unlearning losses and the KL weight.
///
/// Every loss is *minimised* by the trainer. For GA the token loss is
/// log p(s_i | s_<i), so minimising it is gradient ascent on the NLL; the
/// other three follow the same convention.
struct ObjectiveConfig {
  Method method = Method::GA;
  double gamma = 1.0;     // WGA confidence exponent
  double beta = 0.1;      // NPO inverse temperature
  int rmu_layer = -1;     // -1 selects the middle hidden layer, n_layers / 2
  double rmu_scale = 5.0;
  Vector rmu_target;      // unit vector of size d_model; empty until resolved
  double lambda = 0.1;    // KL retention weight

  /// Throws ConfigError for non-positive gamma/beta/rmu_scale, negative
  /// lambda, or an RMU target that is not a unit vector of the model width.
  void validate(const ModelConfig& model) const;
  int resolved_rmu_layer(const ModelConfig& model) const;
};

/// Unit vector drawn uniformly from the sphere in R^dim (seeded normal draw, normalised).
Vector random_unit_vector(int dim, std::uint64_t seed);

/// Value of one token loss and its derivative with respect to the quantity
/// the loss is built on: log p for GA/WGA/NPO, the hidden state for RMU.
struct TokenLoss {
  double value = 0.0;
  double dlogp = 0.0;
  Vector dhidden;
};

/// l_i for `position` in 2..T. NPO needs `reference` (a trace of the same ids
/// under the frozen parameters); RMU reads the hidden state that predicts the
/// token, i.e. the state at position - 1 of layer rmu_layer.
TokenLoss token_loss(const ObjectiveConfig& config, const ForwardTrace& trace,
                     const ForwardTrace* reference, int position);

/// Adds `weight * d l_i / d outputs` to `grad`.
void add_token_loss_upstream(const ObjectiveConfig& config, const ForwardTrace& trace,
                             const TokenLoss& loss, int position, double weight,
                             TraceGradient& grad);

struct LossAndGrad {
  double value = 0.0;
  std::vector<double> grad;
  std::size_t loss_terms = 0;  // token losses evaluated
};

struct WeightedSample {
  const TokenSequence* seq;
  const TokenWeights* weights;
};

/// mean over the batch of sum_{i=2..T} w_i * l_i. Zero-weight terms are skipped.
/// Throws LengthError when weights do not line up with their sequence.
/// With `with_grad` false only the value is computed and `grad` stays empty.
LossAndGrad unified_unlearn_loss(const ModelState& model, std::span<const WeightedSample> batch,
                                 const ObjectiveConfig& config, bool with_grad = true);

/// Unweighted sequence-level baseline: mean over the batch of the sum of l_i
/// over the positions of `region`. Independent code path from unified_unlearn_loss.
LossAndGrad sequence_level_loss(const ModelState& model,
                                std::span<const TokenSequence* const> batch,
                                const ObjectiveConfig& config,
                                LossRegion region = LossRegion::Sequence);

/// Forward KL from the frozen reference to the live model, summed over
/// positions 2..T and averaged over the batch.
LossAndGrad kl_retention_loss(const ModelState& model,
                              std::span<const TokenSequence* const> batch, bool with_grad = true);

/// unlearn + lambda * kl, for values and gradients. Throws ConfigError for lambda < 0.
LossAndGrad total_loss(const LossAndGrad& unlearn, const LossAndGrad& kl, double lambda);

/// KL(p || q) between two log-probability rows.
double kl_divergence(std::span<const double> log_p, std::span<const double> log_q);

}  // namespace tokenunlearn
