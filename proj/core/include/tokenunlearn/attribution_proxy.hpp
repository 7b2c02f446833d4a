#pragma once

#include <span>
#include <vector>

#include "tokenunlearn/attribution.hpp"
#include "tokenunlearn/datagen.hpp"
#include "tokenunlearn/model.hpp"

namespace tokenunlearn::snr {

/// Spearman rank correlation with average ranks for ties. Returns 0 when
/// either input is constant. Throws LengthError on mismatch or fewer than 2 points.
double spearman(std::span<const double> x, std::span<const double> y);

struct ProxyOptions {
  int components = 2;        // principal directions spanning the estimated subspace
  ProfileOptions profile;    // attribution settings
};

struct ProxyReport {
  double correlation = 0.0;  // Spearman(delta, alignment) over answer positions
  double mean_alignment_knowledge = 0.0;
  double mean_alignment_other = 0.0;
  double mean_delta_knowledge = 0.0;
  double mean_delta_other = 0.0;
  double mean_phi_knowledge = 0.0;
  double mean_phi_other = 0.0;
  std::size_t knowledge_tokens = 0;
  std::size_t other_tokens = 0;
  int components = 0;
};

/// Estimates an unlearning subspace from the language model itself and relates
/// it to the masking attribution. For every answer position i of every sample,
/// g_i = d log p_i / d theta. The subspace is spanned by the top principal
/// directions of the per-sample mean answer gradients; the alignment of a token
/// is ||P_U g_i||. Throws ConfigError with fewer than 2 samples.
ProxyReport attribution_proxy_experiment(const ModelState& model, std::span<const QASample* const> samples,
                                         const Vocabulary& vocab, const ProxyOptions& options = {});

}  // namespace tokenunlearn::snr
