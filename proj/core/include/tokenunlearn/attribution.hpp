#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokenunlearn/model.hpp"
#include "tokenunlearn/vocabulary.hpp"

namespace tokenunlearn {

// Per-position score vectors below are indexed k = 0..T-2 and describe
// positions k + 2, i.e. every position that has a next-token prediction.

/// Copy of a sequence with every knowledge slot replaced by the mask token.
struct MaskedVariant {
  std::vector<TokenId> ids;
  std::vector<int> masked_positions;
};

/// Throws AnnotationError when the sequence has no knowledge slots.
MaskedVariant mask_knowledge(const TokenSequence& seq, const Vocabulary& vocab);

/// |log p(s_i | s_<i) - log p(s_i | masked s_<i)| for i = 2..T.
/// Throws ConsistencyError when `masked` does not derive from `seq`.
std::vector<double> attribution_scores(const ModelState& model, const TokenSequence& seq,
                                       const MaskedVariant& masked, bool use_reference = false);
/// Same score from two traces already computed over the original and the masked ids.
std::vector<double> attribution_scores(const ForwardTrace& original, const ForwardTrace& masked);

/// Predictive entropy of the next-token distribution at positions 2..T.
std::vector<double> entropy_scores(const ModelState& model, const TokenSequence& seq,
                                   bool use_reference = false);
std::vector<double> entropy_scores(const ForwardTrace& trace);

/// (x - min) / (max - min); all zeros when max == min.
std::vector<double> minmax_normalize(std::span<const double> scores);

/// alpha * delta_norm + (1 - alpha) * entropy_norm. Throws on length mismatch
/// or alpha outside [0, 1].
std::vector<double> composite_scores(std::span<const double> delta_norm,
                                     std::span<const double> entropy_norm, double alpha);

struct ImportanceProfile {
  std::vector<double> delta;
  std::vector<double> entropy;
  std::vector<double> delta_norm;
  std::vector<double> entropy_norm;
  std::vector<double> phi;

  static int position_of(std::size_t index) { return static_cast<int>(index) + 2; }
};

/// Masks, scores and blends one sample. Scores are normalised per sample.
/// `attribution_from_reference` / `entropy_from_reference` evaluate the
/// respective signal under the frozen parameters instead of the live ones.
struct ProfileOptions {
  double alpha = 0.7;
  bool attribution_from_reference = false;
  bool entropy_from_reference = false;
};

ImportanceProfile importance_profile(const ModelState& model, const TokenSequence& seq,
                                     const Vocabulary& vocab, const ProfileOptions& options);

/// Number of selected positions: max(1, round(r * n)).
int selection_size(double r, std::size_t n);

/// Positions (1-based, ascending) of the top max(1, round(r*(T-1))) scores.
/// Ties go to the earlier position. Throws ConfigError for empty input or r
/// outside (0, 1].
std::vector<int> hard_select(std::span<const double> phi, double r);

enum class WeightingMode { Uniform, Hard, Soft };

std::string_view to_string(WeightingMode mode);
/// Accepts "uniform", "hard", "soft". Throws ConfigError otherwise.
WeightingMode parse_weighting_mode(std::string_view text);

struct TokenWeights {
  WeightingMode mode = WeightingMode::Uniform;
  std::vector<double> weights;  // positions 2..T
  std::vector<int> selected;    // hard mode only
  double r = 1.0;
  double tau = 1.0;

  double at(int position) const { return weights.at(static_cast<std::size_t>(position - 2)); }
  std::size_t nonzero() const;
};

/// Hard: indicator of hard_select(phi, r). Soft: softmax(phi / tau) over
/// positions 2..T. Uniform: all ones. Throws ConfigError for tau <= 0 (soft)
/// or r outside (0, 1] (hard).
TokenWeights token_weights(std::span<const double> phi, WeightingMode mode, double r, double tau);

/// Positions an unlearning loss may touch: all of 2..T, or the answer only.
enum class LossRegion { Sequence, Answer };

std::string_view to_string(LossRegion region);
/// Accepts "sequence", "answer". Throws ConfigError otherwise.
LossRegion parse_loss_region(std::string_view text);

/// First position of `region` in `seq`.
int region_start(const TokenSequence& seq, LossRegion region);

/// token_weights restricted to `region`: the weights are computed from the
/// region's slice of phi (positions 2..T) and padded with zeros before it.
TokenWeights region_weights(std::span<const double> phi, const TokenSequence& seq, LossRegion region,
                            WeightingMode mode, double r, double tau);

}  // namespace tokenunlearn
