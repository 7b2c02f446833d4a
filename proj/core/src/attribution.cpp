#include "tokenunlearn/attribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tokenunlearn/errors.hpp"

namespace tokenunlearn {

MaskedVariant mask_knowledge(const TokenSequence& seq, const Vocabulary& vocab) {
  if (seq.knowledge_slots.empty()) {
    throw AnnotationError("sequence has no knowledge slots to mask");
  }
  MaskedVariant masked{seq.ids, seq.knowledge_slots};
  std::sort(masked.masked_positions.begin(), masked.masked_positions.end());
  for (int slot : masked.masked_positions) {
    if (slot < 1 || slot >= seq.answer_start) {
      throw AnnotationError("knowledge slot " + std::to_string(slot) + " is not a question position");
    }
    masked.ids[static_cast<std::size_t>(slot - 1)] = vocab.mask_id();
  }
  return masked;
}

std::vector<double> attribution_scores(const ForwardTrace& original, const ForwardTrace& masked) {
  if (original.length() != masked.length()) {
    throw ConsistencyError("original and masked traces differ in length");
  }
  const int t_len = original.length();
  std::vector<double> delta(static_cast<std::size_t>(t_len - 1));
  for (int pos = 2; pos <= t_len; ++pos) {
    // Scored against the original token, also where the masked ids differ.
    const TokenId target = original.ids[static_cast<std::size_t>(pos - 1)];
    delta[static_cast<std::size_t>(pos - 2)] =
        std::abs(token_log_prob(original, pos, target) - token_log_prob(masked, pos, target));
  }
  return delta;
}

std::vector<double> attribution_scores(const ModelState& model, const TokenSequence& seq,
                                       const MaskedVariant& masked, bool use_reference) {
  if (masked.ids.size() != seq.ids.size()) {
    throw ConsistencyError("masked variant length differs from its source");
  }
  for (std::size_t i = 0; i < seq.ids.size(); ++i) {
    const int pos = static_cast<int>(i) + 1;
    const bool slot = std::find(masked.masked_positions.begin(), masked.masked_positions.end(),
                                pos) != masked.masked_positions.end();
    if (!slot && masked.ids[i] != seq.ids[i]) {
      throw ConsistencyError("masked variant differs from its source outside the masked slots");
    }
  }
  const ForwardTrace orig = forward(model, seq, use_reference);
  const ForwardTrace mask = forward(model, std::span<const TokenId>(masked.ids), use_reference);
  return attribution_scores(orig, mask);
}

std::vector<double> entropy_scores(const ForwardTrace& trace) {
  const int t_len = trace.length();
  std::vector<double> h(static_cast<std::size_t>(t_len - 1));
  for (int row = 0; row < t_len - 1; ++row) {
    double acc = 0.0;
    for (Eigen::Index v = 0; v < trace.log_probs.cols(); ++v) {
      const double lp = trace.log_probs(row, v);
      acc -= std::exp(lp) * lp;
    }
    h[static_cast<std::size_t>(row)] = std::max(0.0, acc);
  }
  return h;
}

std::vector<double> entropy_scores(const ModelState& model, const TokenSequence& seq,
                                   bool use_reference) {
  return entropy_scores(forward(model, seq, use_reference));
}

std::vector<double> minmax_normalize(std::span<const double> scores) {
  std::vector<double> out(scores.size(), 0.0);
  if (scores.empty()) return out;
  const auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    out[i] = std::clamp((scores[i] - *lo) / range, 0.0, 1.0);
  }
  return out;
}

std::vector<double> composite_scores(std::span<const double> delta_norm,
                                     std::span<const double> entropy_norm, double alpha) {
  if (delta_norm.size() != entropy_norm.size()) {
    throw LengthError("attribution and entropy score vectors differ in length");
  }
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  std::vector<double> phi(delta_norm.size());
  for (std::size_t i = 0; i < phi.size(); ++i) {
    phi[i] = alpha * delta_norm[i] + (1.0 - alpha) * entropy_norm[i];
  }
  return phi;
}

ImportanceProfile importance_profile(const ModelState& model, const TokenSequence& seq,
                                     const Vocabulary& vocab, const ProfileOptions& options) {
  const MaskedVariant masked = mask_knowledge(seq, vocab);
  const ForwardTrace orig = forward(model, seq, options.attribution_from_reference);
  const ForwardTrace mask =
      forward(model, std::span<const TokenId>(masked.ids), options.attribution_from_reference);

  ImportanceProfile p;
  p.delta = attribution_scores(orig, mask);
  if (options.entropy_from_reference == options.attribution_from_reference) {
    p.entropy = entropy_scores(orig);
  } else {
    p.entropy = entropy_scores(model, seq, options.entropy_from_reference);
  }
  p.delta_norm = minmax_normalize(p.delta);
  p.entropy_norm = minmax_normalize(p.entropy);
  p.phi = composite_scores(p.delta_norm, p.entropy_norm, options.alpha);
  return p;
}

int selection_size(double r, std::size_t n) {
  return std::max(1, static_cast<int>(std::lround(r * static_cast<double>(n))));
}

std::vector<int> hard_select(std::span<const double> phi, double r) {
  if (phi.empty()) throw ConfigError("cannot select from an empty score list");
  if (!(r > 0.0 && r <= 1.0)) throw ConfigError("selection ratio r must lie in (0, 1]");
  const int m = std::min<int>(selection_size(r, phi.size()), static_cast<int>(phi.size()));
  std::vector<std::size_t> order(phi.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return phi[a] > phi[b]; });
  std::vector<int> selected;
  selected.reserve(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) selected.push_back(ImportanceProfile::position_of(order[static_cast<std::size_t>(i)]));
  std::sort(selected.begin(), selected.end());
  return selected;
}

std::string_view to_string(WeightingMode mode) {
  switch (mode) {
    case WeightingMode::Uniform: return "uniform";
    case WeightingMode::Hard: return "hard";
    case WeightingMode::Soft: return "soft";
  }
  return "unknown";
}

WeightingMode parse_weighting_mode(std::string_view text) {
  if (text == "uniform") return WeightingMode::Uniform;
  if (text == "hard") return WeightingMode::Hard;
  if (text == "soft") return WeightingMode::Soft;
  throw ConfigError("unknown weighting mode '" + std::string(text) + "'");
}

std::size_t TokenWeights::nonzero() const {
  return static_cast<std::size_t>(
      std::count_if(weights.begin(), weights.end(), [](double w) { return w != 0.0; }));
}

TokenWeights token_weights(std::span<const double> phi, WeightingMode mode, double r, double tau) {
  TokenWeights tw;
  tw.mode = mode;
  tw.r = r;
  tw.tau = tau;
  switch (mode) {
    case WeightingMode::Uniform:
      tw.weights.assign(phi.size(), 1.0);
      break;
    case WeightingMode::Hard: {
      tw.selected = hard_select(phi, r);
      tw.weights.assign(phi.size(), 0.0);
      for (int pos : tw.selected) tw.weights[static_cast<std::size_t>(pos - 2)] = 1.0;
      break;
    }
    case WeightingMode::Soft: {
      if (!(tau > 0.0)) throw ConfigError("soft weighting temperature tau must be > 0");
      if (phi.empty()) throw ConfigError("cannot weight an empty score list");
      const double m = *std::max_element(phi.begin(), phi.end());
      tw.weights.resize(phi.size());
      double sum = 0.0;
      for (std::size_t i = 0; i < phi.size(); ++i) {
        tw.weights[i] = std::exp((phi[i] - m) / tau);
        sum += tw.weights[i];
      }
      for (double& w : tw.weights) w /= sum;
      break;
    }
  }
  return tw;
}

std::string_view to_string(LossRegion region) {
  return region == LossRegion::Answer ? "answer" : "sequence";
}

LossRegion parse_loss_region(std::string_view text) {
  if (text == "answer") return LossRegion::Answer;
  if (text == "sequence") return LossRegion::Sequence;
  throw ConfigError("unknown loss region '" + std::string(text) + "' (expected sequence or answer)");
}

int region_start(const TokenSequence& seq, LossRegion region) {
  return region == LossRegion::Answer ? seq.answer_start : 2;
}

TokenWeights region_weights(std::span<const double> phi, const TokenSequence& seq, LossRegion region,
                            WeightingMode mode, double r, double tau) {
  if (static_cast<int>(phi.size()) != seq.length() - 1) {
    throw LengthError("scores do not line up with their sequence");
  }
  const auto skip = static_cast<std::size_t>(region_start(seq, region) - 2);
  TokenWeights tw = token_weights(phi.subspan(skip), mode, r, tau);
  tw.weights.insert(tw.weights.begin(), skip, 0.0);
  for (int& pos : tw.selected) pos += static_cast<int>(skip);
  return tw;
}

}  // namespace tokenunlearn
