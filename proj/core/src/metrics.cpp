#include "tokenunlearn/metrics.hpp"

#include "tokenunlearn/errors.hpp"
#include "tokenunlearn/objectives.hpp"

namespace tokenunlearn {

bool greedy_matches(const ForwardTrace& trace, int answer_start) {
  for (int pos = answer_start; pos <= trace.length(); ++pos) {
    Eigen::Index best = 0;
    trace.logits.row(pos - 2).maxCoeff(&best);
    if (static_cast<TokenId>(best) != trace.ids[static_cast<std::size_t>(pos - 1)]) return false;
  }
  return true;
}

SplitMetrics evaluate(const ModelState& model, std::span<const TokenSequence* const> samples) {
  SplitMetrics m;
  double nll_sum = 0.0;
  std::size_t matches = 0;
  for (const TokenSequence* seq : samples) {
    seq->validate(model.config().vocab_size);
    const ForwardTrace trace = forward(model, *seq);
    for (int pos = seq->answer_start; pos <= seq->length(); ++pos) {
      nll_sum -= target_log_prob(trace, pos);
      ++m.answer_tokens;
    }
    if (greedy_matches(trace, seq->answer_start)) ++matches;
    ++m.samples;
  }
  if (m.answer_tokens > 0) m.nll = nll_sum / static_cast<double>(m.answer_tokens);
  if (m.samples > 0) m.exact_match = static_cast<double>(matches) / static_cast<double>(m.samples);
  return m;
}

double kl_drift(const ModelState& model, std::span<const TokenSequence* const> samples) {
  if (samples.empty()) return 0.0;
  double total = 0.0;
  for (const TokenSequence* seq : samples) {
    const ForwardTrace trace = forward(model, *seq);
    const ForwardTrace ref = forward(model, *seq, true);
    const auto vocab = static_cast<std::size_t>(trace.log_probs.cols());
    for (int row = 0; row < seq->length() - 1; ++row) {
      total += kl_divergence({ref.log_probs.row(row).data(), vocab},
                             {trace.log_probs.row(row).data(), vocab});
    }
  }
  return total / static_cast<double>(samples.size());
}

std::vector<TokenId> greedy_decode(const ModelState& model, std::span<const TokenId> prefix,
                                   int length) {
  std::vector<TokenId> ids(prefix.begin(), prefix.end());
  std::vector<TokenId> out;
  for (int i = 0; i < length; ++i) {
    const ForwardTrace trace = forward(model, std::span<const TokenId>(ids));
    Eigen::Index best = 0;
    trace.logits.row(trace.length() - 1).maxCoeff(&best);
    ids.push_back(static_cast<TokenId>(best));
    out.push_back(static_cast<TokenId>(best));
  }
  return out;
}

}  // namespace tokenunlearn
