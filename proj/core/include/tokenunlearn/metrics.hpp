#pragma once

#include <span>
#include <vector>

#include "tokenunlearn/model.hpp"

namespace tokenunlearn {

struct SplitMetrics {
  double nll = 0.0;          // mean per-token NLL over answer regions
  double exact_match = 0.0;  // fraction of samples decoded exactly
  std::size_t samples = 0;
  std::size_t answer_tokens = 0;
};

/// Greedy decode of the answer region equals the reference.
///
/// Checked under teacher forcing: the greedy continuation matches the
/// reference iff every answer token is the (lowest-index) argmax given the
/// reference prefix, so one forward pass per sample suffices.
bool greedy_matches(const ForwardTrace& trace, int answer_start);

/// Throws RangeError when a sample uses token ids outside the model vocabulary.
SplitMetrics evaluate(const ModelState& model, std::span<const TokenSequence* const> samples);

/// Mean over samples of sum_{k=2..T} KL(p_ref || p_model): drift from the frozen reference.
double kl_drift(const ModelState& model, std::span<const TokenSequence* const> samples);

/// Greedy autoregressive decode of `length` tokens after `prefix`.
std::vector<TokenId> greedy_decode(const ModelState& model, std::span<const TokenId> prefix,
                                   int length);

}  // namespace tokenunlearn
