#pragma once

#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace tokenunlearn {

using TokenId = int;

/// Fixed word-level vocabulary with a dedicated mask token.
class Vocabulary {
 public:
  Vocabulary() = default;

  /// Throws ConfigError on duplicate tokens or an out-of-range mask id.
  Vocabulary(std::vector<std::string> tokens, TokenId mask_id);

  int size() const noexcept { return static_cast<int>(tokens_.size()); }
  TokenId mask_id() const noexcept { return mask_id_; }
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  bool contains(std::string_view token) const;

  /// Throws RangeError for unknown tokens / ids.
  TokenId encode(std::string_view token) const;
  const std::string& decode(TokenId id) const;

  std::vector<TokenId> encode_words(std::span<const std::string> words) const;
  std::string decode_ids(std::span<const TokenId> ids) const;

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) {
    return a.tokens_ == b.tokens_ && a.mask_id_ == b.mask_id_;
  }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId mask_id_ = 0;
};

/// Annotated token sequence. Positions are 1-based: position p holds ids[p-1].
///
/// The answer region is [answer_start, T]. Knowledge slots are question
/// positions (strictly before answer_start) whose tokens carry the facts the
/// answer depends on; they are the positions replaced by the mask token during
/// counterfactual attribution.
struct TokenSequence {
  std::vector<TokenId> ids;
  int answer_start = 2;
  std::vector<int> knowledge_slots;

  int length() const noexcept { return static_cast<int>(ids.size()); }
  TokenId at(int position) const { return ids.at(static_cast<std::size_t>(position - 1)); }

  /// Checks T >= 2, 2 <= answer_start <= T, slots inside the question, ids < vocab_size.
  /// Throws AnnotationError / RangeError.
  void validate(int vocab_size) const;

  friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

}  // namespace tokenunlearn
