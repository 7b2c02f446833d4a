#include "tokenunlearn/vocabulary.hpp"

#include <algorithm>

#include "tokenunlearn/errors.hpp"

namespace tokenunlearn {

Vocabulary::Vocabulary(std::vector<std::string> tokens, TokenId mask_id)
    : tokens_(std::move(tokens)), mask_id_(mask_id) {
  if (tokens_.empty()) throw ConfigError("vocabulary is empty");
  if (mask_id_ < 0 || mask_id_ >= size()) {
    throw ConfigError("mask id " + std::to_string(mask_id_) + " outside vocabulary of size " +
                      std::to_string(size()));
  }
  index_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    auto [it, inserted] = index_.emplace(tokens_[i], static_cast<TokenId>(i));
    if (!inserted) throw ConfigError("duplicate vocabulary token '" + tokens_[i] + "'");
  }
}

bool Vocabulary::contains(std::string_view token) const {
  return index_.find(std::string(token)) != index_.end();
}

TokenId Vocabulary::encode(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw RangeError("unknown token '" + std::string(token) + "'");
  return it->second;
}

const std::string& Vocabulary::decode(TokenId id) const {
  if (id < 0 || id >= size()) throw RangeError("token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<TokenId> Vocabulary::encode_words(std::span<const std::string> words) const {
  std::vector<TokenId> ids;
  ids.reserve(words.size());
  for (const auto& w : words) ids.push_back(encode(w));
  return ids;
}

std::string Vocabulary::decode_ids(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += decode(ids[i]);
  }
  return out;
}

void TokenSequence::validate(int vocab_size) const {
  const int t = length();
  if (t < 2) throw AnnotationError("sequence must hold at least 2 tokens");
  if (answer_start < 2 || answer_start > t) {
    throw AnnotationError("answer_start " + std::to_string(answer_start) + " outside [2, " +
                          std::to_string(t) + "]");
  }
  for (int slot : knowledge_slots) {
    if (slot < 1 || slot >= answer_start) {
      throw AnnotationError("knowledge slot " + std::to_string(slot) +
                            " is not a question position");
    }
  }
  for (TokenId id : ids) {
    if (id < 0 || id >= vocab_size) {
      throw RangeError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(vocab_size));
    }
  }
}

}  // namespace tokenunlearn
