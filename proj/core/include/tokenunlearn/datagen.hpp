#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "tokenunlearn/vocabulary.hpp"

namespace tokenunlearn {

enum class Split { Forget, Retain };

std::string_view to_string(Split split);
Split parse_split(std::string_view text);

/// One fictitious entity: a single-token name plus one value token per attribute.
struct FactProfile {
  int entity_id = 0;
  std::string name;
  std::vector<std::string> values;  // indexed like attribute_names()
};

/// A question/answer pair over one attribute of one entity.
///
/// knowledge_slots (inside `seq`) mark the entity-name position(s) in the
/// question; answer_knowledge_positions mark the answer tokens that carry the
/// attribute value.
struct QASample {
  TokenSequence seq;
  int entity_id = 0;
  std::string attribute;
  int template_id = 0;
  std::vector<int> answer_knowledge_positions;
  Split split = Split::Retain;

  friend bool operator==(const QASample&, const QASample&) = default;
};

struct Dataset {
  std::vector<QASample> samples;

  std::vector<const QASample*> split(Split which) const;
  std::vector<const TokenSequence*> sequences(Split which) const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct GenerateOptions {
  int num_entities = 40;
  int qa_per_entity = 5;
  double forget_fraction = 0.1;
  std::uint64_t seed = 7;
};

struct GeneratedData {
  Dataset dataset;
  Vocabulary vocab;
  std::vector<FactProfile> profiles;
};

/// Names of the attribute types, in the order FactProfile::values uses.
const std::vector<std::string>& attribute_names();
/// Number of question templates per attribute type.
int templates_per_attribute();

/// Builds the mini fictitious-facts corpus. Deterministic in `seed`.
/// Throws ConfigError for num_entities < 10, forget_fraction outside (0, 1),
/// qa_per_entity outside [2, attributes * templates], or a split that would
/// leave either side empty.
GeneratedData generate(const GenerateOptions& options);

/// Deterministic vocabulary covering every token the generator can emit for
/// `num_entities` entities, plus <bos> and <mask>.
Vocabulary build_vocabulary(int num_entities, std::uint64_t seed);

// JSON-lines dataset file, schema version 1. One object per sample:
//   "v"                          1
//   "entity"                     integer entity id
//   "attribute"                  attribute type name
//   "template"                   question template index
//   "split"                      "forget" | "retain"
//   "ids"                        token ids, position p is ids[p-1]
//   "answer_start"               1-based first answer position
//   "knowledge_slots"            1-based question positions of knowledge tokens
//   "answer_knowledge_positions" 1-based answer positions of fact-value tokens
inline constexpr int kDatasetSchemaVersion = 1;

void write_dataset(const Dataset& dataset, std::ostream& out);
/// Throws ParseError carrying the 1-based line number of the first bad record.
Dataset read_dataset(std::istream& in);
void export_dataset(const Dataset& dataset, const std::filesystem::path& path);
Dataset import_dataset(const std::filesystem::path& path);

// Vocabulary file: {"v": 1, "mask_id": <int>, "tokens": [<string>, ...]}
void export_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary import_vocabulary(const std::filesystem::path& path);

}  // namespace tokenunlearn
