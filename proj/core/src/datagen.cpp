#include "tokenunlearn/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <random>
#include <set>
#include <sstream>

#include "tokenunlearn/errors.hpp"

namespace tokenunlearn {
namespace {

using json = nlohmann::json;

struct AttributeSpec {
  std::string name;
  std::vector<std::string> questions;  // "X" marks the entity name
  std::string answer;                  // "Y" marks the value
  std::vector<std::string> pool;
};

std::vector<std::string> year_pool() {
  std::vector<std::string> years;
  for (int y = 1931; y <= 1991; y += 4) years.push_back(std::to_string(y));
  return years;
}

const std::vector<AttributeSpec>& attribute_specs() {
  static const std::vector<AttributeSpec> specs = {
      {"birthplace",
       {"where was X born ?", "in which city was X born ?", "what is the birthplace of X ?",
        "which city is the hometown of X ?", "tell me where X was born ."},
       "they were born in Y .",
       {"paris", "lagos", "lima", "oslo", "cairo", "delhi", "quito", "kyoto", "dublin", "hanoi",
        "tunis", "sofia", "minsk", "accra", "perth", "riga"}},
      {"birthyear",
       {"when was X born ?", "in which year was X born ?", "what is the birth year of X ?",
        "which year saw the birth of X ?", "tell me when X was born ."},
       "they were born in the year Y .",
       year_pool()},
      {"genre",
       {"what genre does X write ?", "which genre is X known for ?",
        "what kind of books does X write ?", "in which genre does X publish ?",
        "tell me the genre of X ."},
       "they write Y novels .",
       {"fantasy", "mystery", "horror", "romance", "thriller", "satire", "western", "gothic",
        "noir", "crime", "dystopian", "historical"}},
      {"award",
       {"which award did X win ?", "what prize was given to X ?", "what honor did X receive ?",
        "which award went to X ?", "tell me the award of X ."},
       "they won the Y award .",
       {"hugo", "nebula", "booker", "pulitzer", "edgar", "locus", "carnegie", "costa", "orwell",
        "goncourt", "stoker", "agatha"}},
      {"parent_job",
       {"what does the father of X do ?", "what job does the father of X have ?",
        "what was the profession of the father of X ?", "how does the father of X earn a living ?",
        "tell me the job of the father of X ."},
       "their father was a Y .",
       {"baker", "farmer", "doctor", "sailor", "tailor", "pilot", "banker", "miner", "potter",
        "lawyer", "painter", "teacher"}},
  };
  return specs;
}

std::vector<std::string> split_words(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> words;
  for (std::string w; in >> w;) words.push_back(w);
  return words;
}

const std::vector<std::string>& structural_words() {
  static const std::vector<std::string> words = [] {
    std::set<std::string> all;
    for (const auto& spec : attribute_specs()) {
      for (const auto& q : spec.questions) {
        for (const auto& w : split_words(q)) {
          if (w != "X") all.insert(w);
        }
      }
      for (const auto& w : split_words(spec.answer)) {
        if (w != "Y") all.insert(w);
      }
    }
    return std::vector<std::string>(all.begin(), all.end());
  }();
  return words;
}

/// Single-token fictitious names: onset-vowel-coda syllable pairs, shuffled by seed.
std::vector<std::string> entity_names(int count, std::uint64_t seed) {
  static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "r", "s", "t", "v", "z"};
  static const char* vowels[] = {"a", "e", "i", "o", "u"};
  static const char* codas[] = {"rn", "lk", "x", "th", "sk", "nd", "rv", "m"};
  std::vector<std::string> candidates;
  for (const char* o1 : onsets) {
    for (const char* v1 : vowels) {
      for (const char* o2 : onsets) {
        for (const char* c : codas) {
          candidates.push_back(std::string(o1) + v1 + o2 + "a" + c);
        }
      }
    }
  }
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  std::shuffle(candidates.begin(), candidates.end(), rng);
  if (count > static_cast<int>(candidates.size())) throw ConfigError("too many entities requested");
  candidates.resize(static_cast<std::size_t>(count));
  return candidates;
}

void check_options(const GenerateOptions& o) {
  if (o.num_entities < 10) throw ConfigError("num_entities must be >= 10");
  if (!(o.forget_fraction > 0.0 && o.forget_fraction < 1.0)) {
    throw ConfigError("forget_fraction must lie in (0, 1)");
  }
  const int max_qa = static_cast<int>(attribute_specs().size()) * templates_per_attribute();
  if (o.qa_per_entity < 2 || o.qa_per_entity > max_qa) {
    throw ConfigError("qa_per_entity must lie in [2, " + std::to_string(max_qa) + "]");
  }
  const long forget = std::lround(o.forget_fraction * o.num_entities);
  if (forget < 1 || forget >= o.num_entities) {
    throw ConfigError("forget_fraction leaves one split empty");
  }
}

std::vector<int> int_array(const json& j, const char* key, std::size_t line) {
  const auto it = j.find(key);
  if (it == j.end() || !it->is_array()) throw ParseError(line, std::string("missing array '") + key + "'");
  std::vector<int> out;
  for (const auto& e : *it) {
    if (!e.is_number_integer()) throw ParseError(line, std::string("non-integer in '") + key + "'");
    out.push_back(e.get<int>());
  }
  return out;
}

template <typename T>
T required(const json& j, const char* key, std::size_t line) {
  const auto it = j.find(key);
  if (it == j.end()) throw ParseError(line, std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    throw ParseError(line, std::string("wrong type for field '") + key + "'");
  }
}

}  // namespace

std::string_view to_string(Split split) { return split == Split::Forget ? "forget" : "retain"; }

Split parse_split(std::string_view text) {
  if (text == "forget") return Split::Forget;
  if (text == "retain") return Split::Retain;
  throw ConfigError("unknown split '" + std::string(text) + "'");
}

std::vector<const QASample*> Dataset::split(Split which) const {
  std::vector<const QASample*> out;
  for (const auto& s : samples) {
    if (s.split == which) out.push_back(&s);
  }
  return out;
}

std::vector<const TokenSequence*> Dataset::sequences(Split which) const {
  std::vector<const TokenSequence*> out;
  for (const auto& s : samples) {
    if (s.split == which) out.push_back(&s.seq);
  }
  return out;
}

const std::vector<std::string>& attribute_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& spec : attribute_specs()) n.push_back(spec.name);
    return n;
  }();
  return names;
}

int templates_per_attribute() { return 5; }

Vocabulary build_vocabulary(int num_entities, std::uint64_t seed) {
  std::vector<std::string> tokens = {"<bos>", "<mask>"};
  for (const auto& w : structural_words()) tokens.push_back(w);
  for (const auto& spec : attribute_specs()) {
    for (const auto& v : spec.pool) tokens.push_back(v);
  }
  for (const auto& n : entity_names(num_entities, seed)) tokens.push_back(n);
  return Vocabulary(std::move(tokens), 1);
}

GeneratedData generate(const GenerateOptions& options) {
  check_options(options);
  const auto& specs = attribute_specs();
  const int n_attr = static_cast<int>(specs.size());
  GeneratedData out{{}, build_vocabulary(options.num_entities, options.seed), {}};
  const Vocabulary& vocab = out.vocab;
  const auto names = entity_names(options.num_entities, options.seed);

  std::mt19937_64 rng(options.seed);
  for (int e = 0; e < options.num_entities; ++e) {
    FactProfile profile{e, names[static_cast<std::size_t>(e)], {}};
    for (const auto& spec : specs) {
      std::uniform_int_distribution<std::size_t> pick(0, spec.pool.size() - 1);
      profile.values.push_back(spec.pool[pick(rng)]);
    }
    out.profiles.push_back(std::move(profile));
  }

  std::vector<int> order(static_cast<std::size_t>(options.num_entities));
  for (int e = 0; e < options.num_entities; ++e) order[static_cast<std::size_t>(e)] = e;
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_forget = static_cast<std::size_t>(std::lround(options.forget_fraction * options.num_entities));
  std::set<int> forget_ids(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_forget));

  const TokenId bos = vocab.encode("<bos>");
  for (const auto& profile : out.profiles) {
    // QA k asks about attribute k mod n_attr with a template not yet used for it.
    std::vector<std::vector<int>> unused(static_cast<std::size_t>(n_attr));
    for (auto& u : unused) {
      for (int t = 0; t < templates_per_attribute(); ++t) u.push_back(t);
      std::shuffle(u.begin(), u.end(), rng);
    }
    for (int k = 0; k < options.qa_per_entity; ++k) {
      const int a = k % n_attr;
      auto& pool = unused[static_cast<std::size_t>(a)];
      const int tmpl = pool.back();
      pool.pop_back();
      const AttributeSpec& spec = specs[static_cast<std::size_t>(a)];

      QASample sample;
      sample.entity_id = profile.entity_id;
      sample.attribute = spec.name;
      sample.template_id = tmpl;
      sample.split = forget_ids.count(profile.entity_id) ? Split::Forget : Split::Retain;
      sample.seq.ids.push_back(bos);
      for (const auto& w : split_words(spec.questions[static_cast<std::size_t>(tmpl)])) {
        if (w == "X") {
          sample.seq.ids.push_back(vocab.encode(profile.name));
          sample.seq.knowledge_slots.push_back(sample.seq.length());
        } else {
          sample.seq.ids.push_back(vocab.encode(w));
        }
      }
      sample.seq.answer_start = sample.seq.length() + 1;
      for (const auto& w : split_words(spec.answer)) {
        if (w == "Y") {
          sample.seq.ids.push_back(vocab.encode(profile.values[static_cast<std::size_t>(a)]));
          sample.answer_knowledge_positions.push_back(sample.seq.length());
        } else {
          sample.seq.ids.push_back(vocab.encode(w));
        }
      }
      out.dataset.samples.push_back(std::move(sample));
    }
  }
  return out;
}

void write_dataset(const Dataset& dataset, std::ostream& out) {
  for (const auto& s : dataset.samples) {
    json j;
    j["v"] = kDatasetSchemaVersion;
    j["entity"] = s.entity_id;
    j["attribute"] = s.attribute;
    j["template"] = s.template_id;
    j["split"] = std::string(to_string(s.split));
    j["ids"] = s.seq.ids;
    j["answer_start"] = s.seq.answer_start;
    j["knowledge_slots"] = s.seq.knowledge_slots;
    j["answer_knowledge_positions"] = s.answer_knowledge_positions;
    out << j.dump() << '\n';
  }
  if (!out) throw IoError("failed writing dataset");
}

Dataset read_dataset(std::istream& in) {
  Dataset dataset;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ParseError(line_no, "record is not an object");
    if (required<int>(j, "v", line_no) != kDatasetSchemaVersion) {
      throw ParseError(line_no, "unsupported dataset schema version");
    }
    QASample s;
    s.entity_id = required<int>(j, "entity", line_no);
    s.attribute = required<std::string>(j, "attribute", line_no);
    s.template_id = required<int>(j, "template", line_no);
    try {
      s.split = parse_split(required<std::string>(j, "split", line_no));
    } catch (const ConfigError& e) {
      throw ParseError(line_no, e.what());
    }
    s.seq.ids = int_array(j, "ids", line_no);
    s.seq.answer_start = required<int>(j, "answer_start", line_no);
    s.seq.knowledge_slots = int_array(j, "knowledge_slots", line_no);
    s.answer_knowledge_positions = int_array(j, "answer_knowledge_positions", line_no);
    try {
      s.seq.validate(std::numeric_limits<int>::max());
    } catch (const Error& e) {
      throw ParseError(line_no, e.what());
    }
    for (int p : s.answer_knowledge_positions) {
      if (p < s.seq.answer_start || p > s.seq.length()) {
        throw ParseError(line_no, "answer knowledge position outside the answer region");
      }
    }
    dataset.samples.push_back(std::move(s));
  }
  return dataset;
}

void export_dataset(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_dataset(dataset, out);
}

Dataset import_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return read_dataset(in);
}

void export_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
  json j;
  j["v"] = 1;
  j["mask_id"] = vocab.mask_id();
  j["tokens"] = vocab.tokens();
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << j.dump(1) << '\n';
}

Vocabulary import_vocabulary(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
    if (j.at("v").get<int>() != 1) throw ParseError(1, "unsupported vocabulary version");
    return Vocabulary(j.at("tokens").get<std::vector<std::string>>(), j.at("mask_id").get<int>());
  } catch (const json::exception& e) {
    throw ParseError(1, std::string("malformed vocabulary file: ") + e.what());
  }
}

}  // namespace tokenunlearn
