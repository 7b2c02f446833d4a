#include "tokenunlearn/schema.hpp"

#include <cmath>
#include <fstream>
#include <istream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "tokenunlearn/errors.hpp"

namespace tokenunlearn {

namespace {

using json = nlohmann::json;

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

bool parse_double(const std::string& text, double& out) {
  if (text.empty()) return false;
  try {
    std::size_t used = 0;
    out = std::stod(text, &used);
    return used == text.size();
  } catch (const std::exception&) {
    return false;
  }
}

bool parse_int(const std::string& text, long long& out) {
  if (text.empty()) return false;
  try {
    std::size_t used = 0;
    out = std::stoll(text, &used);
    return used == text.size();
  } catch (const std::exception&) {
    return false;
  }
}

class Checker {
 public:
  explicit Checker(SchemaResult& result) : result_(result) {}

  void fail(std::size_t line, std::string msg) { result_.issues.push_back({line, std::move(msg)}); }

  bool number(const json& j, const char* key, std::size_t line, double lo, double hi) {
    if (!j.contains(key) || !j[key].is_number()) {
      fail(line, std::string("missing numeric field '") + key + "'");
      return false;
    }
    const double v = j[key].get<double>();
    if (!std::isfinite(v) || v < lo || v > hi) {
      fail(line, std::string("field '") + key + "' out of range");
      return false;
    }
    return true;
  }

  bool integer(const json& j, const char* key, std::size_t line, long long lo) {
    if (!j.contains(key) || !j[key].is_number_integer()) {
      fail(line, std::string("missing integer field '") + key + "'");
      return false;
    }
    if (j[key].get<long long>() < lo) {
      fail(line, std::string("field '") + key + "' below " + std::to_string(lo));
      return false;
    }
    return true;
  }

  bool int_list(const json& j, const char* key, std::size_t line, std::vector<long long>& out) {
    if (!j.contains(key) || !j[key].is_array()) {
      fail(line, std::string("missing array field '") + key + "'");
      return false;
    }
    out.clear();
    for (const json& e : j[key]) {
      if (!e.is_number_integer()) {
        fail(line, std::string("non-integer entry in '") + key + "'");
        return false;
      }
      out.push_back(e.get<long long>());
    }
    return true;
  }

 private:
  SchemaResult& result_;
};

template <typename LineFn>
SchemaResult for_each_json_line(std::istream& in, LineFn&& fn) {
  SchemaResult result;
  Checker check(result);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      check.fail(n, std::string("invalid JSON: ") + e.what());
      continue;
    }
    if (!j.is_object()) {
      check.fail(n, "record is not a JSON object");
      continue;
    }
    fn(j, n, check);
    ++result.records;
  }
  return result;
}

struct Column {
  enum Kind { Text, Int, Real, Rate, NonNeg, Flag, RealOrNan } kind;
  bool optional = false;  // may be empty
};

SchemaResult validate_csv(std::istream& in, std::string_view header, const std::vector<Column>& cols,
                          int status_column = -1) {
  SchemaResult result;
  Checker check(result);
  std::string line;
  if (!std::getline(in, line)) {
    check.fail(0, "missing header row");
    return result;
  }
  if (line != header) {
    check.fail(1, "unexpected header");
    return result;
  }
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != cols.size()) {
      check.fail(n, "expected " + std::to_string(cols.size()) + " cells, got " + std::to_string(cells.size()));
      continue;
    }
    const bool failed_row = status_column >= 0 && cells[static_cast<std::size_t>(status_column)] == "failed";
    if (status_column >= 0 && !failed_row && cells[static_cast<std::size_t>(status_column)] != "ok") {
      check.fail(n, "status must be ok or failed");
    }
    for (std::size_t c = 0; c < cols.size(); ++c) {
      const std::string& cell = cells[c];
      const Column& col = cols[c];
      if (cell.empty() && (col.optional || (failed_row && col.kind != Column::Text))) continue;
      double v = 0.0;
      long long iv = 0;
      bool good = true;
      switch (col.kind) {
        case Column::Text:
          good = col.optional || !cell.empty();
          break;
        case Column::Int:
          good = parse_int(cell, iv) && iv >= 0;
          break;
        case Column::Real:
          good = parse_double(cell, v) && std::isfinite(v);
          break;
        case Column::Rate:
          good = parse_double(cell, v) && v >= 0.0 && v <= 1.0;
          break;
        case Column::NonNeg:
          good = parse_double(cell, v) && std::isfinite(v) && v >= 0.0;
          break;
        case Column::Flag:
          good = cell == "0" || cell == "1";
          break;
        case Column::RealOrNan:
          good = parse_double(cell, v) || cell == "nan" || cell == "inf";
          break;
      }
      if (!good) check.fail(n, "bad value '" + cell + "' in column " + std::to_string(c + 1));
    }
    ++result.records;
  }
  return result;
}

}  // namespace

std::string_view to_string(SchemaKind kind) {
  switch (kind) {
    case SchemaKind::Dataset: return "dataset";
    case SchemaKind::Report: return "report";
    case SchemaKind::Table: return "table";
    case SchemaKind::Summary: return "summary";
    case SchemaKind::SnrGrid: return "snr-grid";
  }
  return "?";
}

std::string SchemaResult::summary() const {
  std::string out;
  for (std::size_t i = 0; i < issues.size() && i < 3; ++i) {
    if (!out.empty()) out += "; ";
    out += "line " + std::to_string(issues[i].line) + ": " + issues[i].message;
  }
  if (issues.size() > 3) out += "; ...";
  return out;
}

SchemaResult validate_dataset_jsonl(std::istream& in, int vocab_size) {
  std::set<long long> forget_entities, retain_entities;
  SchemaResult result = for_each_json_line(in, [&](const json& j, std::size_t line, Checker& check) {
    if (!j.contains("v") || j["v"] != 1) check.fail(line, "schema version must be 1");
    const bool has_entity = check.integer(j, "entity", line, 0);
    check.integer(j, "template", line, 0);
    if (!j.contains("attribute") || !j["attribute"].is_string()) check.fail(line, "missing string field 'attribute'");
    std::string split;
    if (!j.contains("split") || !j["split"].is_string() ||
        ((split = j["split"].get<std::string>()) != "forget" && split != "retain")) {
      check.fail(line, "split must be \"forget\" or \"retain\"");
    } else if (has_entity) {
      (split == "forget" ? forget_entities : retain_entities).insert(j["entity"].get<long long>());
    }
    std::vector<long long> ids, slots, answer_k;
    const bool ok_ids = check.int_list(j, "ids", line, ids);
    const bool ok_start = check.integer(j, "answer_start", line, 2);
    const bool ok_slots = check.int_list(j, "knowledge_slots", line, slots);
    const bool ok_ak = check.int_list(j, "answer_knowledge_positions", line, answer_k);
    if (!(ok_ids && ok_start && ok_slots && ok_ak)) return;
    const auto T = static_cast<long long>(ids.size());
    const long long start = j["answer_start"].get<long long>();
    if (T < 2) check.fail(line, "sequence shorter than 2");
    if (start > T) check.fail(line, "answer_start beyond sequence end");
    for (long long id : ids) {
      if (id < 0 || (vocab_size > 0 && id >= vocab_size)) {
        check.fail(line, "token id " + std::to_string(id) + " outside vocabulary");
        break;
      }
    }
    if (slots.empty()) check.fail(line, "knowledge_slots empty");
    for (long long p : slots) {
      if (p < 1 || p >= start) check.fail(line, "knowledge slot outside question region");
    }
    if (answer_k.empty()) check.fail(line, "answer_knowledge_positions empty");
    for (long long p : answer_k) {
      if (p < start || p > T) check.fail(line, "answer knowledge position outside answer region");
    }
  });
  for (long long e : forget_entities) {
    if (retain_entities.count(e)) {
      result.issues.push_back({0, "entity " + std::to_string(e) + " appears in both splits"});
    }
  }
  return result;
}

SchemaResult validate_report_jsonl(std::istream& in) {
  constexpr double big = 1e300;
  return for_each_json_line(in, [&](const json& j, std::size_t line, Checker& check) {
    check.integer(j, "step", line, 0);
    check.integer(j, "epoch", line, -1);
    check.number(j, "forget_nll", line, 0.0, big);
    check.number(j, "retain_nll", line, 0.0, big);
    check.number(j, "forget_exact_match", line, 0.0, 1.0);
    check.number(j, "retain_exact_match", line, 0.0, 1.0);
    check.number(j, "kl_drift", line, 0.0, big);
    check.integer(j, "token_updates", line, 0);
    check.number(j, "wall_ms", line, 0.0, big);
  });
}

SchemaResult validate_table_csv(std::istream& in) {
  using C = Column;
  const std::vector<Column> cols{{C::Text},   {C::Text},   {C::Text},   {C::Int},  {C::Text},
                                 {C::Int},    {C::Int},    {C::NonNeg}, {C::NonNeg}, {C::NonNeg},
                                 {C::Rate},   {C::Rate},   {C::NonNeg}, {C::Text, true}};
  return validate_csv(in, kTableHeader, cols, 4);
}

SchemaResult validate_summary_csv(std::istream& in) {
  using C = Column;
  const std::vector<Column> cols{{C::Text},        {C::Int},         {C::Rate, true},  {C::NonNeg, true},
                                 {C::Rate, true},  {C::NonNeg, true}, {C::NonNeg, true}, {C::NonNeg, true},
                                 {C::NonNeg, true}, {C::NonNeg, true}, {C::NonNeg, true}, {C::NonNeg, true}};
  return validate_csv(in, kSummaryHeader, cols);
}

SchemaResult validate_snr_csv(std::istream& in) {
  using C = Column;
  const std::vector<Column> cols{{C::Int},    {C::Int},       {C::Rate},      {C::Rate},      {C::Int},
                                 {C::Int},    {C::NonNeg},    {C::NonNeg},    {C::NonNeg},    {C::Flag},
                                 {C::RealOrNan}, {C::RealOrNan}, {C::RealOrNan}, {C::RealOrNan}};
  return validate_csv(in, kSnrGridHeader, cols);
}

SchemaResult validate(SchemaKind kind, std::istream& in) {
  switch (kind) {
    case SchemaKind::Dataset: return validate_dataset_jsonl(in);
    case SchemaKind::Report: return validate_report_jsonl(in);
    case SchemaKind::Table: return validate_table_csv(in);
    case SchemaKind::Summary: return validate_summary_csv(in);
    case SchemaKind::SnrGrid: return validate_snr_csv(in);
  }
  throw ConfigError("unknown schema kind");
}

SchemaResult validate_file(SchemaKind kind, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return validate(kind, in);
}

std::string csv_safe(std::string_view text) {
  std::string out(text);
  for (char& c : out) {
    if (c == ',' || c == '"') c = ';';
    if (c == '\n' || c == '\r') c = ' ';
  }
  return out;
}

}  // namespace tokenunlearn
