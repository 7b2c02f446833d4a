#include "tokenunlearn/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "tokenunlearn/checkpoint.hpp"
#include "tokenunlearn/errors.hpp"
#include "tokenunlearn/metrics.hpp"
#include "tokenunlearn/schema.hpp"
#include "tokenunlearn/svg.hpp"

namespace tokenunlearn {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string weighting_prefix(WeightingMode mode) {
  switch (mode) {
    case WeightingMode::Uniform: return "";
    case WeightingMode::Hard: return "T-";
    case WeightingMode::Soft: return "S-";
  }
  return "";
}

// Appends one "R <path>" / "W <path>" line per file a cell touches.
class AccessLog {
 public:
  explicit AccessLog(const fs::path& path) : out_(path, std::ios::app) {
    if (!out_) throw IoError("cannot open access log " + path.string());
  }
  void read(const fs::path& p) { line('R', p); }
  void write(const fs::path& p) { line('W', p); }

 private:
  void line(char kind, const fs::path& p) {
    out_ << kind << ' ' << fs::weakly_canonical(p).string() << '\n';
    out_.flush();
  }
  std::ofstream out_;
};

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

MeanStd mean_std(const std::vector<double>& xs) {
  MeanStd m;
  if (xs.empty()) return m;
  for (double x : xs) m.mean += x;
  m.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return m;
}

void check_schema(SchemaKind kind, const fs::path& path) {
  auto result = validate_file(kind, path);
  if (!result.ok())
    throw ConsistencyError(path.string() + " violates the " + std::string(to_string(kind)) +
                           " schema: " + result.summary());
}

CellResult run_cell(const ExperimentSpec& spec, const Workspace& ws, const Variant& variant,
                    std::uint64_t seed, const fs::path& out_dir) {
  CellResult cell;
  cell.variant = variant;
  cell.seed = seed;
  const std::string name = cell_name(variant, seed);
  const fs::path dir = out_dir / "cells" / name;
  try {
    fs::remove_all(dir);
    fs::create_directories(dir);
    AccessLog log(dir / "access.log");

    if (auto err = ws.target_errors.find(seed); err != ws.target_errors.end())
      throw TrainingError("target fine-tuning failed: " + err->second);
    auto target_path = ws.targets.find(seed);
    if (target_path == ws.targets.end()) throw ConsistencyError("no target checkpoint for seed");

    log.read(target_path->second);
    ModelState target = load_checkpoint(target_path->second);

    TrainConfig config = spec.train;
    config.seed = seed;
    config.weighting = variant.weighting;
    config.objective.method = variant.method;

    const auto forget = ws.data.dataset.sequences(Split::Forget);
    const auto retain = ws.data.dataset.sequences(Split::Retain);
    UnlearnResult result = unlearn(target, forget, retain, ws.data.vocab, config);
    cell.aborted = result.aborted;
    cell.steps = result.steps;
    cell.token_updates = result.token_updates;
    cell.trajectory = result.report.records;
    if (!cell.trajectory.empty()) cell.pre = cell.trajectory.front();

    const fs::path model_path = dir / "model.ckpt";
    log.write(model_path);
    save_checkpoint(result.model, model_path);

    // Final metrics come from the cell's own checkpoint on disk.
    log.read(model_path);
    ModelState unlearned = load_checkpoint(model_path);
    cell.final = snapshot(unlearned, forget, retain);
    cell.final.step = result.steps;
    cell.final.epoch = -1;
    cell.final.token_updates = result.token_updates;

    const fs::path report_path = out_dir / "runs" / (name + ".jsonl");
    fs::create_directories(report_path.parent_path());
    log.write(report_path);
    {
      std::ofstream out(report_path, std::ios::trunc);
      if (!out) throw IoError("cannot open " + report_path.string());
      write_report_jsonl(result.report, out);
      if (!out) throw IoError("write failed: " + report_path.string());
    }
    log.read(report_path);
    check_schema(SchemaKind::Report, report_path);

    if (result.aborted) {
      cell.error = "aborted: " + result.abort_reason;
    } else {
      cell.ok = true;
    }
  } catch (const std::exception& e) {
    cell.ok = false;
    cell.error = e.what();
  }
  return cell;
}

void write_plots(const ComparisonTable& table, const fs::path& out_dir) {
  const auto rows = table.summary();
  std::vector<svg::BarGroup> em, nll;
  for (const auto& row : rows) {
    em.push_back({row.variant, {row.forget_em_mean, row.retain_em_mean}});
    nll.push_back({row.variant, {row.forget_nll_mean, row.retain_nll_mean}});
  }
  const std::vector<std::string> names{"forget", "retain"};
  svg::write_file(out_dir / "plots" / "exact_match.svg",
                  svg::bar_chart(names, em, {"Exact match after unlearning", "variant", "exact match"}));
  svg::write_file(out_dir / "plots" / "forget_nll.svg",
                  svg::bar_chart(names, nll, {"Answer NLL after unlearning", "variant", "NLL"}));

  std::vector<svg::Series> curves;
  for (const auto& cell : table.cells) {
    if (!cell.ok || cell.seed != table.cells.front().seed) continue;
    svg::Series s{cell.variant.name, {}, {}};
    for (const auto& r : cell.trajectory) {
      s.x.push_back(static_cast<double>(r.step));
      s.y.push_back(r.forget_nll);
    }
    curves.push_back(std::move(s));
  }
  if (!curves.empty()) {
    svg::write_file(out_dir / "plots" / "trajectory.svg",
                    svg::line_chart(curves, {"Forget NLL during unlearning (seed " +
                                                 std::to_string(table.cells.front().seed) + ")",
                                             "step", "forget NLL"}));
  }
}

}  // namespace

Variant make_variant(Method method, WeightingMode weighting) {
  return {weighting_prefix(weighting) + std::string(to_string(method)), method, weighting};
}

Variant parse_variant(std::string_view name) {
  WeightingMode mode = WeightingMode::Uniform;
  std::string_view rest = name;
  if (rest.starts_with("T-")) {
    mode = WeightingMode::Hard;
    rest.remove_prefix(2);
  } else if (rest.starts_with("S-")) {
    mode = WeightingMode::Soft;
    rest.remove_prefix(2);
  }
  Method method = Method::GA;
  try {
    method = parse_method(rest);
  } catch (const ConfigError&) {
    throw ConfigError("unknown variant '" + std::string(name) + "'");
  }
  return make_variant(method, mode);
}

std::vector<Variant> all_variants() {
  std::vector<Variant> out;
  for (Method m : {Method::GA, Method::WGA, Method::NPO, Method::RMU})
    for (WeightingMode w : {WeightingMode::Uniform, WeightingMode::Hard, WeightingMode::Soft})
      out.push_back(make_variant(m, w));
  return out;
}

void ExperimentSpec::validate() const {
  if (variants.empty()) throw ConfigError("experiment needs at least one variant");
  if (seeds.empty()) throw ConfigError("experiment needs at least one seed");
  if (out_dir.empty()) throw ConfigError("experiment needs an output directory");
  if (workers < 0) throw ConfigError("workers must be >= 0");
  for (const auto& v : variants) {
    if (parse_variant(v.name) != v) throw ConfigError("variant '" + v.name + "' is inconsistent");
  }
  for (std::size_t i = 0; i < variants.size(); ++i)
    for (std::size_t j = i + 1; j < variants.size(); ++j)
      if (variants[i].name == variants[j].name) throw ConfigError("duplicate variant " + variants[i].name);
  auto sorted = seeds;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) throw ConfigError("duplicate seed");
  finetune.validate();
  ModelConfig probe = model;
  if (probe.vocab_size <= 0) probe.vocab_size = 2;
  probe.validate();
  train.validate(probe);
}

ExperimentSpec default_experiment_spec() {
  ExperimentSpec spec;
  spec.train.optimizer = OptimizerKind::Adam;
  spec.train.learning_rate = 1e-3;
  spec.train.epochs = 2;
  spec.train.batch_size = 4;
  spec.train.objective.lambda = 0.1;
  spec.variants = all_variants();
  spec.seeds = {1, 2, 3};
  spec.out_dir = "out";
  return spec;
}

std::string cell_name(const Variant& variant, std::uint64_t seed) {
  return variant.name + "__seed" + std::to_string(seed);
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& job) {
  std::size_t threads = workers > 0 ? static_cast<std::size_t>(workers)
                                    : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::jthread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) job(i);
    });
  }
}

bool ComparisonTable::all_ok() const {
  return std::all_of(cells.begin(), cells.end(), [](const CellResult& c) { return c.ok; });
}

const CellResult* ComparisonTable::find(std::string_view variant, std::uint64_t seed) const {
  for (const auto& c : cells)
    if (c.variant.name == variant && c.seed == seed) return &c;
  return nullptr;
}

std::vector<SummaryRow> ComparisonTable::summary() const {
  std::vector<std::string> order;
  for (const auto& c : cells)
    if (std::find(order.begin(), order.end(), c.variant.name) == order.end()) order.push_back(c.variant.name);
  std::vector<SummaryRow> rows;
  for (const auto& name : order) {
    std::vector<double> fem, rem, fnll, rnll, kl;
    for (const auto& c : cells) {
      if (c.variant.name != name || !c.ok) continue;
      fem.push_back(c.final.forget_exact_match);
      rem.push_back(c.final.retain_exact_match);
      fnll.push_back(c.final.forget_nll);
      rnll.push_back(c.final.retain_nll);
      kl.push_back(c.final.kl_drift);
    }
    SummaryRow row;
    row.variant = name;
    row.n = fem.size();
    auto a = mean_std(fem), b = mean_std(rem), c = mean_std(fnll), d = mean_std(rnll), e = mean_std(kl);
    row.forget_em_mean = a.mean, row.forget_em_std = a.std;
    row.retain_em_mean = b.mean, row.retain_em_std = b.std;
    row.forget_nll_mean = c.mean, row.forget_nll_std = c.std;
    row.retain_nll_mean = d.mean, row.retain_nll_std = d.std;
    row.kl_mean = e.mean, row.kl_std = e.std;
    rows.push_back(row);
  }
  return rows;
}

void ComparisonTable::write_csv(std::ostream& out) const {
  out << kTableHeader << '\n';
  for (const auto& c : cells) {
    out << c.variant.name << ',' << to_string(c.variant.method) << ',' << to_string(c.variant.weighting) << ','
        << c.seed << ',' << (c.ok ? "ok" : "failed") << ',';
    const bool has_metrics = !c.trajectory.empty();
    if (has_metrics) {
      out << c.steps << ',' << c.token_updates << ',' << num(c.pre.forget_nll) << ',' << num(c.final.forget_nll)
          << ',' << num(c.final.retain_nll) << ',' << num(c.final.forget_exact_match) << ','
          << num(c.final.retain_exact_match) << ',' << num(c.final.kl_drift) << ',';
    } else {
      out << ",,,,,,,,";
    }
    out << csv_safe(c.error) << '\n';
  }
}

void ComparisonTable::write_summary_csv(std::ostream& out) const {
  out << kSummaryHeader << '\n';
  for (const auto& r : summary()) {
    out << r.variant << ',' << r.n << ',' << num(r.forget_em_mean) << ',' << num(r.forget_em_std) << ','
        << num(r.retain_em_mean) << ',' << num(r.retain_em_std) << ',' << num(r.forget_nll_mean) << ','
        << num(r.forget_nll_std) << ',' << num(r.retain_nll_mean) << ',' << num(r.retain_nll_std) << ','
        << num(r.kl_mean) << ',' << num(r.kl_std) << '\n';
  }
}

Workspace prepare_workspace(const ExperimentSpec& spec) {
  spec.validate();
  Workspace ws;
  ws.root = spec.out_dir;
  fs::create_directories(ws.root);
  ws.data = generate(spec.data);
  export_dataset(ws.data.dataset, ws.root / "dataset.jsonl");
  export_vocabulary(ws.data.vocab, ws.root / "vocab.json");
  check_schema(SchemaKind::Dataset, ws.root / "dataset.jsonl");

  ModelConfig mc = spec.model;
  mc.vocab_size = ws.data.vocab.size();

  std::vector<std::string> errors(spec.seeds.size());
  std::vector<fs::path> paths(spec.seeds.size());
  parallel_for(spec.seeds.size(), spec.workers, [&](std::size_t i) {
    const std::uint64_t seed = spec.seeds[i];
    try {
      FinetuneConfig fc = spec.finetune;
      fc.seed = seed;
      auto result = finetune_target(ModelState::initialized(mc, seed), ws.data.dataset, ws.data.vocab, fc);
      paths[i] = ws.root / ("seed_" + std::to_string(seed)) / "target.ckpt";
      fs::create_directories(paths[i].parent_path());
      save_checkpoint(result.model, paths[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < spec.seeds.size(); ++i) {
    if (errors[i].empty())
      ws.targets[spec.seeds[i]] = paths[i];
    else
      ws.target_errors[spec.seeds[i]] = errors[i];
  }
  return ws;
}

ComparisonTable run_cells(const ExperimentSpec& spec, const Workspace& workspace, const fs::path& out_dir) {
  spec.validate();
  fs::create_directories(out_dir);
  const std::size_t n = spec.variants.size() * spec.seeds.size();
  ComparisonTable table;
  table.cells.resize(n);
  parallel_for(n, spec.workers, [&](std::size_t i) {
    const auto& variant = spec.variants[i / spec.seeds.size()];
    const auto seed = spec.seeds[i % spec.seeds.size()];
    table.cells[i] = run_cell(spec, workspace, variant, seed, out_dir);
  });

  {
    std::ostringstream csv;
    table.write_csv(csv);
    write_text(out_dir / "table.csv", csv.str());
    std::ostringstream summary;
    table.write_summary_csv(summary);
    write_text(out_dir / "summary.csv", summary.str());
  }
  check_schema(SchemaKind::Table, out_dir / "table.csv");
  check_schema(SchemaKind::Summary, out_dir / "summary.csv");
  write_plots(table, out_dir);
  return table;
}

ComparisonTable run_experiment(const ExperimentSpec& spec) {
  Workspace ws = prepare_workspace(spec);
  return run_cells(spec, ws, spec.out_dir);
}

std::vector<std::string> audit_isolation(const fs::path& out_dir) {
  std::vector<std::string> issues;
  const fs::path cells = out_dir / "cells";
  if (!fs::exists(cells)) return issues;
  const fs::path runs = fs::weakly_canonical(out_dir / "runs");

  auto inside = [](const fs::path& p, const fs::path& dir) {
    auto rel = p.lexically_relative(dir);
    return !rel.empty() && *rel.begin() != "..";
  };

  std::vector<fs::directory_entry> entries(fs::directory_iterator(cells), fs::directory_iterator{});
  std::sort(entries.begin(), entries.end());
  for (const auto& entry : entries) {
    if (!entry.is_directory()) continue;
    const std::string name = entry.path().filename().string();
    const fs::path dir = fs::weakly_canonical(entry.path());
    const auto sep = name.rfind("__seed");
    if (sep == std::string::npos) {
      issues.push_back(name + ": unrecognised cell directory");
      continue;
    }
    const std::string seed_dir = "seed_" + name.substr(sep + 6);
    std::ifstream log(entry.path() / "access.log");
    if (!log) {
      issues.push_back(name + ": missing access.log");
      continue;
    }
    bool read_target = false;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(log, line)) {
      ++lineno;
      if (line.size() < 3 || (line[0] != 'R' && line[0] != 'W') || line[1] != ' ') {
        issues.push_back(name + ": malformed access.log line " + std::to_string(lineno));
        continue;
      }
      const fs::path p(line.substr(2));
      const bool own = inside(p, dir);
      if (line[0] == 'R') {
        const bool own_target = p.filename() == "target.ckpt" && p.parent_path().filename() == seed_dir;
        const bool own_report = p == runs / (name + ".jsonl");
        read_target |= own_target;
        if (!own && !own_target && !own_report) issues.push_back(name + " read " + p.string());
      } else {
        const bool own_report = p == runs / (name + ".jsonl");
        if (!own && !own_report) issues.push_back(name + " wrote " + p.string());
      }
    }
    if (!read_target) issues.push_back(name + ": never read its target checkpoint");
  }
  return issues;
}

std::string_view to_string(AblationAxis axis) {
  return axis == AblationAxis::R ? "r" : "alpha";
}

AblationAxis parse_ablation_axis(std::string_view text) {
  if (text == "r") return AblationAxis::R;
  if (text == "alpha") return AblationAxis::OneMinusAlpha;
  throw ConfigError("unknown ablation axis '" + std::string(text) + "' (expected r or alpha)");
}

std::vector<double> default_ablation_values(AblationAxis axis) {
  if (axis == AblationAxis::R) return {0.1, 0.2, 0.4, 0.6};
  return {0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
}

std::vector<AblationPoint> ablation_sweep(const ExperimentSpec& spec, AblationAxis axis,
                                          std::vector<double> values) {
  if (values.empty()) values = default_ablation_values(axis);
  for (double v : values) {
    const bool valid = axis == AblationAxis::R ? (v > 0.0 && v <= 1.0) : (v >= 0.0 && v <= 1.0);
    if (!std::isfinite(v) || !valid)
      throw ConfigError("ablation value " + short_num(v) + " is outside the range of axis " +
                        std::string(to_string(axis)));
  }
  auto sorted = values;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw ConfigError("duplicate ablation value");

  Workspace ws = prepare_workspace(spec);
  const std::string axis_name(to_string(axis));
  const fs::path base = spec.out_dir / ("ablation_" + axis_name);

  std::vector<AblationPoint> points;
  for (double v : values) {
    ExperimentSpec s = spec;
    if (axis == AblationAxis::R)
      s.train.r = v;
    else
      s.train.alpha = 1.0 - v;
    AblationPoint point;
    point.value = v;
    point.dir = base / short_num(v);
    point.table = run_cells(s, ws, point.dir);
    points.push_back(std::move(point));
  }

  const std::string x_label = axis == AblationAxis::R ? "selection ratio r" : "entropy share 1 - alpha";
  std::ostringstream csv;
  csv << "axis,value,variant,n,forget_exact_match_mean,retain_exact_match_mean,forget_nll_mean,"
         "retain_nll_mean,kl_drift_mean\n";
  std::vector<svg::Series> series;
  for (const auto& variant : spec.variants) {
    svg::Series forget{variant.name + " forget", {}, {}};
    svg::Series retain{variant.name + " retain", {}, {}};
    for (const auto& p : points) {
      for (const auto& row : p.table.summary()) {
        if (row.variant != variant.name) continue;
        csv << axis_name << ',' << num(p.value) << ',' << row.variant << ',' << row.n << ','
            << num(row.forget_em_mean) << ',' << num(row.retain_em_mean) << ',' << num(row.forget_nll_mean)
            << ',' << num(row.retain_nll_mean) << ',' << num(row.kl_mean) << '\n';
        forget.x.push_back(p.value);
        forget.y.push_back(row.forget_em_mean);
        retain.x.push_back(p.value);
        retain.y.push_back(row.retain_em_mean);
      }
    }
    series.push_back(std::move(forget));
    series.push_back(std::move(retain));
  }
  write_text(spec.out_dir / "plots" / ("ablation_" + axis_name + ".csv"), csv.str());
  svg::write_file(spec.out_dir / "plots" / ("ablation_" + axis_name + ".svg"),
                  svg::line_chart(series, {"Exact match vs " + x_label, x_label, "exact match"}));
  return points;
}

}  // namespace tokenunlearn
