#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tokenunlearn/checkpoint.hpp"
#include "tokenunlearn/errors.hpp"
#include "tokenunlearn/experiment.hpp"
#include "tokenunlearn/schema.hpp"
#include "tokenunlearn/svg.hpp"

using namespace tokenunlearn;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("tokenunlearn_eval_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream out;
  out << in.rdbuf();
  return out.str();
}

ExperimentSpec small_spec(const fs::path& out) {
  ExperimentSpec spec = default_experiment_spec();
  spec.data.num_entities = 10;
  spec.data.qa_per_entity = 3;
  spec.data.forget_fraction = 0.2;
  spec.model.d_model = 24;
  spec.model.d_hidden = 48;
  spec.train.epochs = 1;
  spec.variants = {parse_variant("GA"), parse_variant("T-GA"), parse_variant("S-NPO")};
  spec.seeds = {1, 2};
  spec.workers = 2;
  spec.out_dir = out;
  return spec;
}

// One small experiment shared by the cases below.
struct Shared {
  ExperimentSpec spec;
  ComparisonTable table;
};

const Shared& shared() {
  static const Shared s = [] {
    Shared out;
    out.spec = small_spec(scratch("shared"));
    out.table = run_experiment(out.spec);
    return out;
  }();
  return s;
}

}  // namespace

TEST_CASE("variant names") {
  CHECK(parse_variant("GA") == Variant{"GA", Method::GA, WeightingMode::Uniform});
  CHECK(parse_variant("T-WGA") == Variant{"T-WGA", Method::WGA, WeightingMode::Hard});
  CHECK(parse_variant("S-RMU") == Variant{"S-RMU", Method::RMU, WeightingMode::Soft});
  CHECK_THROWS_AS(parse_variant("X-GA"), ConfigError);
  CHECK_THROWS_AS(parse_variant("T-"), ConfigError);
  const auto all = all_variants();
  REQUIRE(all.size() == 12);
  for (const auto& v : all) CHECK(parse_variant(v.name) == v);
  CHECK(make_variant(Method::NPO, WeightingMode::Soft).name == "S-NPO");
  CHECK(cell_name(parse_variant("T-GA"), 3) == "T-GA__seed3");
}

TEST_CASE("pinned experiment configuration") {
  const auto spec = default_experiment_spec();
  CHECK(spec.train.optimizer == OptimizerKind::Adam);
  CHECK(spec.train.learning_rate == 1e-3);
  CHECK(spec.train.epochs == 2);
  CHECK(spec.train.batch_size == 4);
  CHECK(spec.train.objective.lambda == 0.1);
  CHECK(spec.seeds == std::vector<std::uint64_t>{1, 2, 3});
  CHECK(spec.variants.size() == 12);
  CHECK_NOTHROW(spec.validate());
  auto bad = spec;
  bad.seeds.clear();
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = spec;
  bad.variants.push_back(bad.variants.front());
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("experiment writes one row per cell and valid artifacts") {
  const auto& s = shared();
  const fs::path out = s.spec.out_dir;
  REQUIRE(s.table.cells.size() == 6);
  CHECK(s.table.all_ok());
  CHECK(s.table.cells[0].variant.name == "GA");
  CHECK(s.table.cells[1].seed == 2);
  REQUIRE(s.table.find("T-GA", 2) != nullptr);
  CHECK(s.table.find("T-GA", 9) == nullptr);
  for (const auto& c : s.table.cells) {
    INFO(cell_name(c.variant, c.seed) << " " << c.error);
    CHECK(c.ok);
    CHECK(c.final.forget_nll > c.pre.forget_nll);
    CHECK(fs::exists(out / "runs" / (cell_name(c.variant, c.seed) + ".jsonl")));
    CHECK(validate_file(SchemaKind::Report, out / "runs" / (cell_name(c.variant, c.seed) + ".jsonl")).ok());
    CHECK(fs::exists(out / "cells" / cell_name(c.variant, c.seed) / "model.ckpt"));
  }
  CHECK(validate_file(SchemaKind::Table, out / "table.csv").ok());
  CHECK(validate_file(SchemaKind::Summary, out / "summary.csv").ok());
  CHECK(validate_file(SchemaKind::Dataset, out / "dataset.jsonl").ok());
  for (const char* plot : {"exact_match.svg", "forget_nll.svg", "trajectory.svg"}) {
    const std::string text = slurp(out / "plots" / plot);
    CHECK(text.rfind("<svg", 0) == 0);
    CHECK(text.find("</svg>") != std::string::npos);
  }
  const auto summary = s.table.summary();
  REQUIRE(summary.size() == 3);
  CHECK(summary[0].variant == "GA");
  CHECK(summary[0].n == 2);
  const double a = s.table.cells[0].final.forget_exact_match, b = s.table.cells[1].final.forget_exact_match;
  CHECK(summary[0].forget_em_mean == doctest::Approx((a + b) / 2));
}

TEST_CASE("a uniform cell equals a direct unlearning run") {
  const auto& s = shared();
  const fs::path out = s.spec.out_dir;
  const auto data = generate(s.spec.data);
  const ModelState target = load_checkpoint(out / "seed_1" / "target.ckpt");
  auto config = s.spec.train;
  config.seed = 1;
  config.weighting = WeightingMode::Uniform;
  config.objective.method = Method::GA;
  const auto forget = data.dataset.sequences(Split::Forget);
  const auto retain = data.dataset.sequences(Split::Retain);
  const auto direct = unlearn(target, forget, retain, data.vocab, config);
  const auto* cell = s.table.find("GA", 1);
  REQUIRE(cell != nullptr);
  const auto& last = direct.report.records.back();
  CHECK(cell->final.forget_nll == last.forget_nll);
  CHECK(cell->final.retain_nll == last.retain_nll);
  CHECK(cell->final.kl_drift == last.kl_drift);
  CHECK(cell->token_updates == direct.token_updates);
  const ModelState saved = load_checkpoint(out / "cells" / "GA__seed1" / "model.ckpt");
  CHECK(std::equal(saved.params().begin(), saved.params().end(), direct.model.params().begin()));
}

TEST_CASE("reruns reproduce the table byte for byte") {
  const auto& s = shared();
  auto spec = s.spec;
  spec.out_dir = scratch("rerun");
  spec.workers = 1;
  run_experiment(spec);
  CHECK(slurp(spec.out_dir / "table.csv") == slurp(s.spec.out_dir / "table.csv"));
  CHECK(slurp(spec.out_dir / "summary.csv") == slurp(s.spec.out_dir / "summary.csv"));
  fs::remove_all(spec.out_dir);
}

TEST_CASE("cell isolation audit") {
  const auto& s = shared();
  CHECK(audit_isolation(s.spec.out_dir).empty());

  // Plant a cross-cell read and a write outside the cell, then restore the logs.
  const fs::path out = s.spec.out_dir;
  const fs::path log_a = out / "cells" / "T-GA__seed1" / "access.log";
  const fs::path log_b = out / "cells" / "GA__seed2" / "access.log";
  const std::string saved_a = slurp(log_a), saved_b = slurp(log_b);
  std::ofstream(log_a, std::ios::app) << "R " << fs::weakly_canonical(out / "cells" / "GA__seed1" / "model.ckpt").string() << '\n';
  std::ofstream(log_b, std::ios::app) << "W " << fs::weakly_canonical(out / "table.csv").string() << '\n';
  const auto issues = audit_isolation(out);
  std::ofstream(log_a, std::ios::trunc) << saved_a;
  std::ofstream(log_b, std::ios::trunc) << saved_b;
  CHECK(issues.size() == 2);
  CHECK(audit_isolation(out).empty());
}

TEST_CASE("ablation sweeps") {
  auto spec = small_spec(scratch("ablation"));
  spec.variants = {parse_variant("T-GA")};
  spec.seeds = {1};
  const auto points = ablation_sweep(spec, AblationAxis::R, {0.2, 0.5});
  REQUIRE(points.size() == 2);
  CHECK(points[0].value == 0.2);
  CHECK(points[0].table.cells.size() == 1);
  CHECK(points[0].table.cells[0].token_updates < points[1].table.cells[0].token_updates);
  CHECK(fs::exists(spec.out_dir / "ablation_r" / "0.2" / "table.csv"));
  CHECK(fs::exists(spec.out_dir / "plots" / "ablation_r.svg"));
  const std::string csv = slurp(spec.out_dir / "plots" / "ablation_r.csv");
  CHECK(csv.rfind("axis,value,variant,n,", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 3);

  CHECK_THROWS_AS(ablation_sweep(spec, AblationAxis::R, {0.0}), ConfigError);
  CHECK_THROWS_AS(ablation_sweep(spec, AblationAxis::R, {1.5}), ConfigError);
  CHECK_THROWS_AS(ablation_sweep(spec, AblationAxis::OneMinusAlpha, {-0.1}), ConfigError);
  CHECK_THROWS_AS(ablation_sweep(spec, AblationAxis::R, {0.2, 0.2}), ConfigError);
  CHECK(default_ablation_values(AblationAxis::R) == std::vector<double>{0.1, 0.2, 0.4, 0.6});
  CHECK(default_ablation_values(AblationAxis::OneMinusAlpha).size() == 6);
  CHECK(parse_ablation_axis("alpha") == AblationAxis::OneMinusAlpha);
  CHECK_THROWS_AS(parse_ablation_axis("tau"), ConfigError);
  fs::remove_all(spec.out_dir);
}

TEST_CASE("a failing target is recorded without stopping other cells") {
  auto spec = small_spec(scratch("failing"));
  spec.variants = {parse_variant("GA")};
  spec.seeds = {1, 2};
  auto ws = prepare_workspace(spec);
  ws.target_errors[2] = "forced";
  const auto table = run_cells(spec, ws, spec.out_dir);
  REQUIRE(table.cells.size() == 2);
  CHECK(table.cells[0].ok);
  CHECK_FALSE(table.cells[1].ok);
  CHECK(table.cells[1].error.find("forced") != std::string::npos);
  CHECK_FALSE(table.all_ok());
  CHECK(validate_file(SchemaKind::Table, spec.out_dir / "table.csv").ok());
  fs::remove_all(spec.out_dir);
}

TEST_CASE("parallel_for visits every index once") {
  std::vector<int> hits(100, 0);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i] += 1; });
  CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
  parallel_for(0, 4, [&](std::size_t) { FAIL("no jobs expected"); });
}

TEST_CASE("svg and csv helpers") {
  const std::vector<svg::Series> series{{"a<b", {1, 2, 3}, {1, 4, 9}}, {"nan", {1, 2}, {NAN, 2}}};
  const std::string chart = svg::line_chart(series, {"t & t", "x", "y"});
  CHECK(chart.rfind("<svg", 0) == 0);
  CHECK(chart.find("a&lt;b") != std::string::npos);
  CHECK(chart.find("t &amp; t") != std::string::npos);
  const std::vector<std::string> names{"forget", "retain"};
  const std::vector<svg::BarGroup> groups{{"GA", {0.1, 0.9}}, {"T-GA", {0.0, 1.0}}};
  CHECK(svg::bar_chart(names, groups, {}).find("</svg>") != std::string::npos);
  CHECK(csv_safe("a,b\"c\nd").find_first_of(",\"\n") == std::string::npos);
  CHECK(csv_safe("plain") == "plain");
}
