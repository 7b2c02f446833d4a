#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "tokenunlearn/attribution.hpp"
#include "tokenunlearn/datagen.hpp"
#include "tokenunlearn/model.hpp"
#include "tokenunlearn/objectives.hpp"
#include "tokenunlearn/trainer.hpp"

namespace tokenunlearn {

/// A (method, weighting) pair. Names follow the T-/S- prefix convention:
/// "GA" is uniform, "T-GA" hard selection, "S-GA" soft weighting.
struct Variant {
  std::string name;
  Method method = Method::GA;
  WeightingMode weighting = WeightingMode::Uniform;

  friend bool operator==(const Variant&, const Variant&) = default;
};

/// Throws ConfigError for unknown names.
Variant parse_variant(std::string_view name);
Variant make_variant(Method method, WeightingMode weighting);
/// All twelve variants, baselines first within each method.
std::vector<Variant> all_variants();

struct ExperimentSpec {
  GenerateOptions data;
  ModelConfig model;  // vocab_size is taken from the generated vocabulary
  FinetuneConfig finetune;
  TrainConfig train;  // method and weighting are overridden per variant
  std::vector<Variant> variants;
  std::vector<std::uint64_t> seeds;
  std::filesystem::path out_dir;
  int workers = 0;  // 0: hardware concurrency

  void validate() const;
};

/// Pinned desk-scale configuration used by `sweep` and the acceptance suite.
ExperimentSpec default_experiment_spec();

struct CellResult {
  Variant variant;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  bool aborted = false;
  std::size_t steps = 0;
  std::size_t token_updates = 0;
  EvalRecord pre;    // before unlearning
  EvalRecord final;  // after unlearning
  std::vector<EvalRecord> trajectory;
};

struct SummaryRow {
  std::string variant;
  std::size_t n = 0;  // completed cells
  double forget_em_mean = 0, forget_em_std = 0;
  double retain_em_mean = 0, retain_em_std = 0;
  double forget_nll_mean = 0, forget_nll_std = 0;
  double retain_nll_mean = 0, retain_nll_std = 0;
  double kl_mean = 0, kl_std = 0;
};

struct ComparisonTable {
  std::vector<CellResult> cells;  // variant-major, then seed

  bool all_ok() const;
  const CellResult* find(std::string_view variant, std::uint64_t seed) const;
  /// Per variant, in first-appearance order. Standard deviations are sample (n - 1).
  std::vector<SummaryRow> summary() const;

  /// Columns as kTableHeader in schema.hpp.
  void write_csv(std::ostream& out) const;
  /// Columns as kSummaryHeader in schema.hpp.
  void write_summary_csv(std::ostream& out) const;
};

/// Generated data plus one fine-tuned target checkpoint per seed.
struct Workspace {
  std::filesystem::path root;
  GeneratedData data;
  std::map<std::uint64_t, std::filesystem::path> targets;
  std::map<std::uint64_t, std::string> target_errors;
};

/// Generates the dataset (written to root/dataset.jsonl and root/vocab.json)
/// and fine-tunes root/seed_<s>/target.ckpt for every seed.
Workspace prepare_workspace(const ExperimentSpec& spec);

/// Runs every variant x seed cell against the workspace targets. Each cell
/// owns out_dir/cells/<variant>__seed<s>/ and logs every file it touches to
/// access.log there. Writes out_dir/runs/*.jsonl, out_dir/table.csv,
/// out_dir/summary.csv and out_dir/plots/*.svg. A failing cell is recorded
/// in the table; it does not stop the others.
ComparisonTable run_cells(const ExperimentSpec& spec, const Workspace& workspace,
                          const std::filesystem::path& out_dir);

/// prepare_workspace + run_cells into spec.out_dir.
ComparisonTable run_experiment(const ExperimentSpec& spec);

/// Cell directory name, e.g. "T-GA__seed3".
std::string cell_name(const Variant& variant, std::uint64_t seed);

/// Checks every access.log under out_dir/cells: a cell may read only its
/// seed's target checkpoint and its own directory, and write only inside its
/// own directory and its own run report. Returns one message per violation.
std::vector<std::string> audit_isolation(const std::filesystem::path& out_dir);

enum class AblationAxis { R, OneMinusAlpha };

std::string_view to_string(AblationAxis axis);
AblationAxis parse_ablation_axis(std::string_view text);
/// {0.1, 0.2, 0.4, 0.6} for r, {0.1, ..., 0.6} for 1 - alpha.
std::vector<double> default_ablation_values(AblationAxis axis);

struct AblationPoint {
  double value = 0.0;
  std::filesystem::path dir;
  ComparisonTable table;
};

/// One ComparisonTable per axis value, sharing the per-seed targets.
/// Results go to spec.out_dir/ablation_<axis>/<value>/, the curve to
/// spec.out_dir/plots/ablation_<axis>.svg and .csv. Throws ConfigError for
/// values outside the axis range.
std::vector<AblationPoint> ablation_sweep(const ExperimentSpec& spec, AblationAxis axis,
                                          std::vector<double> values = {});

/// Bounded worker pool: runs job(i) for i in [0, n) on at most `workers`
/// threads (0: hardware concurrency). Jobs must not throw.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& job);

}  // namespace tokenunlearn
