// tokenunlearn: data generation, fine-tuning, unlearning, evaluation, sweeps and
// the gradient-noise simulator behind one binary.
//
// Every option lives on the top-level app, so flags may appear before or after
// the subcommand. A --config file is INI: keys outside a section match the
// bare flag name (seed = 3), keys inside [train] match --train.<key>, and so
// on. Options given on the command line win over the file.

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tokenunlearn/checkpoint.hpp"
#include "tokenunlearn/datagen.hpp"
#include "tokenunlearn/errors.hpp"
#include "tokenunlearn/experiment.hpp"
#include "tokenunlearn/metrics.hpp"
#include "tokenunlearn/schema.hpp"
#include "tokenunlearn/snr.hpp"
#include "tokenunlearn/svg.hpp"
#include "tokenunlearn/trainer.hpp"

namespace fs = std::filesystem;
using namespace tokenunlearn;

namespace {

// INI reader that turns "[train] lr = 0.1" into the flat option "train.lr"
// instead of routing the section to a subcommand.
class FlatIni : public CLI::ConfigINI {
 public:
  std::vector<CLI::ConfigItem> from_config(std::istream& input) const override {
    std::vector<CLI::ConfigItem> out;
    for (auto& item : CLI::ConfigINI::from_config(input)) {
      if (item.name == "++" || item.name == "--") continue;
      if (!item.parents.empty() && !(item.parents.size() == 1 && item.parents[0] == "default")) {
        item.name = item.fullname();
      }
      item.parents.clear();
      out.push_back(std::move(item));
    }
    return out;
  }
};

struct Options {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  std::optional<std::string> weighting;
  std::optional<double> r, alpha, tau, lambda;
  std::string out = "out";

  std::string data_dir;
  std::string target;
  std::string checkpoint;

  GenerateOptions data;
  ModelConfig model;
  FinetuneConfig finetune;
  TrainConfig train;
  std::string optimizer = "adam";
  std::string region = "answer";

  std::vector<std::string> variants;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  int workers = 0;
  std::string ablate;
  std::vector<double> ablate_values;

  snr::GridOptions grid;
  int snr_critical = 5;
  std::vector<int> scaling_lengths{25, 50, 100, 200, 400};
};

void add_options(CLI::App& app, Options& o) {
  const ExperimentSpec defaults = default_experiment_spec();
  o.train = defaults.train;
  o.train.weighting = WeightingMode::Hard;

  app.add_option("--seed", o.seed, "Seed for single runs; restricts a sweep to this seed");
  app.add_option("--method", o.method, "GA, WGA, NPO or RMU");
  app.add_option("--weighting", o.weighting, "uniform, hard or soft");
  app.add_option("--r", o.r, "Selection ratio for hard weighting");
  app.add_option("--alpha", o.alpha, "Attribution share of the composite score");
  app.add_option("--tau", o.tau, "Soft weighting temperature");
  app.add_option("--lambda", o.lambda, "KL retention weight");
  app.add_option("--out", o.out, "Output directory")->capture_default_str();

  app.add_option("--data-dir", o.data_dir, "Directory holding dataset.jsonl and vocab.json");
  app.add_option("--target", o.target, "Fine-tuned target checkpoint");
  app.add_option("--checkpoint", o.checkpoint, "Checkpoint to evaluate");

  app.add_option("--data.entities", o.data.num_entities)->capture_default_str();
  app.add_option("--data.qa_per_entity", o.data.qa_per_entity)->capture_default_str();
  app.add_option("--data.forget_fraction", o.data.forget_fraction)->capture_default_str();
  app.add_option("--data.seed", o.data.seed)->capture_default_str();

  app.add_option("--model.d_model", o.model.d_model)->capture_default_str();
  app.add_option("--model.d_hidden", o.model.d_hidden)->capture_default_str();
  app.add_option("--model.n_layers", o.model.n_layers)->capture_default_str();
  app.add_option("--model.context_length", o.model.context_length)->capture_default_str();

  app.add_option("--finetune.max_epochs", o.finetune.max_epochs)->capture_default_str();
  app.add_option("--finetune.batch_size", o.finetune.batch_size)->capture_default_str();
  app.add_option("--finetune.lr", o.finetune.learning_rate)->capture_default_str();
  app.add_option("--finetune.mask_prob", o.finetune.mask_prob)->capture_default_str();
  app.add_option("--finetune.target_exact_match", o.finetune.target_exact_match)->capture_default_str();
  app.add_option("--finetune.stop_nll", o.finetune.stop_nll)->capture_default_str();

  app.add_option("--train.epochs", o.train.epochs)->capture_default_str();
  app.add_option("--train.batch_size", o.train.batch_size)->capture_default_str();
  app.add_option("--train.lr", o.train.learning_rate)->capture_default_str();
  app.add_option("--train.optimizer", o.optimizer, "sgd or adam")->capture_default_str();
  app.add_option("--train.region", o.region, "answer or sequence")->capture_default_str();
  app.add_option("--train.gamma", o.train.objective.gamma)->capture_default_str();
  app.add_option("--train.beta", o.train.objective.beta)->capture_default_str();
  app.add_option("--train.rmu_scale", o.train.objective.rmu_scale)->capture_default_str();
  app.add_option("--train.rmu_layer", o.train.objective.rmu_layer)->capture_default_str();
  app.add_option("--train.eval_every", o.train.eval_every)->capture_default_str();
  app.add_flag("--train.sequence_level", o.train.sequence_level,
               "Run the unweighted sequence-level objective");
  app.add_flag("--train.scores_from_reference", o.train.attribution_from_reference,
               "Score tokens under the frozen reference");

  app.add_option("--sweep.variants", o.variants, "Variant names, e.g. GA T-GA S-NPO (default: all 12)");
  app.add_option("--sweep.seeds", o.seeds)->capture_default_str();
  app.add_option("--sweep.workers", o.workers, "0: one per hardware thread")->capture_default_str();
  app.add_option("--sweep.ablate", o.ablate, "r or alpha");
  app.add_option("--sweep.ablate_values", o.ablate_values, "Axis values (default: the standard grid)");

  app.add_option("--snr.seq_lengths", o.grid.seq_lengths)->capture_default_str();
  app.add_option("--snr.rhos", o.grid.rhos)->capture_default_str();
  app.add_option("--snr.ratios", o.grid.ratios)->capture_default_str();
  app.add_option("--snr.trials", o.grid.trials)->capture_default_str();
  app.add_option("--snr.seed", o.grid.seed)->capture_default_str();
  app.add_option("--snr.scale_jitter", o.grid.scale_jitter)->capture_default_str();
  app.add_option("--snr.scaling_lengths", o.scaling_lengths)->capture_default_str();
  app.add_option("--snr.num_critical", o.snr_critical)->capture_default_str();
}

TrainConfig train_config(const Options& o) {
  TrainConfig t = o.train;
  t.optimizer = parse_optimizer(o.optimizer);
  t.loss_region = parse_loss_region(o.region);
  if (o.seed) t.seed = *o.seed;
  if (o.method) t.objective.method = parse_method(*o.method);
  if (o.weighting) t.weighting = parse_weighting_mode(*o.weighting);
  if (o.r) t.r = *o.r;
  if (o.alpha) t.alpha = *o.alpha;
  if (o.tau) t.tau = *o.tau;
  if (o.lambda) t.objective.lambda = *o.lambda;
  return t;
}

struct LoadedData {
  Dataset dataset;
  Vocabulary vocab;
};

LoadedData load_data(const Options& o) {
  if (o.data_dir.empty()) {
    auto g = generate(o.data);
    return {std::move(g.dataset), std::move(g.vocab)};
  }
  const fs::path dir(o.data_dir);
  return {import_dataset(dir / "dataset.jsonl"), import_vocabulary(dir / "vocab.json")};
}

void write_validated(SchemaKind kind, const fs::path& path, const std::string& text) {
  svg::write_file(path, text);
  auto result = validate_file(kind, path);
  if (!result.ok()) throw ConsistencyError(path.string() + ": " + result.summary());
}

void print_record(const char* label, const EvalRecord& e) {
  std::printf("%-8s forget_nll %.4f  retain_nll %.4f  forget_em %.3f  retain_em %.3f  kl %.4g\n", label,
              e.forget_nll, e.retain_nll, e.forget_exact_match, e.retain_exact_match, e.kl_drift);
}

int cmd_gen_data(const Options& o) {
  auto g = generate(o.data);
  const fs::path out(o.out);
  fs::create_directories(out);
  export_dataset(g.dataset, out / "dataset.jsonl");
  export_vocabulary(g.vocab, out / "vocab.json");
  auto check = validate_file(SchemaKind::Dataset, out / "dataset.jsonl");
  if (!check.ok()) throw ConsistencyError(check.summary());
  std::printf("%zu samples (%zu forget), vocabulary %d -> %s\n", g.dataset.samples.size(),
              g.dataset.split(Split::Forget).size(), g.vocab.size(), out.string().c_str());
  return 0;
}

int cmd_finetune(const Options& o) {
  auto data = load_data(o);
  ModelConfig mc = o.model;
  mc.vocab_size = data.vocab.size();
  FinetuneConfig fc = o.finetune;
  fc.seed = o.seed.value_or(fc.seed);
  auto result = finetune_target(ModelState::initialized(mc, fc.seed), data.dataset, data.vocab, fc);
  const fs::path path = fs::path(o.out) / "target.ckpt";
  fs::create_directories(path.parent_path());
  save_checkpoint(result.model, path);
  const auto& last = result.log.back();
  std::printf("fine-tuned %d epochs: forget_em %.3f retain_em %.3f answer_nll %.4f -> %s\n", result.epochs_run,
              last.forget_exact_match, last.retain_exact_match, last.answer_nll, path.string().c_str());
  return 0;
}

int cmd_unlearn(const Options& o) {
  if (o.target.empty()) throw ConfigError("unlearn needs --target");
  auto data = load_data(o);
  TrainConfig tc = train_config(o);
  ModelState target = load_checkpoint(o.target);
  const auto forget = data.dataset.sequences(Split::Forget);
  const auto retain = data.dataset.sequences(Split::Retain);
  auto result = unlearn(target, forget, retain, data.vocab, tc);

  const fs::path out(o.out);
  const Variant variant = make_variant(tc.objective.method, tc.weighting);
  const std::string name = cell_name(variant, tc.seed);
  fs::create_directories(out);
  save_checkpoint(result.model, out / "model.ckpt");
  std::ostringstream jsonl;
  write_report_jsonl(result.report, jsonl);
  write_validated(SchemaKind::Report, out / "runs" / (name + ".jsonl"), jsonl.str());

  ComparisonTable table;
  CellResult cell;
  cell.variant = variant;
  cell.seed = tc.seed;
  cell.ok = !result.aborted;
  cell.aborted = result.aborted;
  cell.error = result.aborted ? "aborted: " + result.abort_reason : "";
  cell.steps = result.steps;
  cell.token_updates = result.token_updates;
  cell.trajectory = result.report.records;
  cell.pre = cell.trajectory.front();
  cell.final = cell.trajectory.back();
  table.cells.push_back(cell);
  std::ostringstream csv;
  table.write_csv(csv);
  write_validated(SchemaKind::Table, out / "table.csv", csv.str());

  print_record("before", cell.pre);
  print_record("after", cell.final);
  if (result.aborted) std::fprintf(stderr, "run aborted: %s\n", result.abort_reason.c_str());
  return result.aborted ? 1 : 0;
}

int cmd_eval(const Options& o) {
  if (o.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  auto data = load_data(o);
  ModelState model = load_checkpoint(o.checkpoint);
  const auto forget = data.dataset.sequences(Split::Forget);
  const auto retain = data.dataset.sequences(Split::Retain);
  auto f = evaluate(model, forget);
  auto r = evaluate(model, retain);
  std::printf("split,samples,answer_tokens,nll,exact_match\n");
  std::printf("forget,%zu,%zu,%.17g,%.17g\n", f.samples, f.answer_tokens, f.nll, f.exact_match);
  std::printf("retain,%zu,%zu,%.17g,%.17g\n", r.samples, r.answer_tokens, r.nll, r.exact_match);
  if (model.has_reference()) std::printf("kl_drift_retain,%.17g\n", kl_drift(model, retain));
  return 0;
}

int cmd_sweep(const Options& o) {
  ExperimentSpec spec = default_experiment_spec();
  spec.data = o.data;
  spec.model = o.model;
  spec.finetune = o.finetune;
  spec.train = train_config(o);
  spec.out_dir = o.out;
  spec.workers = o.workers;
  spec.seeds = o.seed ? std::vector<std::uint64_t>{*o.seed} : o.seeds;
  if (!o.variants.empty()) {
    spec.variants.clear();
    for (const auto& v : o.variants) spec.variants.push_back(parse_variant(v));
  } else if (o.method || o.weighting) {
    spec.variants.clear();
    for (const auto& v : all_variants()) {
      if (o.method && v.method != parse_method(*o.method)) continue;
      if (o.weighting && v.weighting != parse_weighting_mode(*o.weighting)) continue;
      spec.variants.push_back(v);
    }
  }

  std::vector<const ComparisonTable*> tables;
  std::vector<AblationPoint> points;
  ComparisonTable single;
  if (!o.ablate.empty()) {
    points = ablation_sweep(spec, parse_ablation_axis(o.ablate), o.ablate_values);
    for (const auto& p : points) tables.push_back(&p.table);
  } else {
    single = run_experiment(spec);
    tables.push_back(&single);
  }

  std::size_t failed = 0, total = 0;
  for (const auto* t : tables) {
    for (const auto& c : t->cells) {
      ++total;
      if (!c.ok) {
        ++failed;
        std::fprintf(stderr, "cell %s failed: %s\n", cell_name(c.variant, c.seed).c_str(), c.error.c_str());
      }
    }
  }
  if (points.empty()) {
    for (const auto& row : single.summary())
      std::printf("%-6s forget_em %.3f±%.3f  retain_em %.3f±%.3f  forget_nll %.3f  kl %.4f\n", row.variant.c_str(),
                  row.forget_em_mean, row.forget_em_std, row.retain_em_mean, row.retain_em_std, row.forget_nll_mean,
                  row.kl_mean);
  }
  for (const auto& issue : audit_isolation(spec.out_dir)) std::fprintf(stderr, "isolation: %s\n", issue.c_str());
  std::printf("%zu/%zu cells completed -> %s\n", total - failed, total, spec.out_dir.string().c_str());
  return failed == 0 ? 0 : 1;
}

int cmd_snr_sim(const Options& o) {
  const fs::path out(o.out);
  snr::GridOptions grid = o.grid;
  if (o.seed) grid.seed = *o.seed;
  auto rows = snr::run_grid(grid);
  std::ostringstream csv;
  snr::write_grid_csv(rows, csv);
  write_validated(SchemaKind::SnrGrid, out / "snr_grid.csv", csv.str());
  std::size_t held = 0;
  for (const auto& row : rows) held += row.bound.holds;
  std::printf("noise bound holds in %zu/%zu grid configurations\n", held, rows.size());

  auto fit = snr::corollary_scaling(o.scaling_lengths, o.snr_critical, 0.0, grid.trials, grid.seed);
  svg::Series measured{"measured", {}, {}}, predicted{"closed form", {}, {}};
  std::ostringstream scsv;
  scsv << "T,num_critical,x,ratio,predicted\n";
  for (const auto& p : fit.points) {
    measured.x.push_back(p.x), measured.y.push_back(p.ratio);
    predicted.x.push_back(p.x), predicted.y.push_back(p.predicted);
    scsv << p.seq_length << ',' << p.num_critical << ',' << p.x << ',' << p.ratio << ',' << p.predicted << '\n';
  }
  svg::write_file(out / "plots" / "snr_scaling.csv", scsv.str());
  const std::vector<svg::Series> series{measured, predicted};
  svg::ChartOptions chart{"SNR gain of token-level selection", "T / |K|", "SNR_token / SNR_seq"};
  chart.log_x = chart.log_y = true;
  svg::write_file(out / "plots" / "snr_scaling.svg", svg::line_chart(series, chart));
  std::printf("log-log slope %.3f (intercept %.3f)\n", fit.slope, fit.intercept);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Token-level unlearning lab"};
  app.config_formatter(std::make_shared<FlatIni>());
  app.set_config("--config", "", "INI config file; command-line flags take precedence");
  app.require_subcommand(1);
  app.fallthrough();

  Options o;
  add_options(app, o);

  struct Command {
    const char* name;
    const char* help;
    int (*run)(const Options&);
  };
  const Command commands[] = {
      {"gen-data", "Generate the fictitious-facts dataset", cmd_gen_data},
      {"finetune", "Fine-tune a target model that memorises the dataset", cmd_finetune},
      {"unlearn", "Unlearn the forget split from a target checkpoint", cmd_unlearn},
      {"eval", "Evaluate a checkpoint on both splits", cmd_eval},
      {"sweep", "Variant x seed comparison, or an r / alpha ablation", cmd_sweep},
      {"snr-sim", "Monte Carlo gradient-noise simulation", cmd_snr_sim},
  };
  for (const auto& c : commands) app.add_subcommand(c.name, c.help)->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    for (const auto& c : commands)
      if (app.got_subcommand(c.name)) return c.run(o);
  } catch (const tokenunlearn::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 2;
}
