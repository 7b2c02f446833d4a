#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tokenunlearn/attribution.hpp"
#include "tokenunlearn/datagen.hpp"
#include "tokenunlearn/model.hpp"
#include "tokenunlearn/objectives.hpp"

namespace tokenunlearn {

enum class OptimizerKind { Sgd, Adam };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer(std::string_view text);

/// Plain SGD or Adam (beta1 0.9, beta2 0.999, eps 1e-8) with a constant step size.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, std::size_t num_params);

  void step(ModelState& model, std::span<const double> grad);

  OptimizerKind kind() const noexcept { return kind_; }

 private:
  OptimizerKind kind_;
  double lr_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::uint64_t t_ = 0;
};

struct FinetuneConfig {
  int max_epochs = 600;
  int batch_size = 10;
  double learning_rate = 3e-3;  // Adam
  double mask_prob = 0.01;      // chance a question token is replaced by <mask>
  double target_exact_match = 0.95;
  double stop_nll = 0.02;       // answer NLL both splits must reach before stopping early
  int check_every = 10;
  std::uint64_t seed = 1;

  void validate() const;
};

struct FinetuneEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double forget_exact_match = -1.0;  // -1 when not evaluated that epoch
  double retain_exact_match = -1.0;
  double answer_nll = -1.0;
};

struct FinetuneResult {
  ModelState model;
  std::vector<FinetuneEpoch> log;
  int epochs_run = 0;
};

/// Next-token fine-tuning on every sample of `dataset` (positions 2..T),
/// with Adam. The returned model has its reference frozen to the result.
/// Throws ConfigError on an empty dataset and TrainingError when exact match
/// on either split stays below target_exact_match after max_epochs.
FinetuneResult finetune_target(ModelState base, const Dataset& dataset, const Vocabulary& vocab,
                               const FinetuneConfig& config);

struct TrainConfig {
  int epochs = 5;
  int batch_size = 4;
  double learning_rate = 0.05;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  std::uint64_t seed = 1;
  WeightingMode weighting = WeightingMode::Hard;
  /// Bypasses attribution and weighting entirely and runs the unweighted
  /// sequence-level objective.
  bool sequence_level = false;
  /// Answer: the question is a prompt and only answer tokens enter the
  /// unlearning loss. Sequence: every position 2..T does.
  LossRegion loss_region = LossRegion::Answer;
  double r = 0.2;
  double alpha = 0.7;
  double tau = 0.5;
  ObjectiveConfig objective;
  int eval_every = 1;  // epochs
  /// Score tokens under the frozen reference instead of the live parameters.
  bool attribution_from_reference = false;
  bool entropy_from_reference = false;

  void validate(const ModelConfig& model) const;
};

struct EvalRecord {
  std::size_t step = 0;
  int epoch = 0;
  double forget_nll = 0.0;
  double retain_nll = 0.0;
  double forget_exact_match = 0.0;
  double retain_exact_match = 0.0;
  double kl_drift = 0.0;
  std::size_t token_updates = 0;  // cumulative unlearning loss terms applied
  double wall_ms = 0.0;
};

struct RunReport {
  std::vector<EvalRecord> records;
};

/// One JSON object per record; schema in schema.hpp.
void write_report_jsonl(const RunReport& report, std::ostream& out);

struct UnlearnResult {
  ModelState model;
  RunReport report;
  bool aborted = false;
  std::string abort_reason;
  std::size_t steps = 0;
  std::size_t token_updates = 0;
};

/// Optional per-step observer, called after every parameter update with the
/// step index and the weights used for each forget sample of the batch.
using StepObserver = std::function<void(std::size_t step, std::span<const TokenWeights> weights)>;

/// Token-level unlearning loop. Per forget batch: score tokens (mask, shift,
/// entropy, composite), derive weights, take the weighted unlearning loss plus
/// lambda times the KL retention loss on an equally sized retain batch, and
/// update. On a non-finite loss or gradient the parameters roll back to the
/// last finite state and the run stops with `aborted` set.
/// Throws TrainingError for an empty forget set, ConsistencyError when the
/// target has no frozen reference.
UnlearnResult unlearn(const ModelState& target, std::span<const TokenSequence* const> forget,
                      std::span<const TokenSequence* const> retain, const Vocabulary& vocab,
                      const TrainConfig& config, const StepObserver& observer = {});

/// Evaluation snapshot shared by the trainer and the CLI.
EvalRecord snapshot(const ModelState& model, std::span<const TokenSequence* const> forget,
                    std::span<const TokenSequence* const> retain);

}  // namespace tokenunlearn
