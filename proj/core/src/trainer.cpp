#include "tokenunlearn/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numeric>
#include <ostream>
#include <random>
#include <tuple>
#include <utility>

#include "tokenunlearn/errors.hpp"
#include "tokenunlearn/metrics.hpp"

namespace tokenunlearn {
namespace {

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

std::vector<const TokenSequence*> all_sequences(const Dataset& dataset) {
  std::vector<const TokenSequence*> out;
  out.reserve(dataset.samples.size());
  for (const auto& s : dataset.samples) out.push_back(&s.seq);
  return out;
}

/// Salt for the RMU target so it does not share a stream with data order.
constexpr std::uint64_t kRmuSeedSalt = 0x5eed0f0ed1aULL;

}  // namespace

std::string_view to_string(OptimizerKind kind) {
  return kind == OptimizerKind::Sgd ? "sgd" : "adam";
}

OptimizerKind parse_optimizer(std::string_view text) {
  if (text == "sgd") return OptimizerKind::Sgd;
  if (text == "adam") return OptimizerKind::Adam;
  throw ConfigError("unknown optimizer '" + std::string(text) + "'");
}

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, std::size_t num_params)
    : kind_(kind), lr_(learning_rate) {
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (kind_ == OptimizerKind::Adam) {
    m_.assign(num_params, 0.0);
    v_.assign(num_params, 0.0);
  }
}

void Optimizer::step(ModelState& model, std::span<const double> grad) {
  std::span<double> theta = model.mutable_params();
  if (grad.size() != theta.size()) throw LengthError("gradient length does not match parameters");
  if (kind_ == OptimizerKind::Sgd) {
    for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= lr_ * grad[i];
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  ++t_;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < theta.size(); ++i) {
    m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
    v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
    theta[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
  }
}

void FinetuneConfig::validate() const {
  if (max_epochs < 1) throw ConfigError("finetune max_epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("finetune batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("finetune learning rate must be > 0");
  if (!(mask_prob >= 0.0 && mask_prob < 1.0)) throw ConfigError("mask_prob must lie in [0, 1)");
  if (check_every < 1) throw ConfigError("check_every must be >= 1");
}

FinetuneResult finetune_target(ModelState base, const Dataset& dataset, const Vocabulary& vocab,
                               const FinetuneConfig& config) {
  config.validate();
  if (dataset.samples.empty()) throw ConfigError("cannot fine-tune on an empty dataset");
  if (base.config().vocab_size != vocab.size()) {
    throw ConfigError("model and vocabulary sizes differ");
  }
  for (const auto& s : dataset.samples) s.seq.validate(vocab.size());

  FinetuneResult result{std::move(base), {}, 0};
  ModelState& model = result.model;
  Optimizer opt(OptimizerKind::Adam, config.learning_rate, model.num_params());
  std::mt19937_64 rng(config.seed);
  std::bernoulli_distribution mask_draw(config.mask_prob);

  const auto forget = dataset.sequences(Split::Forget);
  const auto retain = dataset.sequences(Split::Retain);
  const auto everything = all_sequences(dataset);
  std::vector<std::size_t> order(dataset.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> grad(model.num_params());

  SplitMetrics fm, rm;
  // An empty split has nothing to memorise.
  const auto memorised = [&](const SplitMetrics& m) {
    return m.samples == 0 || m.exact_match >= config.target_exact_match;
  };
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t epoch_tokens = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
      std::fill(grad.begin(), grad.end(), 0.0);
      std::size_t batch_tokens = 0;
      double batch_loss = 0.0;
      for (std::size_t b = start; b < end; ++b) {
        const TokenSequence& seq = dataset.samples[order[b]].seq;
        std::vector<TokenId> input = seq.ids;
        for (int pos = 2; pos < seq.answer_start; ++pos) {
          if (mask_draw(rng)) input[static_cast<std::size_t>(pos - 1)] = vocab.mask_id();
        }
        const ForwardTrace trace = forward(model, std::span<const TokenId>(input));
        TraceGradient g = TraceGradient::zeros(trace);
        for (int pos = 2; pos <= seq.length(); ++pos) {
          const int row = pos - 2;
          const TokenId target = seq.at(pos);
          batch_loss -= trace.log_probs(row, target);
          g.dlogits.row(row) += trace.log_probs.row(row).array().exp().matrix();
          g.dlogits(row, target) -= 1.0;
          ++batch_tokens;
        }
        backward_accumulate(model, trace, g, grad);
      }
      const double inv = 1.0 / static_cast<double>(batch_tokens);
      for (double& x : grad) x *= inv;
      if (!std::isfinite(batch_loss) || !all_finite(grad)) {
        throw TrainingError("fine-tuning diverged at epoch " + std::to_string(epoch));
      }
      opt.step(model, grad);
      epoch_loss += batch_loss;
      epoch_tokens += batch_tokens;
    }

    FinetuneEpoch rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(epoch_tokens);
    result.epochs_run = epoch;
    const bool check = epoch % config.check_every == 0 || epoch == config.max_epochs;
    if (check) {
      fm = evaluate(model, forget);
      rm = evaluate(model, retain);
      rec.forget_exact_match = fm.exact_match;
      rec.retain_exact_match = rm.exact_match;
      const double tokens = static_cast<double>(fm.answer_tokens + rm.answer_tokens);
      rec.answer_nll = (fm.nll * static_cast<double>(fm.answer_tokens) +
                        rm.nll * static_cast<double>(rm.answer_tokens)) / tokens;
    }
    result.log.push_back(rec);
    if (check && memorised(fm) && memorised(rm) && fm.nll <= config.stop_nll && rm.nll <= config.stop_nll) {
      break;
    }
  }

  if (!memorised(fm) || !memorised(rm)) {
    throw TrainingError("target did not memorise the data within " + std::to_string(config.max_epochs) +
                        " epochs: forget exact match " + std::to_string(fm.exact_match) +
                        ", retain exact match " + std::to_string(rm.exact_match) +
                        ", forget NLL " + std::to_string(fm.nll) + ", retain NLL " +
                        std::to_string(rm.nll));
  }
  model.freeze_reference();
  return result;
}

void TrainConfig::validate(const ModelConfig& model) const {
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(r > 0.0 && r <= 1.0)) throw ConfigError("selection ratio r must lie in (0, 1]");
  if (!(alpha >= 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in [0, 1]");
  if (!(tau > 0.0)) throw ConfigError("tau must be > 0");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  ObjectiveConfig obj = objective;
  if (obj.method == Method::RMU && obj.rmu_target.size() == 0) obj.rmu_target = random_unit_vector(model.d_model, 1);
  obj.validate(model);
}

EvalRecord snapshot(const ModelState& model, std::span<const TokenSequence* const> forget,
                    std::span<const TokenSequence* const> retain) {
  EvalRecord rec;
  const SplitMetrics fm = evaluate(model, forget);
  const SplitMetrics rm = evaluate(model, retain);
  rec.forget_nll = fm.nll;
  rec.retain_nll = rm.nll;
  rec.forget_exact_match = fm.exact_match;
  rec.retain_exact_match = rm.exact_match;
  rec.kl_drift = model.has_reference() ? kl_drift(model, retain) : 0.0;
  return rec;
}

UnlearnResult unlearn(const ModelState& target, std::span<const TokenSequence* const> forget,
                      std::span<const TokenSequence* const> retain, const Vocabulary& vocab,
                      const TrainConfig& config, const StepObserver& observer) {
  if (forget.empty()) throw TrainingError("forget set is empty");
  if (!target.has_reference()) throw ConsistencyError("target model has no frozen reference");
  config.validate(target.config());
  ObjectiveConfig objective = config.objective;
  if (objective.method == Method::RMU && objective.rmu_target.size() == 0) {
    objective.rmu_target = random_unit_vector(target.config().d_model, config.seed ^ kRmuSeedSalt);
  }

  const auto clock_start = std::chrono::steady_clock::now();
  auto elapsed_ms = [&] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - clock_start)
        .count();
  };

  UnlearnResult result{target, {}, false, {}, 0, 0};
  ModelState& model = result.model;
  Optimizer opt(config.optimizer, config.learning_rate, model.num_params());
  std::mt19937_64 rng(config.seed);
  ProfileOptions profile_opts{config.alpha, config.attribution_from_reference,
                              config.entropy_from_reference};

  auto record = [&](int epoch) {
    EvalRecord rec = snapshot(model, forget, retain);
    rec.step = result.steps;
    rec.epoch = epoch;
    rec.token_updates = result.token_updates;
    rec.wall_ms = elapsed_ms();
    result.report.records.push_back(rec);
  };
  record(0);

  std::vector<std::size_t> forget_order(forget.size());
  std::iota(forget_order.begin(), forget_order.end(), std::size_t{0});
  std::vector<std::size_t> retain_order(retain.size());
  std::iota(retain_order.begin(), retain_order.end(), std::size_t{0});
  const auto batch = static_cast<std::size_t>(config.batch_size);

  std::vector<double> last_good;
  for (int epoch = 1; epoch <= config.epochs && !result.aborted; ++epoch) {
    std::shuffle(forget_order.begin(), forget_order.end(), rng);
    for (std::size_t start = 0; start < forget_order.size(); start += batch) {
      const std::size_t end = std::min(forget_order.size(), start + batch);
      std::vector<const TokenSequence*> forget_batch;
      for (std::size_t i = start; i < end; ++i) forget_batch.push_back(forget[forget_order[i]]);

      // Retain batch of the same size, drawn without replacement.
      std::vector<const TokenSequence*> retain_batch;
      const std::size_t n_retain = std::min(retain_order.size(), forget_batch.size());
      for (std::size_t i = 0; i < n_retain; ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, retain_order.size() - 1);
        std::swap(retain_order[i], retain_order[pick(rng)]);
        retain_batch.push_back(retain[retain_order[i]]);
      }

      std::vector<TokenWeights> weights;
      auto batch_loss = [&] {
        LossAndGrad unl;
        if (config.sequence_level) {
          unl = sequence_level_loss(model, forget_batch, objective, config.loss_region);
        } else {
          weights.reserve(forget_batch.size());
          for (const TokenSequence* seq : forget_batch) {
            if (config.weighting == WeightingMode::Uniform) {
              weights.push_back(region_weights(std::vector<double>(static_cast<std::size_t>(seq->length() - 1), 0.0),
                                               *seq, config.loss_region, WeightingMode::Uniform, config.r,
                                               config.tau));
            } else {
              const ImportanceProfile profile = importance_profile(model, *seq, vocab, profile_opts);
              weights.push_back(
                  region_weights(profile.phi, *seq, config.loss_region, config.weighting, config.r, config.tau));
            }
          }
          std::vector<WeightedSample> items;
          for (std::size_t i = 0; i < forget_batch.size(); ++i) items.push_back({forget_batch[i], &weights[i]});
          unl = unified_unlearn_loss(model, items, objective);
        }
        LossAndGrad kl;
        if (objective.lambda > 0.0 && !retain_batch.empty()) kl = kl_retention_loss(model, retain_batch);
        return std::pair{unl.loss_terms, total_loss(unl, kl, objective.lambda)};
      };

      std::size_t loss_terms = 0;
      LossAndGrad total;
      try {
        std::tie(loss_terms, total) = batch_loss();
      } catch (const NumericError& e) {
        // The current parameters overflow; the state before the last update did not.
        if (!last_good.empty()) model.set_params(last_good);
        result.aborted = true;
        result.abort_reason = "step " + std::to_string(result.steps + 1) + ": " + e.what();
        break;
      }

      if (!std::isfinite(total.value) || !all_finite(total.grad)) {
        if (!last_good.empty()) model.set_params(last_good);
        result.aborted = true;
        result.abort_reason = "non-finite loss or gradient at step " + std::to_string(result.steps + 1);
        break;
      }
      last_good.assign(model.params().begin(), model.params().end());
      opt.step(model, total.grad);
      if (!model.finite()) {
        model.set_params(last_good);
        result.aborted = true;
        result.abort_reason = "non-finite parameters after step " + std::to_string(result.steps + 1);
        break;
      }
      ++result.steps;
      result.token_updates += loss_terms;
      if (observer) observer(result.steps, weights);
    }
    if (!result.aborted && (epoch % config.eval_every == 0 || epoch == config.epochs)) {
      try {
        record(epoch);
      } catch (const NumericError& e) {
        if (!last_good.empty()) model.set_params(last_good);
        result.aborted = true;
        result.abort_reason = "evaluation after epoch " + std::to_string(epoch) + ": " + e.what();
      }
    }
  }
  if (result.aborted) {
    try {
      record(-1);
    } catch (const NumericError& e) {
      result.abort_reason += "; final evaluation failed: " + std::string(e.what());
    }
  }
  return result;
}

void write_report_jsonl(const RunReport& report, std::ostream& out) {
  for (const auto& r : report.records) {
    nlohmann::json j;
    j["step"] = r.step;
    j["epoch"] = r.epoch;
    j["forget_nll"] = r.forget_nll;
    j["retain_nll"] = r.retain_nll;
    j["forget_exact_match"] = r.forget_exact_match;
    j["retain_exact_match"] = r.retain_exact_match;
    j["kl_drift"] = r.kl_drift;
    j["token_updates"] = r.token_updates;
    j["wall_ms"] = r.wall_ms;
    out << j.dump() << '\n';
  }
}

}  // namespace tokenunlearn
