#include "tokenunlearn/objectives.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <random>

#include "tokenunlearn/errors.hpp"

namespace tokenunlearn {
namespace {

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void scale_in_place(std::vector<double>& v, double s) {
  for (double& x : v) x *= s;
}

}  // namespace

std::string_view to_string(Method method) {
  switch (method) {
    case Method::GA: return "GA";
    case Method::WGA: return "WGA";
    case Method::NPO: return "NPO";
    case Method::RMU: return "RMU";
  }
  return "unknown";
}

Method parse_method(std::string_view text) {
  std::string upper(text);
  std::transform(upper.begin(), upper.end(), upper.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  if (upper == "GA") return Method::GA;
  if (upper == "WGA") return Method::WGA;
  if (upper == "NPO") return Method::NPO;
  if (upper == "RMU") return Method::RMU;
  throw ConfigError("unknown unlearning method '" + std::string(text) + "'");
}

int ObjectiveConfig::resolved_rmu_layer(const ModelConfig& model) const {
  return rmu_layer < 0 ? model.n_layers / 2 : rmu_layer;
}

void ObjectiveConfig::validate(const ModelConfig& model) const {
  if (!(gamma > 0.0)) throw ConfigError("WGA gamma must be > 0");
  if (!(beta > 0.0)) throw ConfigError("NPO beta must be > 0");
  if (!(rmu_scale > 0.0)) throw ConfigError("RMU scale must be > 0");
  if (!(lambda >= 0.0)) throw ConfigError("KL weight lambda must be >= 0");
  if (method == Method::RMU) {
    const int layer = resolved_rmu_layer(model);
    if (layer < 0 || layer > model.n_layers) {
      throw ConfigError("RMU layer " + std::to_string(layer) + " outside [0, " +
                        std::to_string(model.n_layers) + "]");
    }
    if (rmu_target.size() != model.d_model) {
      throw ConfigError("RMU target must have the model width");
    }
    if (std::abs(rmu_target.norm() - 1.0) > 1e-9) throw ConfigError("RMU target must be a unit vector");
  }
}

Vector random_unit_vector(int dim, std::uint64_t seed) {
  if (dim < 1) throw ConfigError("unit vector dimension must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector u(dim);
  do {
    for (int i = 0; i < dim; ++i) u(i) = normal(rng);
  } while (u.norm() == 0.0);
  return u / u.norm();
}

TokenLoss token_loss(const ObjectiveConfig& config, const ForwardTrace& trace,
                     const ForwardTrace* reference, int position) {
  TokenLoss out;
  switch (config.method) {
    case Method::GA: {
      out.value = target_log_prob(trace, position);
      out.dlogp = 1.0;
      break;
    }
    case Method::WGA: {
      const double lp = target_log_prob(trace, position);
      const double pg = std::exp(config.gamma * lp);  // p^gamma
      out.value = pg * lp;
      out.dlogp = pg * (1.0 + config.gamma * lp);
      break;
    }
    case Method::NPO: {
      if (reference == nullptr) throw ConsistencyError("NPO needs a reference trace");
      if (reference->ids != trace.ids) throw ConsistencyError("reference trace covers different ids");
      const double lp = target_log_prob(trace, position);
      const double lp_ref = target_log_prob(*reference, position);
      const double x = config.beta * (lp - lp_ref);
      out.value = (2.0 / config.beta) * softplus(x);
      out.dlogp = 2.0 * sigmoid(x);
      break;
    }
    case Method::RMU: {
      if (position < 2 || position > trace.length()) {
        throw RangeError("position " + std::to_string(position) + " outside [2, " +
                         std::to_string(trace.length()) + "]");
      }
      const int layer = config.rmu_layer < 0 ? static_cast<int>(trace.hidden.size() - 1) / 2
                                             : config.rmu_layer;
      if (config.rmu_target.size() != trace.hidden.front().cols()) {
        throw ConfigError("RMU target must have the model width");
      }
      const Vector residual = hidden_at(trace, layer, position - 1) - config.rmu_scale * config.rmu_target;
      out.value = residual.squaredNorm();
      out.dhidden = 2.0 * residual;
      break;
    }
  }
  return out;
}

void add_token_loss_upstream(const ObjectiveConfig& config, const ForwardTrace& trace,
                             const TokenLoss& loss, int position, double weight,
                             TraceGradient& grad) {
  if (config.method == Method::RMU) {
    const int layer = config.rmu_layer < 0 ? static_cast<int>(trace.hidden.size() - 1) / 2
                                           : config.rmu_layer;
    if (grad.dhidden.empty()) throw LengthError("RMU upstream needs hidden-state gradients");
    grad.dhidden[static_cast<std::size_t>(layer)].row(position - 2) +=
        weight * loss.dhidden.transpose();
    return;
  }
  add_log_prob_upstream(trace, grad, position, weight * loss.dlogp);
}

LossAndGrad unified_unlearn_loss(const ModelState& model, std::span<const WeightedSample> batch,
                                 const ObjectiveConfig& config, bool with_grad) {
  LossAndGrad out;
  if (with_grad) out.grad.assign(model.num_params(), 0.0);
  if (batch.empty()) return out;
  const bool needs_reference = config.method == Method::NPO;
  const bool needs_hidden = config.method == Method::RMU;

  double total = 0.0;
  for (const WeightedSample& item : batch) {
    const TokenSequence& seq = *item.seq;
    const TokenWeights& weights = *item.weights;
    if (static_cast<int>(weights.weights.size()) != seq.length() - 1) {
      throw LengthError("token weights do not line up with their sequence");
    }
    const ForwardTrace trace = forward(model, seq);
    ForwardTrace ref;
    if (needs_reference) ref = forward(model, seq, true);
    TraceGradient g;
    if (with_grad) g = TraceGradient::zeros(trace, needs_hidden);
    double sample_sum = 0.0;
    for (int pos = 2; pos <= seq.length(); ++pos) {
      const double w = weights.at(pos);
      if (w == 0.0) continue;
      const TokenLoss tl = token_loss(config, trace, needs_reference ? &ref : nullptr, pos);
      sample_sum += w * tl.value;
      if (with_grad) add_token_loss_upstream(config, trace, tl, pos, w, g);
      ++out.loss_terms;
    }
    total += sample_sum;
    if (with_grad) backward_accumulate(model, trace, g, out.grad);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.value = total * inv;
  scale_in_place(out.grad, inv);
  return out;
}

LossAndGrad sequence_level_loss(const ModelState& model,
                                std::span<const TokenSequence* const> batch,
                                const ObjectiveConfig& config, LossRegion region) {
  LossAndGrad out;
  out.grad.assign(model.num_params(), 0.0);
  if (batch.empty()) return out;
  const bool needs_reference = config.method == Method::NPO;
  const bool needs_hidden = config.method == Method::RMU;

  double total = 0.0;
  for (const TokenSequence* seq : batch) {
    const ForwardTrace trace = forward(model, *seq);
    ForwardTrace ref;
    if (needs_reference) ref = forward(model, *seq, true);
    TraceGradient g = TraceGradient::zeros(trace, needs_hidden);
    double sample_sum = 0.0;
    for (int pos = region_start(*seq, region); pos <= seq->length(); ++pos) {
      const TokenLoss tl = token_loss(config, trace, needs_reference ? &ref : nullptr, pos);
      sample_sum += tl.value;
      if (needs_hidden) {
        add_token_loss_upstream(config, trace, tl, pos, 1.0, g);
      } else {
        add_log_prob_upstream(trace, g, pos, tl.dlogp);
      }
      ++out.loss_terms;
    }
    total += sample_sum;
    backward_accumulate(model, trace, g, out.grad);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.value = total * inv;
  scale_in_place(out.grad, inv);
  return out;
}

double kl_divergence(std::span<const double> log_p, std::span<const double> log_q) {
  if (log_p.size() != log_q.size()) throw LengthError("KL arguments differ in length");
  double kl = 0.0;
  for (std::size_t v = 0; v < log_p.size(); ++v) {
    const double p = std::exp(log_p[v]);
    if (p > 0.0) kl += p * (log_p[v] - log_q[v]);
  }
  return std::max(0.0, kl);
}

LossAndGrad kl_retention_loss(const ModelState& model,
                              std::span<const TokenSequence* const> batch, bool with_grad) {
  LossAndGrad out;
  if (with_grad) out.grad.assign(model.num_params(), 0.0);
  if (batch.empty()) return out;

  double total = 0.0;
  for (const TokenSequence* seq : batch) {
    const ForwardTrace trace = forward(model, *seq);
    const ForwardTrace ref = forward(model, *seq, true);
    TraceGradient g;
    if (with_grad) g = TraceGradient::zeros(trace);
    const auto vocab = static_cast<std::size_t>(trace.log_probs.cols());
    for (int row = 0; row < seq->length() - 1; ++row) {
      const std::span<const double> lq(trace.log_probs.row(row).data(), vocab);
      const std::span<const double> lp(ref.log_probs.row(row).data(), vocab);
      total += kl_divergence(lp, lq);
      // d KL(p_o || softmax(z)) / dz = softmax(z) - p_o
      if (with_grad)
        g.dlogits.row(row) = trace.log_probs.row(row).array().exp() - ref.log_probs.row(row).array().exp();
      ++out.loss_terms;
    }
    if (with_grad) backward_accumulate(model, trace, g, out.grad);
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  out.value = total * inv;
  scale_in_place(out.grad, inv);
  return out;
}

LossAndGrad total_loss(const LossAndGrad& unlearn, const LossAndGrad& kl, double lambda) {
  if (!(lambda >= 0.0)) throw ConfigError("KL weight lambda must be >= 0");
  LossAndGrad out;
  out.value = unlearn.value + lambda * kl.value;
  out.loss_terms = unlearn.loss_terms + kl.loss_terms;
  out.grad = unlearn.grad;
  if (!kl.grad.empty()) {
    if (kl.grad.size() != out.grad.size()) throw LengthError("gradient lengths differ");
    for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += lambda * kl.grad[i];
  }
  return out;
}

}  // namespace tokenunlearn
