#include "tokenunlearn/model.hpp"

#include <atomic>
#include <cmath>
#include <random>
#include <string>

#include "tokenunlearn/errors.hpp"

namespace tokenunlearn {
namespace {

using ConstMap = Eigen::Map<const Matrix>;
using MutMap = Eigen::Map<Matrix>;
using ConstRowVec = Eigen::Map<const Eigen::RowVectorXd>;
using MutRowVec = Eigen::Map<Eigen::RowVectorXd>;

std::uint64_t next_stamp() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)

double gelu(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double th = std::tanh(u);
  const double du = kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

struct Weights {
  const double* base;
  const ModelConfig& cfg;
  const ParamLayout& layout;

  ConstMap mat(std::size_t off, int rows, int cols) const { return {base + off, rows, cols}; }
  ConstRowVec vec(std::size_t off, int n) const { return {base + off, n}; }
};

void check_ids(const ModelConfig& cfg, std::span<const TokenId> ids) {
  if (ids.empty()) throw LengthError("empty sequence");
  if (static_cast<int>(ids.size()) > cfg.context_length) {
    throw LengthError("sequence of length " + std::to_string(ids.size()) +
                      " exceeds context length " + std::to_string(cfg.context_length));
  }
  for (TokenId id : ids) {
    if (id < 0 || id >= cfg.vocab_size) {
      throw RangeError("token id " + std::to_string(id) + " outside vocabulary");
    }
  }
}

bool all_finite(std::span<const double> values) {
  for (double v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("vocab_size must be >= 2");
  if (d_model < 1 || d_hidden < 1) throw ConfigError("model dimensions must be positive");
  if (n_layers < 1) throw ConfigError("n_layers must be >= 1");
  if (context_length < 2) throw ConfigError("context_length must be >= 2");
}

ParamLayout ParamLayout::for_config(const ModelConfig& cfg) {
  cfg.validate();
  const auto v = static_cast<std::size_t>(cfg.vocab_size);
  const auto d = static_cast<std::size_t>(cfg.d_model);
  const auto h = static_cast<std::size_t>(cfg.d_hidden);
  const auto c = static_cast<std::size_t>(cfg.context_length);

  ParamLayout layout;
  std::size_t off = 0;
  layout.token_embedding = off;
  off += v * d;
  layout.position_embedding = off;
  off += c * d;
  for (int l = 0; l < cfg.n_layers; ++l) {
    LayerOffsets lo{};
    lo.wq = off; off += d * d;
    lo.wk = off; off += d * d;
    lo.wv = off; off += d * d;
    lo.wo = off; off += d * d;
    lo.w1 = off; off += d * h;
    lo.b1 = off; off += h;
    lo.w2 = off; off += h * d;
    lo.b2 = off; off += d;
    layout.layers.push_back(lo);
  }
  layout.w_out = off;
  off += d * v;
  layout.b_out = off;
  off += v;
  layout.total = off;
  return layout;
}

ModelState::ModelState(ModelConfig config)
    : config_(config),
      layout_(ParamLayout::for_config(config_)),
      params_(layout_.total, 0.0),
      stamp_(next_stamp()) {}

ModelState ModelState::initialized(const ModelConfig& config, std::uint64_t seed) {
  ModelState model(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto& lo = model.layout_;
  const int d = config.d_model;
  const int h = config.d_hidden;
  const double depth_scale = 1.0 / std::sqrt(2.0 * config.n_layers);

  auto fill = [&](std::size_t off, std::size_t n, double stddev) {
    for (std::size_t i = 0; i < n; ++i) model.params_[off + i] = stddev * normal(rng);
  };
  const auto du = static_cast<std::size_t>(d);
  const auto hu = static_cast<std::size_t>(h);
  fill(lo.token_embedding, static_cast<std::size_t>(config.vocab_size) * du, 1.0 / std::sqrt(d));
  fill(lo.position_embedding, static_cast<std::size_t>(config.context_length) * du,
       1.0 / std::sqrt(d));
  for (const auto& layer : lo.layers) {
    fill(layer.wq, du * du, 1.0 / std::sqrt(d));
    fill(layer.wk, du * du, 1.0 / std::sqrt(d));
    fill(layer.wv, du * du, 1.0 / std::sqrt(d));
    fill(layer.wo, du * du, depth_scale / std::sqrt(d));
    fill(layer.w1, du * hu, 1.0 / std::sqrt(d));
    fill(layer.w2, hu * du, depth_scale / std::sqrt(h));
  }
  fill(lo.w_out, du * static_cast<std::size_t>(config.vocab_size), 1.0 / std::sqrt(d));
  model.stamp_ = next_stamp();
  return model;
}

std::span<double> ModelState::mutable_params() {
  stamp_ = next_stamp();
  return params_;
}

void ModelState::set_params(std::vector<double> params) {
  if (params.size() != params_.size()) {
    throw LengthError("parameter vector has " + std::to_string(params.size()) + " entries, expected " +
                      std::to_string(params_.size()));
  }
  params_ = std::move(params);
  stamp_ = next_stamp();
}

std::span<const double> ModelState::reference() const {
  if (!has_reference()) throw ConsistencyError("model has no frozen reference parameters");
  return reference_;
}

void ModelState::freeze_reference() {
  if (has_reference()) throw ConsistencyError("reference parameters are already frozen");
  reference_ = params_;
  reference_stamp_ = next_stamp();
}

void ModelState::restore_reference(std::vector<double> reference) {
  if (reference.size() != params_.size()) {
    throw LengthError("reference vector has wrong length");
  }
  reference_ = std::move(reference);
  reference_stamp_ = next_stamp();
}

bool ModelState::finite() const { return all_finite(params_); }

ForwardTrace forward(const ModelState& model, std::span<const TokenId> ids, bool use_reference) {
  const ModelConfig& cfg = model.config();
  check_ids(cfg, ids);
  std::span<const double> theta = use_reference ? model.reference() : model.params();
  if (!all_finite(theta)) throw NumericError("non-finite model parameter");

  const ParamLayout& lo = model.layout();
  const Weights w{theta.data(), cfg, lo};
  const int t_len = static_cast<int>(ids.size());
  const int d = cfg.d_model;
  const int h = cfg.d_hidden;
  const int v = cfg.vocab_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  ForwardTrace trace;
  trace.ids.assign(ids.begin(), ids.end());
  trace.from_reference = use_reference;
  trace.stamp = use_reference ? model.reference_stamp() : model.stamp();

  const ConstMap tok_emb = w.mat(lo.token_embedding, v, d);
  const ConstMap pos_emb = w.mat(lo.position_embedding, cfg.context_length, d);
  Matrix x(t_len, d);
  for (int t = 0; t < t_len; ++t) x.row(t) = tok_emb.row(ids[t]) + pos_emb.row(t);
  trace.hidden.push_back(x);

  for (const auto& layer : lo.layers) {
    ForwardTrace::LayerCache c;
    c.q = x * w.mat(layer.wq, d, d);
    c.k = x * w.mat(layer.wk, d, d);
    c.v = x * w.mat(layer.wv, d, d);

    const Matrix scores = (c.q * c.k.transpose()) * scale;
    c.attn = Matrix::Zero(t_len, t_len);
    for (int t = 0; t < t_len; ++t) {
      const double m = scores.row(t).head(t + 1).maxCoeff();
      double sum = 0.0;
      for (int j = 0; j <= t; ++j) {
        const double e = std::exp(scores(t, j) - m);
        c.attn(t, j) = e;
        sum += e;
      }
      c.attn.row(t).head(t + 1) /= sum;
    }
    c.ctx = c.attn * c.v;
    c.x1 = x + c.ctx * w.mat(layer.wo, d, d);
    c.pre = c.x1 * w.mat(layer.w1, d, h);
    c.pre.rowwise() += w.vec(layer.b1, h);
    c.act = c.pre.unaryExpr([](double z) { return gelu(z); });
    x = c.x1 + c.act * w.mat(layer.w2, h, d);
    x.rowwise() += w.vec(layer.b2, d);
    trace.layers.push_back(std::move(c));
    trace.hidden.push_back(x);
  }

  trace.logits = x * w.mat(lo.w_out, d, v);
  trace.logits.rowwise() += w.vec(lo.b_out, v);
  if (!trace.logits.allFinite()) throw NumericError("non-finite logits");

  trace.log_probs.resize(t_len, v);
  for (int t = 0; t < t_len; ++t) {
    const double m = trace.logits.row(t).maxCoeff();
    const double lse = m + std::log((trace.logits.row(t).array() - m).exp().sum());
    trace.log_probs.row(t) = trace.logits.row(t).array() - lse;
  }
  return trace;
}

ForwardTrace forward(const ModelState& model, const TokenSequence& seq, bool use_reference) {
  return forward(model, std::span<const TokenId>(seq.ids), use_reference);
}

double token_log_prob(const ForwardTrace& trace, int position, TokenId token) {
  if (position < 2 || position > trace.length()) {
    throw RangeError("position " + std::to_string(position) + " outside [2, " +
                     std::to_string(trace.length()) + "]");
  }
  if (token < 0 || token >= trace.log_probs.cols()) {
    throw RangeError("token id " + std::to_string(token) + " outside vocabulary");
  }
  return trace.log_probs(position - 2, token);
}

double target_log_prob(const ForwardTrace& trace, int position) {
  if (position < 2 || position > trace.length()) {
    throw RangeError("position " + std::to_string(position) + " outside [2, " +
                     std::to_string(trace.length()) + "]");
  }
  return trace.log_probs(position - 2, trace.ids[static_cast<std::size_t>(position - 1)]);
}

Vector hidden_at(const ForwardTrace& trace, int layer, int position) {
  if (layer < 0 || layer >= static_cast<int>(trace.hidden.size())) {
    throw RangeError("layer " + std::to_string(layer) + " outside [0, " +
                     std::to_string(trace.hidden.size() - 1) + "]");
  }
  if (position < 1 || position > trace.length()) {
    throw RangeError("position " + std::to_string(position) + " outside [1, " +
                     std::to_string(trace.length()) + "]");
  }
  return trace.hidden[static_cast<std::size_t>(layer)].row(position - 1).transpose();
}

TraceGradient TraceGradient::zeros(const ForwardTrace& trace, bool with_hidden) {
  TraceGradient g;
  g.dlogits = Matrix::Zero(trace.logits.rows(), trace.logits.cols());
  if (with_hidden) {
    for (const auto& hmat : trace.hidden) g.dhidden.push_back(Matrix::Zero(hmat.rows(), hmat.cols()));
  }
  return g;
}

void add_log_prob_upstream(const ForwardTrace& trace, TraceGradient& grad, int position,
                           double coefficient) {
  if (position < 2 || position > trace.length()) {
    throw RangeError("position " + std::to_string(position) + " outside [2, " +
                     std::to_string(trace.length()) + "]");
  }
  const int row = position - 2;
  const TokenId target = trace.ids[static_cast<std::size_t>(position - 1)];
  // d log softmax(z)_y / dz = onehot(y) - softmax(z)
  grad.dlogits.row(row).array() -= coefficient * trace.log_probs.row(row).array().exp();
  grad.dlogits(row, target) += coefficient;
}

void backward_accumulate(const ModelState& model, const ForwardTrace& trace,
                         const TraceGradient& upstream, std::span<double> out) {
  if (trace.from_reference) {
    throw ConsistencyError("cannot differentiate a trace produced from reference parameters");
  }
  if (trace.stamp != model.stamp()) {
    throw ConsistencyError("stale trace: parameters changed since the forward pass");
  }
  if (out.size() != model.num_params()) throw LengthError("gradient buffer has wrong length");
  const int t_len = trace.length();
  if (upstream.dlogits.rows() != t_len || upstream.dlogits.cols() != trace.logits.cols()) {
    throw LengthError("upstream logits gradient has wrong shape");
  }
  const bool has_dhidden = !upstream.dhidden.empty();
  if (has_dhidden && upstream.dhidden.size() != trace.hidden.size()) {
    throw LengthError("upstream hidden gradient has wrong number of layers");
  }

  const ModelConfig& cfg = model.config();
  const ParamLayout& lo = model.layout();
  const Weights w{model.params().data(), cfg, lo};
  const int d = cfg.d_model;
  const int h = cfg.d_hidden;
  const int v = cfg.vocab_size;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  double* g = out.data();
  auto gmat = [&](std::size_t off, int rows, int cols) { return MutMap(g + off, rows, cols); };
  auto gvec = [&](std::size_t off, int n) { return MutRowVec(g + off, n); };

  const int n_layers = cfg.n_layers;
  const Matrix& x_last = trace.hidden[static_cast<std::size_t>(n_layers)];
  gmat(lo.w_out, d, v).noalias() += x_last.transpose() * upstream.dlogits;
  gvec(lo.b_out, v) += upstream.dlogits.colwise().sum();
  Matrix dx = upstream.dlogits * w.mat(lo.w_out, d, v).transpose();
  if (has_dhidden) dx += upstream.dhidden[static_cast<std::size_t>(n_layers)];

  for (int l = n_layers - 1; l >= 0; --l) {
    const auto& layer = lo.layers[static_cast<std::size_t>(l)];
    const auto& c = trace.layers[static_cast<std::size_t>(l)];
    const Matrix& x_in = trace.hidden[static_cast<std::size_t>(l)];

    // MLP: x_out = x1 + gelu(x1 W1 + b1) W2 + b2
    gmat(layer.w2, h, d).noalias() += c.act.transpose() * dx;
    gvec(layer.b2, d) += dx.colwise().sum();
    Matrix dpre = dx * w.mat(layer.w2, h, d).transpose();
    dpre.array() *= c.pre.unaryExpr([](double z) { return gelu_grad(z); }).array();
    gmat(layer.w1, d, h).noalias() += c.x1.transpose() * dpre;
    gvec(layer.b1, h) += dpre.colwise().sum();
    Matrix dx1 = dx + dpre * w.mat(layer.w1, d, h).transpose();

    // Attention: x1 = x + (A V) Wo
    gmat(layer.wo, d, d).noalias() += c.ctx.transpose() * dx1;
    const Matrix dctx = dx1 * w.mat(layer.wo, d, d).transpose();
    const Matrix dattn = dctx * c.v.transpose();
    const Matrix dv = c.attn.transpose() * dctx;
    Matrix dscores = Matrix::Zero(t_len, t_len);
    for (int t = 0; t < t_len; ++t) {
      double dot = 0.0;
      for (int j = 0; j <= t; ++j) dot += dattn(t, j) * c.attn(t, j);
      for (int j = 0; j <= t; ++j) dscores(t, j) = c.attn(t, j) * (dattn(t, j) - dot);
    }
    dscores *= scale;
    const Matrix dq = dscores * c.k;
    const Matrix dk = dscores.transpose() * c.q;
    gmat(layer.wq, d, d).noalias() += x_in.transpose() * dq;
    gmat(layer.wk, d, d).noalias() += x_in.transpose() * dk;
    gmat(layer.wv, d, d).noalias() += x_in.transpose() * dv;
    dx = dx1;
    dx.noalias() += dq * w.mat(layer.wq, d, d).transpose();
    dx.noalias() += dk * w.mat(layer.wk, d, d).transpose();
    dx.noalias() += dv * w.mat(layer.wv, d, d).transpose();
    if (has_dhidden) dx += upstream.dhidden[static_cast<std::size_t>(l)];
  }

  auto d_tok = gmat(lo.token_embedding, v, d);
  auto d_pos = gmat(lo.position_embedding, cfg.context_length, d);
  for (int t = 0; t < t_len; ++t) {
    d_tok.row(trace.ids[static_cast<std::size_t>(t)]) += dx.row(t);
    d_pos.row(t) += dx.row(t);
  }
}

std::vector<double> backward(const ModelState& model, const ForwardTrace& trace,
                             const TraceGradient& upstream) {
  std::vector<double> grad(model.num_params(), 0.0);
  backward_accumulate(model, trace, upstream, grad);
  return grad;
}

std::vector<double> backward_weighted(const ModelState& model, const ForwardTrace& trace,
                                      std::span<const TokenUpstream> upstream) {
  TraceGradient g = TraceGradient::zeros(trace);
  for (const auto& u : upstream) add_log_prob_upstream(trace, g, u.position, u.coefficient);
  return backward(model, trace, g);
}

}  // namespace tokenunlearn
