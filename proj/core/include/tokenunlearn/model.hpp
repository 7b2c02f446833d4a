#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "tokenunlearn/vocabulary.hpp"

namespace tokenunlearn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

/// Shape of the toy causal language model.
///
/// Architecture: token + learned position embedding, then `n_layers` blocks of
/// single-head causal self-attention followed by a GELU MLP, each wrapped in a
/// residual connection (no normalisation layers), then a linear output head.
struct ModelConfig {
  int vocab_size = 0;
  int d_model = 32;
  int d_hidden = 64;
  int n_layers = 2;
  int context_length = 32;

  /// Throws ConfigError for non-positive sizes.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerOffsets {
  std::size_t wq, wk, wv, wo, w1, b1, w2, b2;
};

/// Offsets of every tensor inside the flat parameter vector. All matrices are
/// row-major and multiply activations from the right (`x * W`). Order:
///   token_embedding [V x d], position_embedding [C x d],
///   per layer: wq, wk, wv, wo [d x d], w1 [d x h], b1 [h], w2 [h x d], b2 [d],
///   w_out [d x V], b_out [V].
struct ParamLayout {
  std::size_t token_embedding = 0;
  std::size_t position_embedding = 0;
  std::vector<LayerOffsets> layers;
  std::size_t w_out = 0;
  std::size_t b_out = 0;
  std::size_t total = 0;

  static ParamLayout for_config(const ModelConfig& config);
};

/// Parameters of the model plus an optional frozen reference copy.
///
/// Every mutation draws a fresh stamp from a process-wide counter, which lets
/// a ForwardTrace detect that it was produced from different parameters.
class ModelState {
 public:
  explicit ModelState(ModelConfig config);

  /// Scaled-Gaussian initialisation from a seeded mt19937_64:
  /// embeddings and q/k/v/w1/w_out ~ N(0, 1/fan_in); wo and w2 are further
  /// scaled by 1/sqrt(2 * n_layers); biases start at zero.
  static ModelState initialized(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }
  const ParamLayout& layout() const noexcept { return layout_; }
  std::size_t num_params() const noexcept { return params_.size(); }

  std::span<const double> params() const noexcept { return params_; }
  /// Mutable view; invalidates traces produced before the call.
  std::span<double> mutable_params();
  void set_params(std::vector<double> params);

  bool has_reference() const noexcept { return !reference_.empty(); }
  /// Throws ConsistencyError when no reference has been frozen.
  std::span<const double> reference() const;
  /// Copies the current parameters into the reference slot. A reference can be
  /// frozen once; a second call throws ConsistencyError.
  void freeze_reference();
  /// Used by checkpoint loading only.
  void restore_reference(std::vector<double> reference);

  std::uint64_t stamp() const noexcept { return stamp_; }
  std::uint64_t reference_stamp() const noexcept { return reference_stamp_; }

  /// True when every parameter is finite.
  bool finite() const;

 private:
  ModelConfig config_;
  ParamLayout layout_;
  std::vector<double> params_;
  std::vector<double> reference_;
  std::uint64_t stamp_;
  std::uint64_t reference_stamp_ = 0;
};

/// Activations of one forward pass. Row r (0-based) of `logits` is computed
/// from tokens 1..r+1 and predicts the token at position r+2.
struct ForwardTrace {
  struct LayerCache {
    Matrix q, k, v, attn, ctx, x1, pre, act;
  };

  std::vector<TokenId> ids;
  bool from_reference = false;
  std::uint64_t stamp = 0;

  Matrix logits;     // T x V
  Matrix log_probs;  // T x V, row-wise log-softmax
  std::vector<Matrix> hidden;  // n_layers + 1 entries, each T x d
  std::vector<LayerCache> layers;

  int length() const noexcept { return static_cast<int>(ids.size()); }
};

/// Runs the model over `ids`. With `use_reference` the frozen reference
/// parameters are used instead of the live ones.
/// Throws LengthError (too long / too short), NumericError (non-finite
/// parameters or activations), RangeError (bad token id).
ForwardTrace forward(const ModelState& model, std::span<const TokenId> ids,
                     bool use_reference = false);
ForwardTrace forward(const ModelState& model, const TokenSequence& seq,
                     bool use_reference = false);

/// log p(token | tokens before `position`), for 2 <= position <= T.
double token_log_prob(const ForwardTrace& trace, int position, TokenId token);
/// log p(ids[position] | prefix).
double target_log_prob(const ForwardTrace& trace, int position);

/// Hidden state after `layer` blocks (0 = embeddings) at `position` (1-based).
Vector hidden_at(const ForwardTrace& trace, int layer, int position);

/// Upstream gradient on the outputs of a trace: d loss / d logits plus optional
/// d loss / d hidden (n_layers + 1 entries, or empty).
struct TraceGradient {
  Matrix dlogits;
  std::vector<Matrix> dhidden;

  static TraceGradient zeros(const ForwardTrace& trace, bool with_hidden = false);
};

/// Adds coefficient * d log p(ids[position] | prefix) / d logits to `grad`.
void add_log_prob_upstream(const ForwardTrace& trace, TraceGradient& grad, int position,
                           double coefficient);

/// Reverse-mode pass. Accumulates d loss / d theta into `out` (size num_params).
/// Throws ConsistencyError when the trace is stale or was produced from the
/// reference parameters.
void backward_accumulate(const ModelState& model, const ForwardTrace& trace,
                         const TraceGradient& upstream, std::span<double> out);
std::vector<double> backward(const ModelState& model, const ForwardTrace& trace,
                             const TraceGradient& upstream);

struct TokenUpstream {
  int position;
  double coefficient;
};

/// Gradient of sum_k coefficient_k * log p(ids[position_k] | prefix).
std::vector<double> backward_weighted(const ModelState& model, const ForwardTrace& trace,
                                      std::span<const TokenUpstream> upstream);

}  // namespace tokenunlearn
