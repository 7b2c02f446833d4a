#pragma once

// Independent reference implementations used as test oracles. Nothing here
// calls into the library's numerical code: the forward pass is re-derived
// from the documented parameter order with plain loops over std::vector.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace oracle {

using Rows = std::vector<std::vector<double>>;

struct Shape {
  int v, d, h, layers, ctx;
};

struct Result {
  Rows logits;
  std::vector<Rows> hidden;  // layers + 1 entries
};

inline double gelu(double x) {
  const double c = std::sqrt(2.0 / 3.14159265358979323846);
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

// token_embedding [V x d], position_embedding [C x d], per layer wq wk wv wo
// [d x d], w1 [d x h], b1 [h], w2 [h x d], b2 [d], then w_out [d x V], b_out [V].
inline Result forward(std::span<const double> theta, const Shape& s, const std::vector<int>& ids) {
  std::size_t off = 0;
  auto take = [&](std::size_t n) {
    const double* p = theta.data() + off;
    off += n;
    return p;
  };
  const auto ud = static_cast<std::size_t>(s.d), uh = static_cast<std::size_t>(s.h),
             uv = static_cast<std::size_t>(s.v);
  const double* tok = take(uv * ud);
  const double* pos = take(static_cast<std::size_t>(s.ctx) * ud);
  const int t_len = static_cast<int>(ids.size());

  auto matmul = [](const Rows& x, const double* w, int in, int out) {
    Rows y(x.size(), std::vector<double>(static_cast<std::size_t>(out), 0.0));
    for (std::size_t t = 0; t < x.size(); ++t)
      for (int j = 0; j < out; ++j) {
        double acc = 0.0;
        for (int i = 0; i < in; ++i) acc += x[t][static_cast<std::size_t>(i)] * w[i * out + j];
        y[t][static_cast<std::size_t>(j)] = acc;
      }
    return y;
  };

  Rows x(static_cast<std::size_t>(t_len), std::vector<double>(ud));
  for (int t = 0; t < t_len; ++t)
    for (int j = 0; j < s.d; ++j) x[t][j] = tok[ids[t] * s.d + j] + pos[t * s.d + j];

  Result r;
  r.hidden.push_back(x);
  for (int l = 0; l < s.layers; ++l) {
    const double* wq = take(ud * ud);
    const double* wk = take(ud * ud);
    const double* wv = take(ud * ud);
    const double* wo = take(ud * ud);
    const double* w1 = take(ud * uh);
    const double* b1 = take(uh);
    const double* w2 = take(uh * ud);
    const double* b2 = take(ud);

    const Rows q = matmul(x, wq, s.d, s.d), k = matmul(x, wk, s.d, s.d), v = matmul(x, wv, s.d, s.d);
    Rows ctx(static_cast<std::size_t>(t_len), std::vector<double>(ud, 0.0));
    for (int t = 0; t < t_len; ++t) {
      std::vector<double> a(static_cast<std::size_t>(t + 1));
      for (int j = 0; j <= t; ++j) {
        double dot = 0.0;
        for (int c = 0; c < s.d; ++c) dot += q[t][c] * k[j][c];
        a[j] = dot / std::sqrt(static_cast<double>(s.d));
      }
      const double m = *std::max_element(a.begin(), a.end());
      double z = 0.0;
      for (double& e : a) z += (e = std::exp(e - m));
      for (int j = 0; j <= t; ++j)
        for (int c = 0; c < s.d; ++c) ctx[t][c] += a[j] / z * v[j][c];
    }
    const Rows proj = matmul(ctx, wo, s.d, s.d);
    Rows x1 = x;
    for (int t = 0; t < t_len; ++t)
      for (int c = 0; c < s.d; ++c) x1[t][c] += proj[t][c];
    Rows pre = matmul(x1, w1, s.d, s.h);
    for (auto& row : pre)
      for (int c = 0; c < s.h; ++c) row[c] = gelu(row[c] + b1[c]);
    const Rows mlp = matmul(pre, w2, s.h, s.d);
    for (int t = 0; t < t_len; ++t)
      for (int c = 0; c < s.d; ++c) x[t][c] = x1[t][c] + mlp[t][c] + b2[c];
    r.hidden.push_back(x);
  }
  const double* w_out = take(ud * uv);
  const double* b_out = take(uv);
  r.logits = matmul(x, w_out, s.d, s.v);
  for (auto& row : r.logits)
    for (int c = 0; c < s.v; ++c) row[c] += b_out[c];
  return r;
}

inline std::vector<double> log_softmax(const std::vector<double>& z) {
  const double m = *std::max_element(z.begin(), z.end());
  double sum = 0.0;
  for (double x : z) sum += std::exp(x - m);
  const double lse = m + std::log(sum);
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] - lse;
  return out;
}

/// Central finite-difference derivative of f along coordinate `i` of x.
inline double central_difference(const std::function<double(std::span<const double>)>& f,
                                 std::vector<double> x, std::size_t i, double step) {
  const double x0 = x[i];
  x[i] = x0 + step;
  const double up = f(x);
  x[i] = x0 - step;
  const double down = f(x);
  return (up - down) / (2.0 * step);
}

/// Relative error |a - b| / max(|a|, |b|, floor).
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace oracle
