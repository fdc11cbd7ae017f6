#pragma once

// Test helpers: central finite differences and small model factories.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "lorahar/lorahar.hpp"

namespace lorahar::testing {

/// max|a - b| / max(max|a|, max|b|, floor)
inline double rel_err(const Matrix& a, const Matrix& b, double floor = 1e-12) {
  double scale = floor;
  for (double v : a.values()) scale = std::max(scale, std::abs(v));
  for (double v : b.values()) scale = std::max(scale, std::abs(v));
  return max_abs_diff(a, b) / scale;
}

using LossFn = std::function<Var(Tape&)>;

/// Central differences of the scalar `build` w.r.t. every entry of `p`.
inline Matrix numeric_grad(Parameter& p, const LossFn& build, double h = 1e-6) {
  Matrix g(p.value.rows(), p.value.cols());
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double keep = p.value[i];
    p.value[i] = keep + h;
    Tape tp;
    const double up = build(tp).value()(0, 0);
    p.value[i] = keep - h;
    Tape tm;
    const double down = build(tm).value()(0, 0);
    p.value[i] = keep;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

/// Tape gradients for `params` (all made trainable, grads zeroed first).
inline std::vector<Matrix> tape_grads(const std::vector<Parameter*>& params, const LossFn& build) {
  for (Parameter* p : params) {
    p->trainable = true;
    p->zero_grad();
  }
  Tape t;
  t.backward(build(t));
  std::vector<Matrix> out;
  for (Parameter* p : params) out.push_back(p->grad);
  return out;
}

/// Worst relative error over `params` between tape and finite-difference gradients.
inline double grad_check(const std::vector<Parameter*>& params, const LossFn& build, double h = 1e-6) {
  const auto analytic = tape_grads(params, build);
  double worst = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) worst = std::max(worst, rel_err(analytic[i], numeric_grad(*params[i], build, h)));
  return worst;
}

/// u·Y·v with fixed random u, v, so every entry of Y reaches the loss with its own
/// coefficient u_i·v_j.
inline Var probe_loss(Var y, std::uint64_t seed = 99) {
  Rng rng(seed);
  Tape& t = y.tape();
  Var u = t.constant(rng.normal_matrix(1, y.rows(), 1.0));
  Var v = t.constant(rng.normal_matrix(y.cols(), 1, 1.0));
  return matmul(matmul(u, y), v);
}

inline ModelConfig tiny_config(std::size_t d = 16, std::size_t blocks = 2) {
  ModelConfig c;
  c.window_len = 32;
  c.channels = 3;
  c.patch_len = 8;
  c.embed_dim = d;
  c.ffn_hidden = 2 * d;
  c.n_heads = 2;
  c.n_enc_layers = blocks;
  c.n_dec_layers = 1;
  c.n_classes = 3;
  c.head_hidden = 8;
  c.head_dropout = 0.0;
  return c;
}

inline std::vector<Matrix> random_windows(const ModelConfig& c, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(rng.normal_matrix(c.window_len, c.channels, 1.0));
  return out;
}

inline std::vector<const Matrix*> ptrs(const std::vector<Matrix>& ws) {
  std::vector<const Matrix*> out;
  for (const auto& w : ws) out.push_back(&w);
  return out;
}

inline std::vector<Parameter*> all_params(Backbone& b) {
  std::vector<Parameter*> out;
  b.for_each_parameter([&](Parameter& p) { out.push_back(&p); });
  return out;
}

}  // namespace lorahar::testing
