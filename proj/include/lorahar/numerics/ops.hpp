#pragma once

// Differentiable operations recorded on a Tape. Every op checks shapes,
// computes its value eagerly and registers the exact vector-Jacobian product.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "lorahar/numerics/rng.hpp"
#include "lorahar/numerics/tape.hpp"

namespace lorahar {

namespace detail {

inline void require_same_tape(Var a, Var b) {
  if (&a.tape() != &b.tape()) throw TapeError("operands live on different tapes");
}

inline void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " + b.shape_string());
}

inline void require_row_vector(const char* op, const Matrix& x, const Matrix& v) {
  if (v.rows() != 1 || v.cols() != x.cols()) {
    throw DimensionError(std::string(op) + ": expected 1x" + std::to_string(x.cols()) + " row vector, got " + v.shape_string());
  }
}

}  // namespace detail

inline Var matmul(Var a, Var b) {
  detail::require_same_tape(a, b);
  Matrix out = matmul(a.value(), b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Matrix& g, const Matrix&) {
    if (tape.needs_grad(a)) tape.grad_ref(a) += matmul_nt(g, tape.value(b));
    if (tape.needs_grad(b)) tape.grad_ref(b) += matmul_tn(tape.value(a), g);
  });
}

inline Var transpose(Var a) {
  return a.tape().record(transpose(a.value()), {a},
                         [a](Tape& tape, const Matrix& g, const Matrix&) { tape.grad_ref(a) += transpose(g); });
}

inline Var add(Var a, Var b) {
  detail::require_same_tape(a, b);
  detail::require_same_shape("add", a.value(), b.value());
  Matrix out = a.value();
  out += b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape& tape, const Matrix& g, const Matrix&) {
    if (tape.needs_grad(a)) tape.grad_ref(a) += g;
    if (tape.needs_grad(b)) tape.grad_ref(b) += g;
  });
}

inline Var scale(Var a, double s) {
  Matrix out = a.value();
  for (auto& v : out.values()) v *= s;
  return a.tape().record(std::move(out), {a}, [a, s](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& ga = tape.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

/// x + 1·bias, bias a 1×cols row vector.
inline Var add_row(Var x, Var bias) {
  detail::require_same_tape(x, bias);
  detail::require_row_vector("add_row", x.value(), bias.value());
  Matrix out = x.value();
  const Matrix& b = bias.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += b[c];
  return x.tape().record(std::move(out), {x, bias}, [x, bias](Tape& tape, const Matrix& g, const Matrix&) {
    if (tape.needs_grad(x)) tape.grad_ref(x) += g;
    if (tape.needs_grad(bias)) {
      Matrix& gb = tape.grad_ref(bias);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gb[c] += g(r, c);
    }
  });
}

/// x ⊙ (1·gain), gain a 1×cols row vector.
inline Var mul_row(Var x, Var gain) {
  detail::require_same_tape(x, gain);
  detail::require_row_vector("mul_row", x.value(), gain.value());
  Matrix out = x.value();
  const Matrix& w = gain.value();
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) *= w[c];
  return x.tape().record(std::move(out), {x, gain}, [x, gain](Tape& tape, const Matrix& g, const Matrix&) {
    const Matrix& xv = tape.value(x);
    const Matrix& wv = tape.value(gain);
    if (tape.needs_grad(x)) {
      Matrix& gx = tape.grad_ref(x);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gx(r, c) += g(r, c) * wv[c];
    }
    if (tape.needs_grad(gain)) {
      Matrix& gw = tape.grad_ref(gain);
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) gw[c] += g(r, c) * xv(r, c);
    }
  });
}

/// Exact-erf GELU: x·Φ(x).
inline double gelu_value(double x) noexcept { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

inline double gelu_derivative(double x) noexcept {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

inline Var gelu(Var a) {
  Matrix out = a.value();
  for (auto& v : out.values()) v = gelu_value(v);
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Matrix& g, const Matrix&) {
    const Matrix& x = tape.value(a);
    Matrix& ga = tape.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * gelu_derivative(x[i]);
  });
}

inline Var relu(Var a) {
  Matrix out = a.value();
  for (auto& v : out.values()) v = std::max(v, 0.0);
  return a.tape().record(std::move(out), {a}, [a](Tape& tape, const Matrix& g, const Matrix&) {
    const Matrix& x = tape.value(a);
    Matrix& ga = tape.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > 0.0) ga[i] += g[i];
  });
}

/// Row-wise softmax with row-max subtraction.
inline Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto in = x.row(r);
    auto o = out.row(r);
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t c = 0; c < in.size(); ++c) s += (o[c] = std::exp(in[c] - mx));
    for (double& v : o) v /= s;
  }
  return out;
}

namespace detail {

// dx = y ⊙ (g − rowsum(g ⊙ y)) for y = softmax(x), accumulated into dx.
inline void softmax_rows_backward(const Matrix& y, const Matrix& g, Matrix& dx) {
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double dot = 0.0;
    for (std::size_t c = 0; c < y.cols(); ++c) dot += g(r, c) * y(r, c);
    for (std::size_t c = 0; c < y.cols(); ++c) dx(r, c) += y(r, c) * (g(r, c) - dot);
  }
}

}  // namespace detail

inline Var softmax_rows(Var x) {
  return x.tape().record(softmax_rows(x.value()), {x}, [x](Tape& tape, const Matrix& g, const Matrix& y) {
    detail::softmax_rows_backward(y, g, tape.grad_ref(x));
  });
}

namespace detail {

// Standardize each row (or column) of x: y = (x − mean) / sqrt(var + eps), population variance.
inline Matrix standardize(const Matrix& x, double eps, bool by_rows, std::vector<double>& inv_std) {
  const std::size_t groups = by_rows ? x.rows() : x.cols();
  const std::size_t n = by_rows ? x.cols() : x.rows();
  auto at = [&](std::size_t gi, std::size_t k) -> double { return by_rows ? x(gi, k) : x(k, gi); };
  Matrix y(x.rows(), x.cols());
  inv_std.assign(groups, 0.0);
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double mean = 0.0;
    for (std::size_t k = 0; k < n; ++k) mean += at(gi, k);
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double d = at(gi, k) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double s = 1.0 / std::sqrt(var + eps);
    inv_std[gi] = s;
    for (std::size_t k = 0; k < n; ++k) {
      const double v = (at(gi, k) - mean) * s;
      if (by_rows) y(gi, k) = v;
      else y(k, gi) = v;
    }
  }
  return y;
}

// dx = s · (g − mean(g) − y · mean(g ⊙ y)) per group; exact for any eps.
inline void standardize_backward(const Matrix& y, const Matrix& g, const std::vector<double>& inv_std, bool by_rows,
                                 Matrix& dx) {
  const std::size_t groups = by_rows ? y.rows() : y.cols();
  const std::size_t n = by_rows ? y.cols() : y.rows();
  for (std::size_t gi = 0; gi < groups; ++gi) {
    double mg = 0.0, mgy = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double gv = by_rows ? g(gi, k) : g(k, gi);
      const double yv = by_rows ? y(gi, k) : y(k, gi);
      mg += gv;
      mgy += gv * yv;
    }
    mg /= static_cast<double>(n);
    mgy /= static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double gv = by_rows ? g(gi, k) : g(k, gi);
      const double yv = by_rows ? y(gi, k) : y(k, gi);
      const double d = inv_std[gi] * (gv - mg - yv * mgy);
      if (by_rows) dx(gi, k) += d;
      else dx(k, gi) += d;
    }
  }
}

inline Var standardize_var(Var x, double eps, bool by_rows) {
  if (eps <= 0.0) throw ConfigError("normalization eps must be > 0");
  std::vector<double> inv_std;
  Matrix y = standardize(x.value(), eps, by_rows, inv_std);
  return x.tape().record(std::move(y), {x},
                         [x, by_rows, inv_std = std::move(inv_std)](Tape& tape, const Matrix& g, const Matrix& yv) {
                           standardize_backward(yv, g, inv_std, by_rows, tape.grad_ref(x));
                         });
}

}  // namespace detail

/// Per-row standardization (the normalization step of LayerNorm).
inline Var standardize_rows(Var x, double eps) { return detail::standardize_var(x, eps, true); }

/// Per-column standardization over the batch (the normalization step of BatchNorm).
inline Var standardize_cols(Var x, double eps) { return detail::standardize_var(x, eps, false); }

/// LayerNorm over features: gain ⊙ standardize_rows(x) + bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps) {
  return add_row(mul_row(standardize_rows(x, eps), gain), bias);
}

/// Sum of all entries as a 1×1 matrix.
inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape().record(Matrix(1, 1, s), {a}, [a](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& ga = tape.grad_ref(a);
    for (auto& v : ga.values()) v += g[0];
  });
}

/// Inverted dropout; identity when rate == 0.
inline Var dropout(Var a, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must be in [0, 1)");
  if (rate == 0.0) return a;
  Matrix mask(a.rows(), a.cols());
  const double keep = 1.0 / (1.0 - rate);
  for (auto& m : mask.values()) m = rng.uniform() < rate ? 0.0 : keep;
  Matrix out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return a.tape().record(std::move(out), {a}, [a, mask = std::move(mask)](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& ga = tape.grad_ref(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * mask[i];
  });
}

/// Rows of `a` selected by `index` (repeats allowed; backward scatter-adds).
inline Var gather_rows(Var a, std::vector<std::size_t> index) {
  const Matrix& av = a.value();
  Matrix out(index.size(), av.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= av.rows()) throw DimensionError("gather_rows: row " + std::to_string(index[i]) + " out of range for " + av.shape_string());
    std::copy(av.row(index[i]).begin(), av.row(index[i]).end(), out.row(i).begin());
  }
  return a.tape().record(std::move(out), {a}, [a, index = std::move(index)](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& ga = tape.grad_ref(a);
    for (std::size_t i = 0; i < index.size(); ++i) {
      auto src = g.row(i);
      auto dst = ga.row(index[i]);
      for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    }
  });
}

inline Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows of nothing");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    if (p.cols() != cols) throw DimensionError("concat_rows: column mismatch " + p.value().shape_string());
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::size_t r0 = 0;
  for (const Var& p : parts) {
    std::copy(p.value().values().begin(), p.value().values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(r0 * cols));
    r0 += p.rows();
  }
  return parts.front().tape().record(std::move(out), parts, [parts](Tape& tape, const Matrix& g, const Matrix&) {
    std::size_t offset = 0;
    for (const Var& p : parts) {
      const std::size_t n = tape.value(p).size();
      if (tape.needs_grad(p)) {
        Matrix& gp = tape.grad_ref(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[offset + i];
      }
      offset += n;
    }
  });
}

inline Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  if (begin + count > av.cols()) throw DimensionError("slice_cols out of range for " + av.shape_string());
  Matrix out(av.rows(), count);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < count; ++c) out(r, c) = av(r, begin + c);
  return a.tape().record(std::move(out), {a}, [a, begin, count](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& ga = tape.grad_ref(a);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < count; ++c) ga(r, begin + c) += g(r, c);
  });
}

inline Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Matrix& av = a.value();
  if (begin + count > av.rows()) throw DimensionError("slice_rows out of range for " + av.shape_string());
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = begin + i;
  return gather_rows(a, std::move(idx));
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols of nothing");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    if (p.rows() != rows) throw DimensionError("concat_cols: row mismatch " + p.value().shape_string());
    cols += p.cols();
  }
  Matrix out(rows, cols);
  std::size_t c0 = 0;
  for (const Var& p : parts) {
    const Matrix& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, c0 + c) = pv(r, c);
    c0 += pv.cols();
  }
  return parts.front().tape().record(std::move(out), parts, [parts](Tape& tape, const Matrix& g, const Matrix&) {
    std::size_t c0 = 0;
    for (const Var& p : parts) {
      const std::size_t pc = tape.value(p).cols();
      if (tape.needs_grad(p)) {
        Matrix& gp = tape.grad_ref(p);
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t c = 0; c < pc; ++c) gp(r, c) += g(r, c0 + c);
      }
      c0 += pc;
    }
  });
}

/// Mean over consecutive groups of `group` rows: (B·group)×d → B×d.
inline Var mean_pool_rows(Var a, std::size_t group) {
  const Matrix& av = a.value();
  if (group == 0 || av.rows() % group != 0) {
    throw DimensionError("mean_pool_rows: " + std::to_string(av.rows()) + " rows not divisible by group " + std::to_string(group));
  }
  const std::size_t b = av.rows() / group;
  Matrix out(b, av.cols());
  const double inv = 1.0 / static_cast<double>(group);
  for (std::size_t r = 0; r < av.rows(); ++r)
    for (std::size_t c = 0; c < av.cols(); ++c) out(r / group, c) += av(r, c) * inv;
  return a.tape().record(std::move(out), {a}, [a, group, inv](Tape& tape, const Matrix& g, const Matrix&) {
    Matrix& ga = tape.grad_ref(a);
    for (std::size_t r = 0; r < ga.rows(); ++r)
      for (std::size_t c = 0; c < ga.cols(); ++c) ga(r, c) += g(r / group, c) * inv;
  });
}

/// Mean over the listed rows of the squared L2 error: (1/|rows|) Σ_i ||pred_i − target_i||².
inline Var masked_row_mse(Var pred, const Matrix& target, std::vector<std::size_t> rows) {
  const Matrix& p = pred.value();
  detail::require_same_shape("masked_row_mse", p, target);
  if (rows.empty()) throw DataError("masked_row_mse: empty mask");
  double s = 0.0;
  for (std::size_t r : rows) {
    if (r >= p.rows()) throw DimensionError("masked_row_mse: row index out of range");
    for (std::size_t c = 0; c < p.cols(); ++c) {
      const double d = p(r, c) - target(r, c);
      s += d * d;
    }
  }
  const double inv = 1.0 / static_cast<double>(rows.size());
  return pred.tape().record(Matrix(1, 1, s * inv), {pred},
                            [pred, target, rows = std::move(rows), inv](Tape& tape, const Matrix& g, const Matrix&) {
                              const Matrix& pv = tape.value(pred);
                              Matrix& gp = tape.grad_ref(pred);
                              for (std::size_t r : rows)
                                for (std::size_t c = 0; c < pv.cols(); ++c) gp(r, c) += g[0] * 2.0 * inv * (pv(r, c) - target(r, c));
                            });
}

/// Mean over the batch of −log softmax(logits)[label].
inline Var cross_entropy(Var logits, std::vector<int> labels) {
  const Matrix& z = logits.value();
  if (labels.size() != z.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(z.rows()) + " rows");
  }
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= z.cols()) {
      throw DataError("cross_entropy: label " + std::to_string(y) + " outside [0," + std::to_string(z.cols()) + ")");
    }
  }
  Matrix prob = softmax_rows(z);
  double loss = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    loss += (mx + std::log(s)) - row[static_cast<std::size_t>(labels[r])];
  }
  const double inv = 1.0 / static_cast<double>(z.rows());
  return logits.tape().record(Matrix(1, 1, loss * inv), {logits},
                              [logits, labels = std::move(labels), prob = std::move(prob), inv](Tape& tape, const Matrix& g, const Matrix&) {
                                Matrix& gz = tape.grad_ref(logits);
                                for (std::size_t r = 0; r < prob.rows(); ++r)
                                  for (std::size_t c = 0; c < prob.cols(); ++c) {
                                    const double onehot = static_cast<int>(c) == labels[r] ? 1.0 : 0.0;
                                    gz(r, c) += g[0] * inv * (prob(r, c) - onehot);
                                  }
                              });
}

/// Fused multi-head scaled dot-product attention over a batch of sequences.
///
/// q, k, v are (B·T)×d with rows grouped per sequence; head h uses columns
/// [h·d_k, (h+1)·d_k). Returns softmax(Q_h K_hᵀ / √d_k) V_h written back into the
/// head's columns. When `probs` is given it receives the B·n_heads attention
/// matrices (sequence-major).
inline Var attention(Var q, Var k, Var v, std::size_t seq_len, std::size_t n_heads, std::vector<Matrix>* probs = nullptr) {
  const Matrix& Q = q.value();
  const Matrix& K = k.value();
  const Matrix& V = v.value();
  detail::require_same_shape("attention(q,k)", Q, K);
  detail::require_same_shape("attention(q,v)", Q, V);
  if (seq_len == 0 || Q.rows() % seq_len != 0) throw DimensionError("attention: rows not divisible by sequence length");
  if (n_heads == 0 || Q.cols() % n_heads != 0) throw DimensionError("attention: width " + std::to_string(Q.cols()) + " not divisible by heads");
  const std::size_t batch = Q.rows() / seq_len;
  const std::size_t dk = Q.cols() / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dk));

  std::vector<Matrix> saved;
  saved.reserve(batch * n_heads);
  Matrix out(Q.rows(), Q.cols());
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t r0 = b * seq_len;
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t c0 = h * dk;
      Matrix s(seq_len, seq_len);
      for (std::size_t i = 0; i < seq_len; ++i)
        for (std::size_t j = 0; j < seq_len; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dk; ++c) acc += Q(r0 + i, c0 + c) * K(r0 + j, c0 + c);
          s(i, j) = acc * inv_sqrt;
        }
      Matrix p = softmax_rows(s);
      for (std::size_t i = 0; i < seq_len; ++i)
        for (std::size_t j = 0; j < seq_len; ++j) {
          const double pij = p(i, j);
          for (std::size_t c = 0; c < dk; ++c) out(r0 + i, c0 + c) += pij * V(r0 + j, c0 + c);
        }
      saved.push_back(std::move(p));
    }
  }
  if (probs != nullptr) *probs = saved;

  return q.tape().record(
      std::move(out), {q, k, v},
      [q, k, v, seq_len, n_heads, dk, inv_sqrt, batch, saved = std::move(saved)](Tape& tape, const Matrix& g, const Matrix&) {
        const Matrix& Qv = tape.value(q);
        const Matrix& Kv = tape.value(k);
        const Matrix& Vv = tape.value(v);
        const bool gq = tape.needs_grad(q), gk = tape.needs_grad(k), gv = tape.needs_grad(v);
        Matrix* dQ = gq ? &tape.grad_ref(q) : nullptr;
        Matrix* dK = gk ? &tape.grad_ref(k) : nullptr;
        Matrix* dV = gv ? &tape.grad_ref(v) : nullptr;
        for (std::size_t b = 0; b < batch; ++b) {
          const std::size_t r0 = b * seq_len;
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t c0 = h * dk;
            const Matrix& p = saved[b * n_heads + h];
            // dP = dO V_hᵀ
            Matrix dp(seq_len, seq_len);
            for (std::size_t i = 0; i < seq_len; ++i)
              for (std::size_t j = 0; j < seq_len; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < dk; ++c) acc += g(r0 + i, c0 + c) * Vv(r0 + j, c0 + c);
                dp(i, j) = acc;
              }
            if (dV != nullptr) {
              for (std::size_t i = 0; i < seq_len; ++i)
                for (std::size_t j = 0; j < seq_len; ++j) {
                  const double pij = p(i, j);
                  for (std::size_t c = 0; c < dk; ++c) (*dV)(r0 + j, c0 + c) += pij * g(r0 + i, c0 + c);
                }
            }
            if (dQ == nullptr && dK == nullptr) continue;
            Matrix ds(seq_len, seq_len);
            detail::softmax_rows_backward(p, dp, ds);
            for (std::size_t i = 0; i < seq_len; ++i)
              for (std::size_t j = 0; j < seq_len; ++j) {
                const double d = ds(i, j) * inv_sqrt;
                if (d == 0.0) continue;
                for (std::size_t c = 0; c < dk; ++c) {
                  if (dQ != nullptr) (*dQ)(r0 + i, c0 + c) += d * Kv(r0 + j, c0 + c);
                  if (dK != nullptr) (*dK)(r0 + j, c0 + c) += d * Qv(r0 + i, c0 + c);
                }
              }
          }
        }
      });
}

}  // namespace lorahar
