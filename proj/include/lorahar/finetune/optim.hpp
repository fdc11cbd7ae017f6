#pragma once

#include <cmath>
#include <map>
#include <vector>

#include "lorahar/numerics/tape.hpp"

namespace lorahar {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias-corrected moments. Moment buffers exist only for parameters that
/// were trainable when first stepped; frozen parameters are never touched.
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void step(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) {
      if (!p->trainable) continue;
      if (!p->grad.all_finite()) throw NumericError("non-finite gradient in parameter '" + p->name + "'");
      if (!p->grad.same_shape(p->value)) throw DimensionError("gradient shape mismatch in parameter '" + p->name + "'");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (Parameter* p : params) {
      if (!p->trainable) continue;
      auto [it, fresh] = state_.try_emplace(p);
      if (fresh) {
        it->second.m = Matrix(p->value.rows(), p->value.cols());
        it->second.v = Matrix(p->value.rows(), p->value.cols());
      }
      Matrix& m = it->second.m;
      Matrix& v = it->second.v;
      for (std::size_t i = 0; i < p->value.size(); ++i) {
        const double g = p->grad[i];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
        p->value[i] -= cfg_.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps);
      }
    }
  }

  static void zero_grad(const std::vector<Parameter*>& params) {
    for (Parameter* p : params) p->zero_grad();
  }

  bool has_state(const Parameter* p) const { return state_.count(p) != 0; }
  std::size_t state_size() const noexcept { return state_.size(); }
  long steps() const noexcept { return t_; }
  const AdamConfig& config() const noexcept { return cfg_; }

 private:
  struct Moments {
    Matrix m, v;
  };
  AdamConfig cfg_;
  std::map<const Parameter*, Moments> state_;
  long t_ = 0;
};

}  // namespace lorahar
