#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "lorahar/peft/wrap.hpp"

namespace lorahar {

enum class Strategy { Full, Lora, Qlora, FrozenHead };

inline const char* to_string(Strategy s) noexcept {
  switch (s) {
    case Strategy::Full: return "full";
    case Strategy::Lora: return "lora";
    case Strategy::Qlora: return "qlora";
    case Strategy::FrozenHead: return "frozen_head";
  }
  return "full";
}

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "full") return Strategy::Full;
  if (s == "lora") return Strategy::Lora;
  if (s == "qlora") return Strategy::Qlora;
  if (s == "frozen_head" || s == "frozen-head") return Strategy::FrozenHead;
  throw ConfigError("unknown strategy '" + s + "' (expected full, lora, qlora, frozen_head)");
}

inline bool uses_adapters(Strategy s) noexcept { return s == Strategy::Lora || s == Strategy::Qlora; }

/// Mean-pooled features -> Linear -> BatchNorm -> GELU -> Dropout -> Linear.
///
/// BatchNorm uses batch statistics while training and running averages otherwise.
/// In layer-norm mode (training with batch size 1) it normalizes each row instead.
struct ClassifierHead {
  Parameter w1, b1;
  Parameter norm_gain, norm_bias;
  Parameter w2, b2;
  Matrix running_mean;
  Matrix running_var;
  double dropout = 0.1;
  double momentum = 0.1;
  double eps = 1e-5;
  bool layer_norm_mode = false;

  static ClassifierHead create(std::size_t d, std::size_t hidden, std::size_t classes, double dropout, Rng& rng) {
    ClassifierHead h;
    h.w1 = Parameter("head.w1", rng.normal_matrix(d, hidden, 1.0 / std::sqrt(static_cast<double>(d))));
    h.b1 = Parameter("head.b1", Matrix(1, hidden));
    h.norm_gain = Parameter("head.norm.gain", Matrix(1, hidden, 1.0));
    h.norm_bias = Parameter("head.norm.bias", Matrix(1, hidden));
    h.w2 = Parameter("head.w2", rng.normal_matrix(hidden, classes, 1.0 / std::sqrt(static_cast<double>(hidden))));
    h.b2 = Parameter("head.b2", Matrix(1, classes));
    h.running_mean = Matrix(1, hidden);
    h.running_var = Matrix(1, hidden, 1.0);
    h.dropout = dropout;
    return h;
  }

  std::size_t in_dim() const noexcept { return w1.value.rows(); }
  std::size_t n_classes() const noexcept { return w2.value.cols(); }

  /// Logits B×K for pooled features B×d. `rng` is only used for dropout in training mode.
  Var forward(Var pooled, bool training, Rng* rng = nullptr) {
    if (pooled.cols() != in_dim()) {
      throw DimensionError("head expects " + std::to_string(in_dim()) + " features, got " + std::to_string(pooled.cols()));
    }
    Tape& t = pooled.tape();
    Var h = add_row(matmul(pooled, t.parameter(w1)), t.parameter(b1));
    Var normed;
    if (layer_norm_mode) {
      normed = standardize_rows(h, eps);
    } else if (training && h.rows() > 1) {
      update_running_stats(h.value());
      normed = standardize_cols(h, eps);
    } else {
      Matrix shift(1, running_mean.cols()), inv(1, running_mean.cols());
      for (std::size_t j = 0; j < shift.cols(); ++j) {
        shift(0, j) = -running_mean(0, j);
        inv(0, j) = 1.0 / std::sqrt(running_var(0, j) + eps);
      }
      normed = mul_row(add_row(h, t.constant(std::move(shift))), t.constant(std::move(inv)));
    }
    Var a = gelu(add_row(mul_row(normed, t.parameter(norm_gain)), t.parameter(norm_bias)));
    if (training && dropout > 0.0) {
      if (rng == nullptr) throw ConfigError("training-mode dropout needs an Rng");
      a = dropout_op(a, *rng);
    }
    return add_row(matmul(a, t.parameter(w2)), t.parameter(b2));
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    f(w1);
    f(b1);
    f(norm_gain);
    f(norm_bias);
    f(w2);
    f(b2);
  }

 private:
  Var dropout_op(Var a, Rng& rng) const { return lorahar::dropout(a, dropout, rng); }

  void update_running_stats(const Matrix& h) {
    const double n = static_cast<double>(h.rows());
    for (std::size_t j = 0; j < h.cols(); ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < h.rows(); ++i) mean += h(i, j);
      mean /= n;
      double var = 0.0;
      for (std::size_t i = 0; i < h.rows(); ++i) var += (h(i, j) - mean) * (h(i, j) - mean);
      var /= (n - 1.0);  // unbiased, as running estimates usually are
      running_mean(0, j) = (1.0 - momentum) * running_mean(0, j) + momentum * mean;
      running_var(0, j) = (1.0 - momentum) * running_var(0, j) + momentum * var;
    }
  }
};

/// Mean-pool each group of `seq_len` token rows and classify.
inline Var pool_and_classify(Var encoded, std::size_t seq_len, ClassifierHead& head, bool training, Rng* rng = nullptr) {
  if (seq_len == 0 || encoded.rows() % seq_len != 0) throw DimensionError("pool_and_classify: rows not a multiple of seq_len");
  return head.forward(mean_pool_rows(encoded, seq_len), training, rng);
}

/// Pretrained backbone plus classification head.
struct Classifier {
  Backbone backbone;
  ClassifierHead head;

  static Classifier create(Backbone backbone, Rng& head_rng) {
    Classifier c;
    const ModelConfig& cfg = backbone.config;
    c.head = ClassifierHead::create(cfg.embed_dim, cfg.head_hidden, cfg.n_classes, cfg.head_dropout, head_rng);
    c.backbone = std::move(backbone);
    return c;
  }

  const ModelConfig& config() const noexcept { return backbone.config; }

  Var logits(Tape& tape, const std::vector<const Matrix*>& windows, bool training, Rng* rng = nullptr) {
    Var enc = backbone.forward(tape, windows);
    return pool_and_classify(enc, backbone.config.num_tokens(), head, training, rng);
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    backbone.for_each_parameter(f);
    head.for_each_parameter(f);
  }
};

/// Set trainable flags per strategy and return the trainable set.
///   full        -> every parameter
///   frozen_head -> head only
///   lora, qlora -> adapter factors and head
inline std::vector<Parameter*> select_trainable(Classifier& model, Strategy strategy) {
  const bool wrapped = model.backbone.wrapped;
  switch (strategy) {
    case Strategy::Full:
    case Strategy::FrozenHead:
      if (wrapped) throw ConfigError(std::string("strategy '") + to_string(strategy) + "' needs an unwrapped backbone");
      break;
    case Strategy::Lora:
      if (!wrapped || model.backbone.quantized) throw ConfigError("strategy 'lora' needs a backbone wrapped without quantization");
      break;
    case Strategy::Qlora:
      if (!wrapped || !model.backbone.quantized) throw ConfigError("strategy 'qlora' needs a quantized, wrapped backbone");
      break;
  }
  model.backbone.for_each_parameter([&](Parameter& p) { p.trainable = strategy == Strategy::Full; });
  if (uses_adapters(strategy)) {
    model.backbone.for_each_projection([](LoraTarget, Projection& p) {
      if (p.adapter) {
        p.adapter->a.trainable = true;
        p.adapter->b.trainable = true;
      }
    });
  }
  model.head.for_each_parameter([](Parameter& p) { p.trainable = true; });
  std::vector<Parameter*> out;
  model.for_each_parameter([&](Parameter& p) {
    if (p.trainable) out.push_back(&p);
  });
  return out;
}

/// Prepare a classifier for `strategy`: wrap (and quantize) the backbone when needed,
/// then select the trainable set.
inline std::vector<Parameter*> prepare_strategy(Classifier& model, Strategy strategy, const LoraConfig* lora, Rng& lora_rng,
                                                WrapOptions wrap = {}) {
  if (uses_adapters(strategy)) {
    if (lora == nullptr) throw ConfigError(std::string("strategy '") + to_string(strategy) + "' needs a LoRA config");
    wrap.quantize = strategy == Strategy::Qlora;
    wrap_model(model.backbone, *lora, lora_rng, wrap);
  } else if (lora != nullptr) {
    throw ConfigError(std::string("strategy '") + to_string(strategy) + "' does not take LoRA settings");
  }
  return select_trainable(model, strategy);
}

}  // namespace lorahar
