#pragma once

#include <algorithm>
#include <cstddef>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "lorahar/numerics/ops.hpp"

namespace lorahar {

/// Projection slots of an encoder block that can carry an adapter.
enum class LoraTarget { Q, K, V, O, Ffn1, Ffn2 };

inline const std::vector<LoraTarget>& all_lora_targets() {
  static const std::vector<LoraTarget> targets{LoraTarget::Q, LoraTarget::K, LoraTarget::V,
                                               LoraTarget::O, LoraTarget::Ffn1, LoraTarget::Ffn2};
  return targets;
}

inline const char* to_string(LoraTarget t) noexcept {
  switch (t) {
    case LoraTarget::Q: return "q";
    case LoraTarget::K: return "k";
    case LoraTarget::V: return "v";
    case LoraTarget::O: return "o";
    case LoraTarget::Ffn1: return "ffn1";
    case LoraTarget::Ffn2: return "ffn2";
  }
  return "q";
}

inline LoraTarget lora_target_from_string(const std::string& s) {
  for (LoraTarget t : all_lora_targets())
    if (s == to_string(t)) return t;
  throw ConfigError("unknown LoRA target '" + s + "' (expected q,k,v,o,ffn1,ffn2)");
}

/// Which factor starts at zero. Either choice makes the initial update vanish.
enum class LoraInit { AZeroBGaussian, BZeroAGaussian };

inline const char* to_string(LoraInit i) noexcept {
  return i == LoraInit::AZeroBGaussian ? "a_zero_b_gaussian" : "b_zero_a_gaussian";
}

inline LoraInit lora_init_from_string(const std::string& s) {
  if (s == "a_zero_b_gaussian") return LoraInit::AZeroBGaussian;
  if (s == "b_zero_a_gaussian") return LoraInit::BZeroAGaussian;
  throw ConfigError("unknown LoRA init scheme '" + s + "'");
}

struct LoraConfig {
  std::size_t rank = 8;
  double alpha = 16.0;
  std::set<LoraTarget> targets{all_lora_targets().begin(), all_lora_targets().end()};
  LoraInit init = LoraInit::AZeroBGaussian;

  void validate() const {
    if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
    if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be > 0");
    if (targets.empty()) throw ConfigError("LoRA config has no targets");
  }

  /// Rank must stay strictly below the smaller side of every adapted layer.
  void validate_for(std::size_t d_in, std::size_t d_out) const {
    validate();
    if (rank >= std::min(d_in, d_out)) {
      throw ConfigError("LoRA rank " + std::to_string(rank) + " must be < min(" + std::to_string(d_in) + ", " +
                        std::to_string(d_out) + ")");
    }
  }
};

/// Low-rank update for one frozen projection y = x·W, W of shape d_in×d_out.
///
/// Factors follow the column-vector convention: A is r×d_in, B is d_out×r, and
/// the effective update is ΔW = (α/r)·B·A. With row-major activations the
/// adapter branch is therefore (α/r)·x·Aᵀ·Bᵀ.
struct LoraAdapter {
  Parameter a;
  Parameter b;
  std::size_t rank = 0;
  double alpha = 0.0;
  std::string target_id;
  LoraInit init = LoraInit::AZeroBGaussian;
  bool consumed = false;

  double scaling() const noexcept { return alpha / static_cast<double>(rank); }
  std::size_t d_in() const noexcept { return a.value.cols(); }
  std::size_t d_out() const noexcept { return b.value.rows(); }
  std::size_t count() const noexcept { return a.count() + b.count(); }

  /// ΔW = (α/r)·B·A, d_out×d_in.
  Matrix delta() const {
    Matrix d = matmul(b.value, a.value);
    for (auto& v : d.values()) v *= scaling();
    return d;
  }
};

/// Attach a fresh adapter to `base` and freeze it. One factor is zero, the other N(0, 1/r).
inline LoraAdapter lora_init(Parameter& base, const LoraConfig& config, Rng& rng, std::string target_id = {}) {
  const std::size_t d_in = base.value.rows();
  const std::size_t d_out = base.value.cols();
  config.validate_for(d_in, d_out);
  const std::size_t r = config.rank;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(r));
  LoraAdapter ad;
  ad.rank = r;
  ad.alpha = config.alpha;
  ad.init = config.init;
  ad.target_id = target_id.empty() ? base.name : std::move(target_id);
  if (config.init == LoraInit::AZeroBGaussian) {
    ad.a = Parameter(ad.target_id + ".lora_a", Matrix(r, d_in));
    ad.b = Parameter(ad.target_id + ".lora_b", rng.normal_matrix(d_out, r, stddev));
  } else {
    ad.a = Parameter(ad.target_id + ".lora_a", rng.normal_matrix(r, d_in, stddev));
    ad.b = Parameter(ad.target_id + ".lora_b", Matrix(d_out, r));
  }
  base.trainable = false;
  return ad;
}

namespace detail {

inline Var lora_branch(Var x, LoraAdapter& adapter) {
  if (x.cols() != adapter.d_in()) {
    throw DimensionError("LoRA input width " + std::to_string(x.cols()) + " != adapter d_in " + std::to_string(adapter.d_in()));
  }
  Tape& t = x.tape();
  Var xa = matmul(x, transpose(t.parameter(adapter.a)));
  return scale(matmul(xa, transpose(t.parameter(adapter.b))), adapter.scaling());
}

}  // namespace detail

/// y = x·W + (α/r)·x·Aᵀ·Bᵀ without materializing ΔW. Gradients reach only A and B
/// when the base is frozen.
inline Var lora_forward(Var x, Parameter& base, LoraAdapter& adapter) {
  if (base.value.rows() != adapter.d_in() || base.value.cols() != adapter.d_out()) {
    throw DimensionError("adapter " + std::to_string(adapter.d_in()) + "->" + std::to_string(adapter.d_out()) +
                         " does not fit base " + base.value.shape_string());
  }
  Var y = matmul(x, x.tape().parameter(base));
  return add(y, detail::lora_branch(x, adapter));
}

/// Merged dense weight W + ΔWᵀ (row-major convention). Marks the adapter consumed;
/// a second merge of the same adapter is refused since it would double ΔW.
inline Matrix lora_merge(const Parameter& base, LoraAdapter& adapter) {
  if (adapter.consumed) throw ConfigError("adapter '" + adapter.target_id + "' was already merged");
  if (base.value.rows() != adapter.d_in() || base.value.cols() != adapter.d_out()) {
    throw DimensionError("adapter does not fit base " + base.value.shape_string());
  }
  Matrix merged = base.value;
  const Matrix delta = adapter.delta();  // d_out×d_in
  for (std::size_t i = 0; i < merged.rows(); ++i)
    for (std::size_t j = 0; j < merged.cols(); ++j) merged(i, j) += delta(j, i);
  adapter.consumed = true;
  return merged;
}

struct LoraParamCount {
  std::size_t trainable = 0;
  std::size_t full_equivalent = 0;
};

/// Σ r·(d_in + d_out) adapter weights against Σ d_in·d_out dense weights.
inline LoraParamCount lora_param_count(const std::vector<std::pair<std::size_t, std::size_t>>& layer_dims, std::size_t rank) {
  if (rank < 1) throw ConfigError("LoRA rank must be >= 1");
  LoraParamCount c;
  for (const auto& [d_in, d_out] : layer_dims) {
    c.trainable += rank * (d_in + d_out);
    c.full_equivalent += d_in * d_out;
  }
  return c;
}

}  // namespace lorahar
