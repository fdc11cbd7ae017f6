#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lorahar/model/config.hpp"
#include "lorahar/numerics/ops.hpp"
#include "lorahar/peft/nf4.hpp"

namespace lorahar {

/// A bias-free linear map y = x·W (W is d_in×d_out) that may carry a LoRA adapter
/// and may hold its frozen weight in NF4 form instead of dense.
struct Projection {
  Parameter weight;
  std::optional<LoraAdapter> adapter;
  std::optional<QuantizedMatrix> quantized;
  std::size_t d_in = 0;
  std::size_t d_out = 0;

  Projection() = default;
  Projection(std::string name, std::size_t in, std::size_t out, Rng& rng)
      : weight(std::move(name), rng.normal_matrix(in, out, 1.0 / std::sqrt(static_cast<double>(in)))), d_in(in), d_out(out) {}

  Var apply(Var x, BufferMeter* meter = nullptr) {
    if (x.cols() != d_in) {
      throw DimensionError(weight.name + ": input " + x.value().shape_string() + " does not fit " + std::to_string(d_in) + "x" +
                           std::to_string(d_out));
    }
    if (quantized) {
      if (adapter) return qlora_forward(x, *quantized, *adapter, meter);
      Matrix w_hat = dequantize_nf4(*quantized);
      if (meter != nullptr) meter->add(w_hat.size() * sizeof(double));
      return matmul(x, x.tape().constant(std::move(w_hat)));
    }
    if (adapter) return lora_forward(x, weight, *adapter);
    return matmul(x, x.tape().parameter(weight));
  }

  /// Dense weight as used by the forward pass (dequantized when stored in NF4).
  Matrix effective_base() const { return quantized ? dequantize_nf4(*quantized) : weight.value; }

  std::size_t base_count() const noexcept { return d_in * d_out; }

  template <typename F>
  void for_each_parameter(F&& f) {
    if (!quantized) f(weight);
    if (adapter) {
      f(adapter->a);
      f(adapter->b);
    }
  }
};

/// Pre-norm transformer block: Z + MSA(LN(Z)), then + FFN(LN(·)).
struct EncoderBlock {
  Parameter ln1_gain, ln1_bias;
  Projection q, k, v, o;
  Parameter ln2_gain, ln2_bias;
  Projection ffn1;
  Parameter ffn1_bias;
  Projection ffn2;
  Parameter ffn2_bias;

  static EncoderBlock create(const ModelConfig& cfg, Rng& rng, const std::string& prefix) {
    const std::size_t d = cfg.embed_dim, h = cfg.ffn_hidden;
    EncoderBlock b;
    b.ln1_gain = Parameter(prefix + ".ln1.gain", Matrix(1, d, 1.0));
    b.ln1_bias = Parameter(prefix + ".ln1.bias", Matrix(1, d));
    b.q = Projection(prefix + ".attn.q", d, d, rng);
    b.k = Projection(prefix + ".attn.k", d, d, rng);
    b.v = Projection(prefix + ".attn.v", d, d, rng);
    b.o = Projection(prefix + ".attn.o", d, d, rng);
    b.ln2_gain = Parameter(prefix + ".ln2.gain", Matrix(1, d, 1.0));
    b.ln2_bias = Parameter(prefix + ".ln2.bias", Matrix(1, d));
    b.ffn1 = Projection(prefix + ".ffn.w1", d, h, rng);
    b.ffn1_bias = Parameter(prefix + ".ffn.b1", Matrix(1, h));
    b.ffn2 = Projection(prefix + ".ffn.w2", h, d, rng);
    b.ffn2_bias = Parameter(prefix + ".ffn.b2", Matrix(1, d));
    return b;
  }

  Projection& projection(LoraTarget t) {
    switch (t) {
      case LoraTarget::Q: return q;
      case LoraTarget::K: return k;
      case LoraTarget::V: return v;
      case LoraTarget::O: return o;
      case LoraTarget::Ffn1: return ffn1;
      case LoraTarget::Ffn2: return ffn2;
    }
    return q;
  }

  template <typename F>
  void for_each_projection(F&& f) {
    for (LoraTarget t : all_lora_targets()) f(t, projection(t));
  }

  /// Every live Parameter: dense weights, adapters, biases, norm affine terms.
  template <typename F>
  void for_each_parameter(F&& f) {
    f(ln1_gain);
    f(ln1_bias);
    q.for_each_parameter(f);
    k.for_each_parameter(f);
    v.for_each_parameter(f);
    o.for_each_parameter(f);
    f(ln2_gain);
    f(ln2_bias);
    ffn1.for_each_parameter(f);
    f(ffn1_bias);
    ffn2.for_each_parameter(f);
    f(ffn2_bias);
  }
};

/// Split an L×C window into L/P time-major tokens of width P·C; each token holds
/// P consecutive samples of all channels, sample by sample.
inline Matrix patchify(const Matrix& window, std::size_t patch_len) {
  if (patch_len == 0 || window.rows() % patch_len != 0) {
    throw ConfigError("patch length " + std::to_string(patch_len) + " does not divide window length " + std::to_string(window.rows()));
  }
  const std::size_t tokens = window.rows() / patch_len;
  // Row-major L×C regrouped as (L/P)×(P·C) is the same value sequence.
  return Matrix(tokens, patch_len * window.cols(), std::vector<double>(window.values().begin(), window.values().end()));
}

inline Matrix unpatchify(const Matrix& patches, std::size_t patch_len, std::size_t channels) {
  if (channels == 0 || patches.cols() != patch_len * channels) {
    throw DimensionError("unpatchify: token width " + std::to_string(patches.cols()) + " != P*C");
  }
  return Matrix(patches.rows() * patch_len, channels, std::vector<double>(patches.values().begin(), patches.values().end()));
}

/// Fixed sinusoidal encodings, T×d: sin on even columns, cos on odd ones.
inline Matrix sinusoidal_positions(std::size_t tokens, std::size_t d) {
  Matrix pe(tokens, d);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
      pe(t, i) = (i % 2 == 0) ? std::sin(static_cast<double>(t) * freq) : std::cos(static_cast<double>(t) * freq);
    }
  }
  return pe;
}

/// Tile a T×d block `times` times vertically.
inline Matrix tile_rows(const Matrix& block, std::size_t times) {
  Matrix out(block.rows() * times, block.cols());
  for (std::size_t r = 0; r < times; ++r)
    std::copy(block.values().begin(), block.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(r * block.size()));
  return out;
}

/// z_i = patch_i·W_embed + b + p_i for a batch of stacked token rows.
inline Var embed_patches(Var patches, Var w_embed, Var b_embed, const Matrix& positions) {
  if (patches.cols() != w_embed.rows()) {
    throw DimensionError("embed_patches: patch width " + std::to_string(patches.cols()) + " != embedding input " + std::to_string(w_embed.rows()));
  }
  if (positions.rows() == 0 || patches.rows() % positions.rows() != 0 || positions.cols() != w_embed.cols()) {
    throw DimensionError("embed_patches: positional table " + positions.shape_string() + " does not fit");
  }
  Var z = add_row(matmul(patches, w_embed), b_embed);
  return add(z, patches.tape().constant(tile_rows(positions, patches.rows() / positions.rows())));
}

/// softmax(QKᵀ/√d_k)V per head, concatenated, then the output projection.
inline Var multi_head_attention(Var z, EncoderBlock& block, std::size_t seq_len, std::size_t n_heads, BufferMeter* meter = nullptr,
                                std::vector<Matrix>* probs = nullptr) {
  Var qv = block.q.apply(z, meter);
  Var kv = block.k.apply(z, meter);
  Var vv = block.v.apply(z, meter);
  return block.o.apply(attention(qv, kv, vv, seq_len, n_heads, probs), meter);
}

/// σ(Z·W1 + b1)·W2 + b2 with exact GELU.
inline Var feed_forward(Var z, EncoderBlock& block, BufferMeter* meter = nullptr) {
  Tape& t = z.tape();
  Var hidden = gelu(add_row(block.ffn1.apply(z, meter), t.parameter(block.ffn1_bias)));
  return add_row(block.ffn2.apply(hidden, meter), t.parameter(block.ffn2_bias));
}

inline Var encoder_block_forward(Var z, EncoderBlock& block, std::size_t seq_len, std::size_t n_heads, double eps,
                                 BufferMeter* meter = nullptr) {
  Tape& t = z.tape();
  Var ln1 = layer_norm(z, t.parameter(block.ln1_gain), t.parameter(block.ln1_bias), eps);
  Var z_hat = add(z, multi_head_attention(ln1, block, seq_len, n_heads, meter));
  Var ln2 = layer_norm(z_hat, t.parameter(block.ln2_gain), t.parameter(block.ln2_bias), eps);
  return add(z_hat, feed_forward(ln2, block, meter));
}

/// Stack of pre-norm residual blocks over (B·seq_len)×d token rows.
inline Var encoder_forward(Var tokens, std::vector<EncoderBlock>& blocks, std::size_t seq_len, std::size_t n_heads, double eps,
                           BufferMeter* meter = nullptr) {
  if (blocks.empty()) throw ConfigError("encoder_forward needs at least one block");
  Var z = tokens;
  for (auto& b : blocks) z = encoder_block_forward(z, b, seq_len, n_heads, eps, meter);
  return z;
}

}  // namespace lorahar
