#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "lorahar/model/transformer.hpp"

namespace lorahar {

/// Partition of token positions into masked and visible sets, both ascending.
struct MaskSpec {
  std::vector<std::size_t> masked;
  std::vector<std::size_t> visible;
  std::size_t total = 0;

  friend bool operator==(const MaskSpec&, const MaskSpec&) = default;
};

/// round-half-up(m·T) masked tokens.
inline std::size_t mask_count(std::size_t tokens, double ratio) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(tokens) + 0.5));
}

/// Uniformly random subset of round(m·T) positions, drawn by a partial Fisher-Yates shuffle.
inline MaskSpec random_mask(std::size_t tokens, double ratio, Rng& rng) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must lie in (0, 1)");
  if (tokens < 2) throw ConfigError("masking needs at least 2 tokens");
  const std::size_t n = mask_count(tokens, ratio);
  if (n == 0 || n == tokens) {
    throw ConfigError("degenerate mask: round(" + std::to_string(ratio) + " * " + std::to_string(tokens) + ") = " + std::to_string(n));
  }
  std::vector<std::size_t> idx(tokens);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(tokens - i));
    std::swap(idx[i], idx[j]);
  }
  MaskSpec m;
  m.total = tokens;
  m.masked.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n));
  m.visible.assign(idx.begin() + static_cast<std::ptrdiff_t>(n), idx.end());
  std::sort(m.masked.begin(), m.masked.end());
  std::sort(m.visible.begin(), m.visible.end());
  return m;
}

/// Stack the patch tokens of several windows: (B·T)×(P·C).
inline Matrix stack_patches(const std::vector<const Matrix*>& windows, std::size_t patch_len) {
  if (windows.empty()) throw DimensionError("stack_patches: empty batch");
  const Matrix first = patchify(*windows.front(), patch_len);
  Matrix out(first.rows() * windows.size(), first.cols());
  std::size_t offset = 0;
  for (const Matrix* w : windows) {
    if (!w->same_shape(*windows.front())) throw DimensionError("stack_patches: windows differ in shape");
    std::copy(w->values().begin(), w->values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(offset));
    offset += w->size();
  }
  return out;
}

/// Patch embedding plus encoder: the part of the network kept for fine-tuning.
struct Backbone {
  ModelConfig config;
  Parameter patch_weight;
  Parameter patch_bias;
  std::vector<EncoderBlock> blocks;
  Matrix positions;
  bool wrapped = false;
  bool quantized = false;
  BufferMeter meter;

  static Backbone create(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    Backbone b;
    b.config = cfg;
    const std::size_t pd = cfg.patch_dim();
    b.patch_weight = Parameter("embed.weight", rng.normal_matrix(pd, cfg.embed_dim, 1.0 / std::sqrt(static_cast<double>(pd))));
    b.patch_bias = Parameter("embed.bias", Matrix(1, cfg.embed_dim));
    for (std::size_t i = 0; i < cfg.n_enc_layers; ++i) b.blocks.push_back(EncoderBlock::create(cfg, rng, "enc." + std::to_string(i)));
    b.positions = sinusoidal_positions(cfg.num_tokens(), cfg.embed_dim);
    return b;
  }

  /// Token embeddings with positions for stacked patches (B·T)×(P·C).
  Var embed(Tape& tape, const Matrix& patches) {
    return embed_patches(tape.constant(patches), tape.parameter(patch_weight), tape.parameter(patch_bias), positions);
  }

  Var encode(Var tokens, std::size_t seq_len) {
    return encoder_forward(tokens, blocks, seq_len, config.n_heads, config.ln_eps, &meter);
  }

  /// Embed and encode every token of a batch of windows (no masking).
  Var forward(Tape& tape, const std::vector<const Matrix*>& windows) {
    meter.begin_pass();
    return encode(embed(tape, stack_patches(windows, config.patch_len)), config.num_tokens());
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    f(patch_weight);
    f(patch_bias);
    for (auto& b : blocks) b.for_each_parameter(f);
  }

  template <typename F>
  void for_each_projection(F&& f) {
    for (auto& b : blocks) b.for_each_projection(f);
  }
};

/// MAE reconstruction branch: mask token, decoder blocks and a linear map back to patch space.
struct MaeDecoder {
  Parameter mask_token;
  std::vector<EncoderBlock> blocks;
  Projection out;
  Parameter out_bias;
  Matrix positions;

  static MaeDecoder create(const ModelConfig& cfg, Rng& rng) {
    MaeDecoder d;
    d.mask_token = Parameter("dec.mask_token", rng.normal_matrix(1, cfg.embed_dim, 0.02));
    for (std::size_t i = 0; i < cfg.n_dec_layers; ++i) d.blocks.push_back(EncoderBlock::create(cfg, rng, "dec." + std::to_string(i)));
    d.out = Projection("dec.out", cfg.embed_dim, cfg.patch_dim(), rng);
    d.out_bias = Parameter("dec.out_bias", Matrix(1, cfg.patch_dim()));
    d.positions = sinusoidal_positions(cfg.num_tokens(), cfg.embed_dim);
    return d;
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    f(mask_token);
    for (auto& b : blocks) b.for_each_parameter(f);
    out.for_each_parameter(f);
    f(out_bias);
  }
};

/// Rebuild the full token sequence (visible encodings + mask token at masked slots),
/// run the decoder and project every token back to patch space: (B·T)×(P·C).
inline Var mae_decode(Var encoded_visible, const std::vector<MaskSpec>& masks, MaeDecoder& decoder, const ModelConfig& cfg,
                      BufferMeter* meter = nullptr) {
  if (masks.empty()) throw DimensionError("mae_decode: no masks");
  const std::size_t tokens = masks.front().total;
  const std::size_t n_vis = masks.front().visible.size();
  if (encoded_visible.rows() != masks.size() * n_vis) {
    throw DimensionError("mae_decode: " + std::to_string(encoded_visible.rows()) + " encoded rows for " + std::to_string(masks.size()) +
                         " windows with " + std::to_string(n_vis) + " visible tokens");
  }
  Tape& tape = encoded_visible.tape();
  const std::size_t mask_row = masks.size() * n_vis;
  std::vector<std::size_t> index;
  index.reserve(masks.size() * tokens);
  for (std::size_t b = 0; b < masks.size(); ++b) {
    const MaskSpec& m = masks[b];
    if (m.total != tokens || m.visible.size() != n_vis) throw DimensionError("mae_decode: masks in a batch must share their sizes");
    std::vector<std::size_t> slot(tokens, mask_row);
    for (std::size_t r = 0; r < m.visible.size(); ++r) {
      if (m.visible[r] >= tokens) throw DimensionError("mae_decode: visible index out of range");
      slot[m.visible[r]] = b * n_vis + r;
    }
    for (std::size_t mi : m.masked)
      if (mi >= tokens) throw DimensionError("mae_decode: masked index out of range");
    index.insert(index.end(), slot.begin(), slot.end());
  }
  Var combined = concat_rows({encoded_visible, tape.parameter(decoder.mask_token)});
  Var full = gather_rows(combined, std::move(index));
  full = add(full, tape.constant(tile_rows(decoder.positions, masks.size())));
  if (!decoder.blocks.empty()) full = encoder_forward(full, decoder.blocks, tokens, cfg.n_heads, cfg.ln_eps, meter);
  return add_row(decoder.out.apply(full, meter), tape.parameter(decoder.out_bias));
}

/// Mean over masked tokens of the squared L2 reconstruction error; visible tokens contribute nothing.
inline Var mae_loss(Var pred, const Matrix& target, const std::vector<MaskSpec>& masks) {
  if (masks.empty()) throw DataError("mae_loss: no masks");
  const std::size_t tokens = masks.front().total;
  std::vector<std::size_t> rows;
  for (std::size_t b = 0; b < masks.size(); ++b) {
    if (masks[b].masked.empty()) throw DataError("mae_loss: empty mask");
    for (std::size_t m : masks[b].masked) rows.push_back(b * tokens + m);
  }
  return masked_row_mse(pred, target, std::move(rows));
}

inline Var mae_loss(Var pred, const Matrix& target, const MaskSpec& mask) { return mae_loss(pred, target, std::vector<MaskSpec>{mask}); }

/// Backbone plus decoder, trained with the masked-reconstruction objective.
struct MaeModel {
  Backbone backbone;
  MaeDecoder decoder;

  static MaeModel create(const ModelConfig& cfg, Rng& rng) {
    MaeModel m;
    m.backbone = Backbone::create(cfg, rng);
    m.decoder = MaeDecoder::create(cfg, rng);
    return m;
  }

  const ModelConfig& config() const noexcept { return backbone.config; }

  /// Encode only the visible tokens, then reconstruct all of them.
  Var reconstruct(Tape& tape, const Matrix& patches, const std::vector<MaskSpec>& masks) {
    const std::size_t tokens = config().num_tokens();
    if (masks.empty() || patches.rows() != masks.size() * tokens) throw DimensionError("reconstruct: mask count does not match batch");
    backbone.meter.begin_pass();
    Var all = backbone.embed(tape, patches);
    std::vector<std::size_t> vis_rows;
    for (std::size_t b = 0; b < masks.size(); ++b)
      for (std::size_t t : masks[b].visible) vis_rows.push_back(b * tokens + t);
    Var encoded = backbone.encode(gather_rows(all, std::move(vis_rows)), masks.front().visible.size());
    return mae_decode(encoded, masks, decoder, config(), &backbone.meter);
  }

  Var loss(Tape& tape, const Matrix& patches, const std::vector<MaskSpec>& masks) {
    return mae_loss(reconstruct(tape, patches, masks), patches, masks);
  }

  template <typename F>
  void for_each_parameter(F&& f) {
    backbone.for_each_parameter(f);
    decoder.for_each_parameter(f);
  }
};

}  // namespace lorahar
