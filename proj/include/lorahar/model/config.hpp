#pragma once

#include <cstddef>
#include <string>

#include "lorahar/numerics/errors.hpp"

namespace lorahar {

/// Shape of the patch-token transformer and its MAE decoder.
struct ModelConfig {
  std::size_t window_len = 128;  // L
  std::size_t channels = 6;      // C
  std::size_t patch_len = 16;    // P
  std::size_t embed_dim = 64;    // d
  std::size_t ffn_hidden = 128;  // h
  std::size_t n_heads = 4;
  std::size_t n_enc_layers = 6;
  std::size_t n_dec_layers = 2;
  double mask_ratio = 0.75;  // m
  std::size_t n_classes = 6;  // K
  std::size_t head_hidden = 64;
  double head_dropout = 0.1;
  double ln_eps = 1e-5;

  std::size_t num_tokens() const noexcept { return window_len / patch_len; }
  std::size_t patch_dim() const noexcept { return patch_len * channels; }
  std::size_t head_dim() const noexcept { return embed_dim / n_heads; }

  void validate() const {
    if (patch_len == 0 || window_len % patch_len != 0) {
      throw ConfigError("patch length " + std::to_string(patch_len) + " must divide window length " + std::to_string(window_len));
    }
    if (channels == 0) throw ConfigError("channels must be >= 1");
    if (embed_dim == 0 || n_heads == 0 || embed_dim % n_heads != 0) {
      throw ConfigError("embed_dim " + std::to_string(embed_dim) + " must be divisible by n_heads " + std::to_string(n_heads));
    }
    if (ffn_hidden == 0) throw ConfigError("ffn_hidden must be >= 1");
    if (n_enc_layers == 0) throw ConfigError("encoder needs at least one block");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("mask ratio must lie in (0, 1)");
    if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
    if (head_hidden == 0) throw ConfigError("head_hidden must be >= 1");
    if (head_dropout < 0.0 || head_dropout >= 1.0) throw ConfigError("head dropout must be in [0, 1)");
    if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be > 0");
  }
};

}  // namespace lorahar
