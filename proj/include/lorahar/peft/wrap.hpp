#pragma once

#include <cstddef>

#include "lorahar/model/mae.hpp"

namespace lorahar {

struct WrapOptions {
  bool quantize = false;
  std::size_t block_size = 64;
  bool double_quant = false;
  std::size_t group_size = 256;
};

/// Freeze the backbone and attach an adapter to every targeted projection of every
/// encoder block. With `quantize`, targeted base weights are replaced by NF4 storage
/// (the dense copy is dropped) and all other backbone tensors are marked as
/// high-precision exceptions.
inline void wrap_model(Backbone& backbone, const LoraConfig& config, Rng& rng, const WrapOptions& opts = {}) {
  if (backbone.wrapped) throw ConfigError("model is already wrapped with adapters");
  config.validate();
  for (auto& block : backbone.blocks)
    for (LoraTarget t : config.targets) config.validate_for(block.projection(t).d_in, block.projection(t).d_out);
  backbone.for_each_parameter([&](Parameter& p) {
    p.trainable = false;
    if (opts.quantize) p.precision = PrecisionClass::HighPrecisionException;
  });
  for (auto& block : backbone.blocks) {
    for (LoraTarget t : config.targets) {
      Projection& proj = block.projection(t);
      proj.adapter = lora_init(proj.weight, config, rng, proj.weight.name);
    }
  }
  if (opts.quantize) {
    for (auto& block : backbone.blocks) {
      for (LoraTarget t : config.targets) {
        Projection& proj = block.projection(t);
        proj.quantized = quantize_nf4(proj.weight.value, opts.block_size, opts.double_quant, opts.group_size);
        proj.weight.precision = PrecisionClass::QuantizedNf4;
        proj.weight.value = Matrix();
        proj.weight.grad = Matrix();
      }
    }
    backbone.quantized = true;
  }
  backbone.wrapped = true;
}

inline void wrap_model(Backbone& backbone, const LoraConfig& config, bool quantize, Rng& rng) {
  WrapOptions o;
  o.quantize = quantize;
  wrap_model(backbone, config, rng, o);
}

inline std::size_t adapter_count(Backbone& backbone) {
  std::size_t n = 0;
  backbone.for_each_projection([&](LoraTarget, Projection& p) { n += p.adapter ? 1 : 0; });
  return n;
}

/// Fold every adapter into a dense weight (dequantizing first when needed) and
/// return the backbone to its unwrapped, dense form.
inline void merge_adapters(Backbone& backbone) {
  backbone.for_each_projection([](LoraTarget, Projection& p) {
    if (!p.adapter) return;
    if (p.quantized) {
      Parameter dense(p.weight.name, dequantize_nf4(*p.quantized), false);
      p.weight.value = lora_merge(dense, *p.adapter);
      p.quantized.reset();
    } else {
      p.weight.value = lora_merge(p.weight, *p.adapter);
    }
    p.weight.grad = Matrix(p.weight.value.rows(), p.weight.value.cols());
    p.weight.precision = PrecisionClass::Full;
    p.adapter.reset();
  });
  backbone.for_each_parameter([](Parameter& p) { p.precision = PrecisionClass::Full; });
  backbone.wrapped = false;
  backbone.quantized = false;
}

}  // namespace lorahar
