#pragma once

#include <cstddef>

#include "lorahar/finetune/head.hpp"

namespace lorahar {

struct ParameterCount {
  std::size_t trainable = 0;
  std::size_t total = 0;
};

/// Exact enumeration over backbone, adapters and head. Quantized weights count by
/// their logical shape; running statistics are buffers, not parameters.
inline ParameterCount count_parameters(Classifier& model) {
  ParameterCount c;
  model.for_each_parameter([&](Parameter& p) {
    c.total += p.count();
    if (p.trainable) c.trainable += p.count();
  });
  model.backbone.for_each_projection([&](LoraTarget, Projection& p) {
    if (p.quantized) c.total += p.quantized->count();
  });
  return c;
}

/// Memory figures for one model under one strategy.
///
/// `*_stored` bytes are what this library holds (8 bytes per dense value); the
/// `*_fp32` figures count dense values at 4 bytes for comparison with float32
/// deployments. NF4 tensors count their codes plus scale metadata in both.
struct ResourceReport {
  std::size_t trainable_params = 0;
  std::size_t total_params = 0;
  std::size_t frozen_params = 0;
  std::size_t full_values = 0;       // frozen dense values in the full class
  std::size_t exception_values = 0;  // frozen dense values kept in high precision next to NF4
  std::size_t nf4_values = 0;
  std::size_t nf4_bytes = 0;
  std::size_t frozen_bytes_stored = 0;
  std::size_t frozen_bytes_fp32 = 0;
  std::size_t frozen_bytes_fp32_dense = 0;  // all frozen values at 4 bytes, as if nothing were quantized
  std::size_t trainable_bytes_stored = 0;
  std::size_t trainable_bytes_fp32 = 0;
  std::size_t buffer_bytes_peak = 0;
  double wall_seconds = 0.0;
};

inline ResourceReport measure_memory(Classifier& model, double wall_seconds = 0.0) {
  ResourceReport r;
  model.for_each_parameter([&](Parameter& p) {
    const std::size_t n = p.count();
    r.total_params += n;
    if (p.trainable) {
      r.trainable_params += n;
      r.trainable_bytes_stored += 8 * n;
      r.trainable_bytes_fp32 += 4 * n;
      return;
    }
    r.frozen_params += n;
    if (p.precision == PrecisionClass::HighPrecisionException) r.exception_values += n;
    else r.full_values += n;
    r.frozen_bytes_stored += 8 * n;
    r.frozen_bytes_fp32 += 4 * n;
    r.frozen_bytes_fp32_dense += 4 * n;
  });
  model.backbone.for_each_projection([&](LoraTarget, Projection& p) {
    if (!p.quantized) return;
    const std::size_t n = p.quantized->count();
    const std::size_t b = p.quantized->storage_bytes();
    r.total_params += n;
    r.frozen_params += n;
    r.nf4_values += n;
    r.nf4_bytes += b;
    r.frozen_bytes_stored += b;
    r.frozen_bytes_fp32 += b;
    r.frozen_bytes_fp32_dense += 4 * n;
  });
  r.buffer_bytes_peak = model.backbone.meter.peak_bytes;
  r.wall_seconds = wall_seconds;
  return r;
}

inline double to_mib(std::size_t bytes) noexcept { return static_cast<double>(bytes) / (1024.0 * 1024.0); }

}  // namespace lorahar
