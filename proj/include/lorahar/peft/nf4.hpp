#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>

#include "lorahar/peft/lora.hpp"

namespace lorahar {

/// Sixteen 4-bit levels in [−1, 1] placed at standard-normal quantiles.
///
/// Construction (the NF4 recipe): with δ = 0.9677083, take eight positive levels
/// Φ⁻¹ of linspace(δ, 0.5, 9) minus its last point, seven negative levels
/// −Φ⁻¹ of linspace(δ, 0.5, 8) minus its last point, and an exact zero; divide
/// all by Φ⁻¹(δ). The two halves mirror the same quantile grid, one positive
/// level more than negative so that zero is representable with 16 codes.
struct Nf4Codebook {
  std::array<double, 16> levels{};

  /// Index of the nearest level; exact ties go to the lower index.
  std::uint8_t nearest(double x) const noexcept {
    std::size_t lo = 0, hi = levels.size() - 1;
    while (hi - lo > 1) {
      const std::size_t mid = (lo + hi) / 2;
      if (levels[mid] <= x) lo = mid;
      else hi = mid;
    }
    std::size_t i = (std::abs(x - levels[lo]) <= std::abs(x - levels[hi])) ? lo : hi;
    // Distance comparison exactly as a brute-force scan would do it.
    while (i > 0 && std::abs(x - levels[i - 1]) <= std::abs(x - levels[i])) --i;
    while (i + 1 < levels.size() && std::abs(x - levels[i + 1]) < std::abs(x - levels[i])) ++i;
    return static_cast<std::uint8_t>(i);
  }

  double max_gap() const noexcept {
    double g = 0.0;
    for (std::size_t i = 0; i + 1 < levels.size(); ++i) g = std::max(g, levels[i + 1] - levels[i]);
    return g;
  }
};

inline Nf4Codebook build_nf4_codebook() {
  constexpr double offset = 0.9677083;
  const boost::math::normal_distribution<double> normal;
  auto linspace = [](double a, double b, int n, int i) { return a + (b - a) * static_cast<double>(i) / static_cast<double>(n - 1); };
  std::vector<double> v;
  for (int i = 0; i < 8; ++i) v.push_back(boost::math::quantile(normal, linspace(offset, 0.5, 9, i)));
  v.push_back(0.0);
  for (int i = 0; i < 7; ++i) v.push_back(-boost::math::quantile(normal, linspace(offset, 0.5, 8, i)));
  const double top = boost::math::quantile(normal, offset);
  std::sort(v.begin(), v.end());
  Nf4Codebook cb;
  for (std::size_t i = 0; i < 16; ++i) cb.levels[i] = v[i] / top;
  // Endpoints are ±Φ⁻¹(δ)/Φ⁻¹(δ); pin them so rounding cannot leave them at 1 ± ulp.
  cb.levels.front() = -1.0;
  cb.levels.back() = 1.0;
  return cb;
}

inline const Nf4Codebook& nf4_codebook() {
  static const Nf4Codebook cb = build_nf4_codebook();
  return cb;
}

/// Blockwise NF4 storage of a frozen weight.
///
/// Values are taken in row-major order and cut into blocks of `block_size`; the
/// last block may be partial. Codes are packed two per byte, even index in the
/// low nibble; a trailing unused nibble is zero. Each block has an absmax scale
/// stored as float32, or, when double-quantized, as an 8-bit code relative to a
/// float32 maximum shared by each group of `group_size` blocks.
struct QuantizedMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t block_size = 64;
  std::size_t group_size = 256;
  bool double_quantized = false;
  std::vector<std::uint8_t> codes;
  std::vector<float> scales;              // plain scales, one per block
  std::vector<std::uint8_t> scale_codes;  // double-quantized scales, one per block
  std::vector<float> group_scales;        // one per group of blocks

  std::size_t count() const noexcept { return rows * cols; }
  std::size_t num_blocks() const noexcept { return block_size == 0 ? 0 : (count() + block_size - 1) / block_size; }
  std::size_t num_groups() const noexcept { return (num_blocks() + group_size - 1) / group_size; }

  std::uint8_t code(std::size_t i) const noexcept {
    const std::uint8_t byte = codes[i / 2];
    return (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
  }

  void set_code(std::size_t i, unsigned c) {
    if (c >= 16) throw DataError("NF4 code " + std::to_string(c) + " out of range");
    std::uint8_t& byte = codes[i / 2];
    if (i % 2 == 0) byte = static_cast<std::uint8_t>((byte & 0xF0) | c);
    else byte = static_cast<std::uint8_t>((byte & 0x0F) | (c << 4));
  }

  /// Effective scale of block `b` as used by dequantization.
  double block_scale(std::size_t b) const {
    if (!double_quantized) return static_cast<double>(scales[b]);
    return static_cast<double>(scale_codes[b]) / 255.0 * static_cast<double>(group_scales[b / group_size]);
  }

  /// Step of the 8-bit scale code in the group containing block `b` (0 without double quantization).
  double scale_step(std::size_t b) const {
    return double_quantized ? static_cast<double>(group_scales[b / group_size]) / 255.0 : 0.0;
  }

  /// Bytes needed to store codes plus scale metadata.
  std::size_t storage_bytes() const noexcept {
    const std::size_t code_bytes = (count() + 1) / 2;
    if (!double_quantized) return code_bytes + 4 * num_blocks();
    return code_bytes + num_blocks() + 4 * num_groups();
  }

  void validate() const {
    if (block_size < 2) throw DataError("NF4 block size must be >= 2");
    if (codes.size() != (count() + 1) / 2) {
      throw DataError("NF4 code buffer holds " + std::to_string(codes.size()) + " bytes, expected " + std::to_string((count() + 1) / 2));
    }
    if (count() % 2 == 1 && (codes.back() >> 4) != 0) throw DataError("NF4 padding nibble is not zero");
    if (!double_quantized) {
      if (scales.size() != num_blocks()) throw DataError("NF4 scale count mismatch");
      for (float s : scales)
        if (!(s >= 0.0F) || !std::isfinite(s)) throw DataError("NF4 scale is negative or non-finite");
    } else {
      if (group_size == 0 || scale_codes.size() != num_blocks() || group_scales.size() != num_groups()) {
        throw DataError("NF4 double-quantized scale metadata mismatch");
      }
      for (float s : group_scales)
        if (!(s >= 0.0F) || !std::isfinite(s)) throw DataError("NF4 group scale is negative or non-finite");
    }
  }

  friend bool operator==(const QuantizedMatrix&, const QuantizedMatrix&) = default;
};

/// Absmax blockwise NF4 quantization. Codes are always chosen against the exact
/// float32 block scale; double quantization only re-encodes the scales afterwards.
inline QuantizedMatrix quantize_nf4(const Matrix& w, std::size_t block_size = 64, bool double_quant = false,
                                    std::size_t group_size = 256) {
  if (block_size < 2) throw ConfigError("NF4 block size must be >= 2");
  if (group_size < 1) throw ConfigError("NF4 double-quantization group size must be >= 1");
  const Nf4Codebook& cb = nf4_codebook();
  QuantizedMatrix q;
  q.rows = w.rows();
  q.cols = w.cols();
  q.block_size = block_size;
  q.group_size = group_size;
  q.double_quantized = double_quant;
  q.codes.assign((w.size() + 1) / 2, 0);
  const std::size_t nb = q.num_blocks();
  q.scales.assign(nb, 0.0F);
  for (std::size_t b = 0; b < nb; ++b) {
    const std::size_t begin = b * block_size;
    const std::size_t end = std::min(begin + block_size, w.size());
    double absmax = 0.0;
    for (std::size_t i = begin; i < end; ++i) absmax = std::max(absmax, std::abs(w[i]));
    const float s = static_cast<float>(absmax);
    q.scales[b] = s;
    if (s == 0.0F) continue;  // all-zero block decodes to 0 through its zero scale
    const double sd = static_cast<double>(s);
    for (std::size_t i = begin; i < end; ++i) q.set_code(i, cb.nearest(w[i] / sd));
  }
  if (double_quant) {
    q.scale_codes.assign(nb, 0);
    q.group_scales.assign(q.num_groups(), 0.0F);
    for (std::size_t g = 0; g < q.num_groups(); ++g) {
      const std::size_t begin = g * group_size;
      const std::size_t end = std::min(begin + group_size, nb);
      float gmax = 0.0F;
      for (std::size_t b = begin; b < end; ++b) gmax = std::max(gmax, q.scales[b]);
      q.group_scales[g] = gmax;
      if (gmax == 0.0F) continue;
      for (std::size_t b = begin; b < end; ++b) {
        if (q.scales[b] == 0.0F) continue;
        // Positive scales never collapse to code 0, so nonzero blocks stay nonzero.
        const double c = std::round(static_cast<double>(q.scales[b]) / static_cast<double>(gmax) * 255.0);
        q.scale_codes[b] = static_cast<std::uint8_t>(std::clamp(c, 1.0, 255.0));
      }
    }
    q.scales.clear();
  }
  return q;
}

/// Ŵ[i] = level[code[i]] × scale(block(i)).
inline Matrix dequantize_nf4(const QuantizedMatrix& q) {
  q.validate();
  const Nf4Codebook& cb = nf4_codebook();
  Matrix w(q.rows, q.cols);
  const std::size_t n = q.count();
  for (std::size_t b = 0; b < q.num_blocks(); ++b) {
    const double s = q.block_scale(b);
    const std::size_t end = std::min((b + 1) * q.block_size, n);
    for (std::size_t i = b * q.block_size; i < end; ++i) w[i] = s == 0.0 ? 0.0 : cb.levels[q.code(i)] * s;
  }
  return w;
}

/// Tracks transient dequantization buffers alive during one forward pass.
struct BufferMeter {
  std::size_t live_bytes = 0;
  std::size_t peak_bytes = 0;

  void begin_pass() noexcept { live_bytes = 0; }
  void add(std::size_t bytes) noexcept {
    live_bytes += bytes;
    peak_bytes = std::max(peak_bytes, live_bytes);
  }
};

/// Forward through a frozen quantized weight: Ŵ is rebuilt for this pass only and
/// lives on the tape as a constant, so gradients flow through it to x but the
/// optimizer only ever sees A and B.
inline Var qlora_forward(Var x, const QuantizedMatrix& q, LoraAdapter& adapter, BufferMeter* meter = nullptr) {
  if (q.rows != adapter.d_in() || q.cols != adapter.d_out()) {
    throw DimensionError("adapter does not fit quantized base " + std::to_string(q.rows) + "x" + std::to_string(q.cols));
  }
  Matrix w_hat = dequantize_nf4(q);
  if (meter != nullptr) meter->add(w_hat.size() * sizeof(double));
  Var w = x.tape().constant(std::move(w_hat));
  return add(matmul(x, w), detail::lora_branch(x, adapter));
}

}  // namespace lorahar
