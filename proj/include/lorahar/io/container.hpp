#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <tuple>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "lorahar/peft/nf4.hpp"

namespace lorahar {

using json = nlohmann::json;

/// Self-describing binary container used for checkpoints, adapters and caches.
///
///   bytes 0..3    magic "LHAR"
///   bytes 4..7    format version, u32 little-endian (currently 1)
///   bytes 8..15   manifest length M, u64 little-endian
///   next M bytes  manifest, compact UTF-8 JSON with sorted keys
///   remainder     payload; each tensor entry gives its byte offset into it
///
/// Tensor encodings:
///   "f64"  rows·cols IEEE-754 doubles, little-endian, row-major
///   "nf4"  ⌈n/2⌉ code bytes (even index in the low nibble), then either one
///          f32 scale per block, or one u8 scale code per block followed by one
///          f32 group maximum per group when double-quantized
namespace container {

inline constexpr char kMagic[4] = {'L', 'H', 'A', 'R'};
inline constexpr std::uint32_t kVersion = 1;

template <typename T>
void put_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  const U u = std::bit_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t pos) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint8_t>>;
  if (pos + sizeof(T) > in.size()) throw DataError("container truncated");
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return std::bit_cast<T>(u);
}

}  // namespace container

class ContainerWriter {
 public:
  explicit ContainerWriter(std::string kind) { manifest_["kind"] = std::move(kind); manifest_["tensors"] = json::array(); }

  json& meta() { return manifest_; }

  void add_dense(const std::string& name, const Matrix& m, PrecisionClass precision = PrecisionClass::Full) {
    json e = entry(name, "f64", m.rows(), m.cols(), precision);
    for (double v : m.values()) container::put_le(payload_, v);
    finish(e);
  }

  void add_nf4(const std::string& name, const QuantizedMatrix& q) {
    q.validate();
    json e = entry(name, "nf4", q.rows, q.cols, PrecisionClass::QuantizedNf4);
    e["block_size"] = q.block_size;
    e["group_size"] = q.group_size;
    e["double_quantized"] = q.double_quantized;
    payload_.append(reinterpret_cast<const char*>(q.codes.data()), q.codes.size());
    if (q.double_quantized) {
      payload_.append(reinterpret_cast<const char*>(q.scale_codes.data()), q.scale_codes.size());
      for (float s : q.group_scales) container::put_le(payload_, s);
    } else {
      for (float s : q.scales) container::put_le(payload_, s);
    }
    finish(e);
  }

  std::string bytes() const {
    const std::string m = manifest_.dump();
    std::string out(container::kMagic, 4);
    container::put_le(out, container::kVersion);
    container::put_le(out, static_cast<std::uint64_t>(m.size()));
    out += m;
    out += payload_;
    return out;
  }

 private:
  json entry(const std::string& name, const char* enc, std::size_t rows, std::size_t cols, PrecisionClass p) {
    json e;
    e["name"] = name;
    e["encoding"] = enc;
    e["shape"] = {rows, cols};
    e["precision"] = to_string(p);
    e["offset"] = payload_.size();
    return e;
  }
  void finish(json& e) {
    e["bytes"] = payload_.size() - e["offset"].get<std::size_t>();
    manifest_["tensors"].push_back(std::move(e));
  }

  json manifest_;
  std::string payload_;
};

class ContainerReader {
 public:
  explicit ContainerReader(std::string bytes) : data_(std::move(bytes)) {
    if (data_.size() < 16 || std::memcmp(data_.data(), container::kMagic, 4) != 0) throw DataError("not a lorahar container (bad magic)");
    const auto version = container::get_le<std::uint32_t>(data_, 4);
    if (version != container::kVersion) throw DataError("unsupported container version " + std::to_string(version));
    const auto len = container::get_le<std::uint64_t>(data_, 8);
    if (16 + len > data_.size()) throw DataError("container manifest truncated");
    try {
      manifest_ = json::parse(data_.substr(16, len));
    } catch (const json::exception& e) {
      throw DataError(std::string("container manifest is not valid JSON: ") + e.what());
    }
    payload_start_ = 16 + len;
    for (const auto& t : manifest_.at("tensors")) index_[t.at("name").get<std::string>()] = t;
  }

  const json& meta() const { return manifest_; }
  std::string kind() const { return manifest_.value("kind", ""); }
  bool has(const std::string& name) const { return index_.count(name) != 0; }

  const json& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw DataError("container has no tensor '" + name + "'");
    return it->second;
  }

  PrecisionClass precision(const std::string& name) const { return precision_from_string(entry(name).at("precision").get<std::string>()); }

  Matrix dense(const std::string& name) const {
    const json& e = entry(name);
    if (e.at("encoding") != "f64") throw DataError("tensor '" + name + "' is not dense");
    const auto [rows, cols] = shape(e);
    const std::size_t off = payload_start_ + e.at("offset").get<std::size_t>();
    if (e.at("bytes").get<std::size_t>() != rows * cols * 8) throw DataError("tensor '" + name + "' has a wrong byte count");
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = container::get_le<double>(data_, off + 8 * i);
    if (!m.all_finite()) throw DataError("tensor '" + name + "' holds non-finite values");
    return m;
  }

  QuantizedMatrix nf4(const std::string& name) const {
    const json& e = entry(name);
    if (e.at("encoding") != "nf4") throw DataError("tensor '" + name + "' is not NF4");
    QuantizedMatrix q;
    std::tie(q.rows, q.cols) = shape(e);
    q.block_size = e.at("block_size").get<std::size_t>();
    q.group_size = e.at("group_size").get<std::size_t>();
    q.double_quantized = e.at("double_quantized").get<bool>();
    if (q.block_size < 2 || q.group_size < 1) throw DataError("tensor '" + name + "' has invalid block/group size");
    std::size_t pos = payload_start_ + e.at("offset").get<std::size_t>();
    const std::size_t end = pos + e.at("bytes").get<std::size_t>();
    if (end > data_.size()) throw DataError("tensor '" + name + "' truncated");
    auto take_bytes = [&](std::size_t n) {
      if (pos + n > end) throw DataError("tensor '" + name + "' truncated");
      std::vector<std::uint8_t> v(data_.begin() + static_cast<std::ptrdiff_t>(pos), data_.begin() + static_cast<std::ptrdiff_t>(pos + n));
      pos += n;
      return v;
    };
    auto take_floats = [&](std::size_t n) {
      if (pos + 4 * n > end) throw DataError("tensor '" + name + "' truncated");
      std::vector<float> v(n);
      for (auto& f : v) {
        f = container::get_le<float>(data_, pos);
        pos += 4;
      }
      return v;
    };
    q.codes = take_bytes((q.count() + 1) / 2);
    if (q.double_quantized) {
      q.scale_codes = take_bytes(q.num_blocks());
      q.group_scales = take_floats(q.num_groups());
    } else {
      q.scales = take_floats(q.num_blocks());
    }
    if (pos != end) throw DataError("tensor '" + name + "' has trailing bytes");
    q.validate();
    return q;
  }

 private:
  static std::pair<std::size_t, std::size_t> shape(const json& e) {
    const auto& s = e.at("shape");
    return {s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()};
  }

  std::string data_;
  json manifest_;
  std::size_t payload_start_ = 0;
  std::map<std::string, json> index_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write to '" + path + "' failed");
}

}  // namespace lorahar
