#pragma once

// DVAD weights container:
//   "DVAD" | u32 version | u32 manifest_bytes | manifest JSON |
//   payload (little-endian float32, tensors back to back) | u32 CRC-32(payload)

#include <zlib.h>

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dvad/error.hpp"
#include "dvad/model/model.hpp"

namespace dvad {

inline constexpr std::uint32_t kWeightsFormatVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

inline void put_f32(std::string& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

inline float get_f32(const unsigned char* p) { return std::bit_cast<float>(get_u32(p)); }

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to '" + path + "'");
}

}  // namespace detail

struct WeightsEntry {
  std::string name;
  Shape shape;
  std::vector<float> values;
};

inline std::string encode_weights(const std::string& model_name, const std::vector<WeightsEntry>& tensors) {
  nlohmann::json manifest;
  manifest["model"] = model_name;
  manifest["tensors"] = nlohmann::json::array();
  std::string payload;
  for (const auto& t : tensors) {
    if (shape_numel(t.shape) != t.values.size()) throw DimensionError("weights entry '" + t.name + "' size mismatch");
    manifest["tensors"].push_back({{"name", t.name}, {"shape", t.shape}, {"offset", payload.size()},
                                   {"bytes", t.values.size() * 4}});
    for (float v : t.values) detail::put_f32(payload, v);
  }
  const std::string m = manifest.dump();
  std::string out = "DVAD";
  detail::put_u32(out, kWeightsFormatVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(m.size()));
  out += m;
  out += payload;
  detail::put_u32(out, detail::crc32_of(reinterpret_cast<const unsigned char*>(payload.data()), payload.size()));
  return out;
}

struct DecodedWeights {
  std::string model;
  std::vector<WeightsEntry> tensors;
};

inline DecodedWeights decode_weights(const std::string& bytes) {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || std::memcmp(p, "DVAD", 4) != 0) throw DataError("not a DVAD weights file");
  const std::uint32_t version = detail::get_u32(p + 4);
  if (version != kWeightsFormatVersion) {
    throw DataError("unsupported DVAD format version " + std::to_string(version));
  }
  const std::uint32_t mlen = detail::get_u32(p + 8);
  if (12 + static_cast<std::size_t>(mlen) + 4 > bytes.size()) throw DataError("truncated DVAD manifest");
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(12, mlen));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt DVAD manifest: ") + e.what());
  }
  const std::size_t payload_at = 12 + mlen;
  const std::size_t payload_len = bytes.size() - payload_at - 4;
  const std::uint32_t stored = detail::get_u32(p + bytes.size() - 4);
  const std::uint32_t actual = detail::crc32_of(p + payload_at, payload_len);
  if (stored != actual) throw DataError("DVAD payload CRC-32 mismatch; refusing to load");

  DecodedWeights out;
  out.model = manifest.value("model", std::string{});
  for (const auto& t : manifest.at("tensors")) {
    WeightsEntry e;
    e.name = t.at("name").get<std::string>();
    e.shape = t.at("shape").get<Shape>();
    const std::size_t offset = t.at("offset").get<std::size_t>();
    const std::size_t n = shape_numel(e.shape);
    if (t.at("bytes").get<std::size_t>() != n * 4 || offset + n * 4 > payload_len) {
      throw DataError("DVAD tensor '" + e.name + "' exceeds payload");
    }
    e.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) e.values[i] = detail::get_f32(p + payload_at + offset + 4 * i);
    out.tensors.push_back(std::move(e));
  }
  return out;
}

template <typename T>
void save_weights(const Model<T>& model, const std::string& path) {
  std::vector<WeightsEntry> entries;
  for (const auto& t : model.state()) {
    WeightsEntry e{t.name, t.tensor.shape(), {}};
    e.values.reserve(t.tensor.numel());
    for (T v : t.tensor.data()) e.values.push_back(static_cast<float>(v));
    entries.push_back(std::move(e));
  }
  detail::write_file(path, encode_weights(model.name(), entries));
}

/// Loads into an already-built model; names and shapes must match in order.
template <typename T>
void load_weights(Model<T>& model, const std::string& path) {
  const auto decoded = decode_weights(detail::read_file(path));
  auto state = model.state();
  const std::size_t n = std::min(state.size(), decoded.tensors.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& want = state[i];
    const auto& got = decoded.tensors[i];
    if (want.name != got.name || want.tensor.shape() != got.shape) {
      throw DataError("weights/config mismatch at tensor '" + want.name + "' " + shape_str(want.tensor.shape()) +
                      " (file has '" + got.name + "' " + shape_str(got.shape) + ")");
    }
  }
  if (state.size() != decoded.tensors.size()) {
    const std::string first = state.size() > n ? state[n].name : decoded.tensors[n].name;
    throw DataError("weights/config mismatch at tensor '" + first + "' (tensor count " +
                    std::to_string(decoded.tensors.size()) + " vs " + std::to_string(state.size()) + ")");
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto dst = state[i].tensor.data_mut();
    const auto& src = decoded.tensors[i].values;
    for (std::size_t k = 0; k < src.size(); ++k) dst[k] = static_cast<T>(src[k]);
  }
}

}  // namespace dvad
