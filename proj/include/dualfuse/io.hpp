#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "dualfuse/error.hpp"

namespace dualfuse::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace detail {

template <class W>
W to_little(W v) {
  if constexpr (std::endian::native == std::endian::big) {
    W out = 0;
    for (std::size_t i = 0; i < sizeof(W); ++i) out = (out << 8) | ((v >> (8 * i)) & 0xff);
    return out;
  }
  return v;
}

}  // namespace detail

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::kIo, "write failed for " + path.string());
}

/// Parses a manifest; anything that is not a JSON object is a bad magic.
inline json read_json(const fs::path& path) {
  const std::string text = read_file(path);
  json j = json::parse(text, nullptr, false);
  require(!j.is_discarded() && j.is_object(), ErrorCode::kBadMagic, path.string() + " is not a JSON manifest");
  return j;
}

/// Pretty JSON with a trailing newline; key order is alphabetical, so output is stable.
inline void write_json(const fs::path& path, const json& j) { write_file(path, j.dump(2) + "\n"); }

/// Little-endian encoding of 32-bit words (f32 or u32).
template <class W>
std::string encode_le(std::span<const W> values) {
  static_assert(sizeof(W) == 4);
  std::string out(values.size() * 4, '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint32_t bits = std::bit_cast<std::uint32_t>(values[i]);
    bits = detail::to_little(bits);
    std::memcpy(out.data() + 4 * i, &bits, 4);
  }
  return out;
}

/// Decodes exactly `count` words; a short buffer is TruncatedFile and a long
/// one ShapeMismatchWithManifest.
template <class W>
std::vector<W> decode_le(std::string_view bytes, std::size_t count, const std::string& what) {
  static_assert(sizeof(W) == 4);
  require(bytes.size() >= count * 4, ErrorCode::kTruncatedFile,
          what + " holds " + std::to_string(bytes.size()) + " bytes, manifest needs " + std::to_string(count * 4));
  require(bytes.size() == count * 4, ErrorCode::kShapeMismatchWithManifest,
          what + " holds " + std::to_string(bytes.size()) + " bytes, manifest needs " + std::to_string(count * 4));
  std::vector<W> out(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, bytes.data() + 4 * i, 4);
    out[i] = std::bit_cast<W>(detail::to_little(bits));
  }
  return out;
}

/// Reads a required manifest field, mapping type errors to BadMagic.
template <class V>
V field(const json& j, const char* key, const fs::path& where) {
  require(j.contains(key), ErrorCode::kBadMagic, where.string() + ": missing \"" + key + "\"");
  try {
    return j.at(key).get<V>();
  } catch (const json::exception&) {
    fail(ErrorCode::kBadMagic, where.string() + ": field \"" + key + "\" has the wrong type");
  }
}

}  // namespace dualfuse::io
