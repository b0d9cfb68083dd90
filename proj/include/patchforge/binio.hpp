#pragma once

// Sidecar format shared by checkpoints and patch artifacts: one line of JSON,
// then a little-endian uint32 block count, then per block a uint32 element
// count followed by that many little-endian float32 values.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "patchforge/error.hpp"

namespace patchforge {

struct FloatBlob {
  nlohmann::json header;
  std::vector<std::vector<float>> blocks;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4) throw IoError("truncated binary file " + path);
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

}  // namespace detail

inline void write_blob(const std::filesystem::path& path, const FloatBlob& blob) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << blob.header.dump() << '\n';
  detail::put_u32(out, static_cast<std::uint32_t>(blob.blocks.size()));
  for (const auto& block : blob.blocks) {
    detail::put_u32(out, static_cast<std::uint32_t>(block.size()));
    for (float f : block) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

inline FloatBlob read_blob(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("missing header in " + path.string());
  FloatBlob blob;
  try {
    blob.header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad header in " + path.string() + ": " + e.what());
  }
  const std::uint32_t count = detail::get_u32(in, path.string());
  for (std::uint32_t b = 0; b < count; ++b) {
    const std::uint32_t n = detail::get_u32(in, path.string());
    std::vector<float> block(n);
    for (auto& f : block) f = std::bit_cast<float>(detail::get_u32(in, path.string()));
    blob.blocks.push_back(std::move(block));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes in " + path.string());
  return blob;
}

}  // namespace patchforge
