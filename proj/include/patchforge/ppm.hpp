#pragma once

// 8-bit binary PPM (P6) reading and writing for (1, 3, H, W) tensors in [0, 1].

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "patchforge/error.hpp"
#include "patchforge/tensor.hpp"

namespace patchforge {

inline std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Rounds v to the nearest representable 8-bit level, so a PPM round trip is exact.
inline float quantize8(double v) { return static_cast<float>(to_byte(v)) / 255.0f; }

template <class T>
void write_ppm(const std::filesystem::path& path, const Tensor<T>& img) {
  const Shape s = img.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError("write_ppm expects (1, 3, H, W), got " + s.str());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << s.w << ' ' << s.h << "\n255\n";
  std::vector<std::uint8_t> row(static_cast<std::size_t>(s.w) * 3);
  for (int y = 0; y < s.h; ++y) {
    for (int x = 0; x < s.w; ++x)
      for (int c = 0; c < 3; ++c) row[static_cast<std::size_t>(x) * 3 + static_cast<std::size_t>(c)] = to_byte(img.at(0, c, y, x));
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw IoError("write failed: " + path.string());
}

namespace detail {

inline int read_ppm_int(std::istream& in, const std::string& path) {
  int ch = in.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = in.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = in.get();
  }
  if (ch == EOF || !std::isdigit(ch)) throw IoError("malformed PPM header in " + path);
  long v = 0;
  while (ch != EOF && std::isdigit(ch)) {
    v = v * 10 + (ch - '0');
    if (v > (1 << 24)) throw IoError("PPM dimension too large in " + path);
    ch = in.get();
  }
  // exactly one whitespace byte terminates the header field
  if (ch == EOF || !std::isspace(ch)) throw IoError("malformed PPM header in " + path);
  return static_cast<int>(v);
}

}  // namespace detail

inline Tensor<float> read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '6') throw IoError(path.string() + " is not a binary PPM (P6)");
  const int w = detail::read_ppm_int(in, path.string());
  const int h = detail::read_ppm_int(in, path.string());
  const int maxval = detail::read_ppm_int(in, path.string());
  if (w < 1 || h < 1 || maxval != 255) throw IoError("unsupported PPM geometry or depth in " + path.string());
  std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * static_cast<std::size_t>(h) * 3);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw IoError("truncated PPM " + path.string());
  Tensor<float> img({1, 3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(0, c, y, x) = static_cast<float>(bytes[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.0f;
  return img;
}

}  // namespace patchforge
