// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "drg/errors.hpp"
#include "drg/tensor.hpp"

namespace drg {

/// Binary PPM (P6, maxval 255). Chosen as the on-disk image format: lossless
/// 8-bit RGB, byte-deterministic, readable by standard tooling.

inline void write_ppm(const std::filesystem::path& path, const Tensorf& img) {
  if (img.rank() != 3 || img.dim(2) != 3)
    throw std::invalid_argument("write_ppm: expected H x W x 3 image");
  const std::size_t h = img.dim(0), w = img.dim(1);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("write_ppm: cannot open " + path.string());
  f << "P6\n" << w << " " << h << "\n255\n";
  std::vector<std::uint8_t> row(w * 3);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::min(1.0f, std::max(0.0f, img(y, x, c)));
        row[x * 3 + c] =
            static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    f.write(reinterpret_cast<const char*>(row.data()),
            static_cast<std::streamsize>(row.size()));
  }
  if (!f) throw DataError("write_ppm: write failed for " + path.string());
}

inline Tensorf read_ppm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("read_ppm: cannot open " + path.string());
  std::string magic;
  f >> magic;
  if (magic != "P6")
    throw DataError("read_ppm: not a P6 file: " + path.string());
  long w = 0, h = 0, maxval = 0;
  f >> w >> h >> maxval;
  if (!f || w <= 0 || h <= 0 || maxval != 255)
    throw DataError("read_ppm: bad header in " + path.string());
  f.get();  // single whitespace after maxval
  Tensorf img({static_cast<std::size_t>(h), static_cast<std::size_t>(w), 3});
  std::vector<std::uint8_t> buf(static_cast<std::size_t>(w * h * 3));
  f.read(reinterpret_cast<char*>(buf.data()),
         static_cast<std::streamsize>(buf.size()));
  if (!f) throw DataError("read_ppm: truncated file " + path.string());
  for (std::size_t i = 0; i < buf.size(); ++i)
    img[i] = static_cast<float>(buf[i]) / 255.0f;
  return img;
}

}  // namespace drg
