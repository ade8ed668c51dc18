#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmr/volume.hpp"

namespace cmr {

/// Row-major 8-bit grayscale image.
struct Gray8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;
};

/// Slice k windowed to [0, G] of the whole volume, drawn in display order
/// (first row is the largest y). Throws std::out_of_range for a bad k.
Gray8 render_slice(const Volume& vol, int k);

/// Minimal PNG: 8-bit grayscale, one zlib stream, no filtering.
std::string encode_png(const Gray8& image);

}  // namespace cmr
