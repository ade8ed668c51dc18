#include "cmr/render.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <zlib.h>

namespace cmr {

Gray8 render_slice(const Volume& vol, int k) {
  if (k < 0 || k >= vol.sz()) throw std::out_of_range("slice " + std::to_string(k) + " outside 0.." + std::to_string(vol.sz() - 1));
  const float g = vol.max_gray();
  const float scale = g > 0.0f ? 255.0f / g : 0.0f;
  Gray8 img{vol.sx(), vol.sy(), std::vector<std::uint8_t>(std::size_t(vol.slice_size()))};
  for (int row = 0; row < img.height; ++row) {
    const int y = img.height - 1 - row;
    for (int x = 0; x < img.width; ++x) {
      const float v = std::clamp(vol.at(x, y, k), 0.0f, g) * scale;
      img.pixels[std::size_t(row) * img.width + x] = static_cast<std::uint8_t>(std::lround(v));
    }
  }
  return img;
}

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<char>((v >> shift) & 0xff));
}

void put_chunk(std::string& out, const char* type, const std::string& data) {
  put_u32(out, static_cast<std::uint32_t>(data.size()));
  const std::string body = std::string(type, 4) + data;
  out += body;
  put_u32(out, static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(body.data()), uInt(body.size()))));
}

}  // namespace

std::string encode_png(const Gray8& image) {
  if (image.width <= 0 || image.height <= 0 || image.pixels.size() != std::size_t(image.width) * std::size_t(image.height))
    throw std::invalid_argument("encode_png: pixel buffer does not match dimensions");
  std::string raw;
  raw.reserve(image.pixels.size() + std::size_t(image.height));
  for (int row = 0; row < image.height; ++row) {
    raw.push_back('\0');  // filter type: none
    raw.append(reinterpret_cast<const char*>(image.pixels.data()) + std::size_t(row) * image.width, std::size_t(image.width));
  }
  uLongf packed_size = compressBound(uLong(raw.size()));
  std::string packed(packed_size, '\0');
  if (compress2(reinterpret_cast<Bytef*>(packed.data()), &packed_size, reinterpret_cast<const Bytef*>(raw.data()),
                uLong(raw.size()), Z_DEFAULT_COMPRESSION) != Z_OK)
    throw std::runtime_error("encode_png: compression failed");
  packed.resize(packed_size);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_u32(ihdr, std::uint32_t(image.width));
  put_u32(ihdr, std::uint32_t(image.height));
  ihdr += std::string("\x08\x00\x00\x00\x00", 5);  // depth 8, grayscale, deflate, no filter, no interlace
  put_chunk(out, "IHDR", ihdr);
  put_chunk(out, "IDAT", packed);
  put_chunk(out, "IEND", "");
  return out;
}

}  // namespace cmr
