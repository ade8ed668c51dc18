#include <cmath>

#include "cmr/render.hpp"
#include "doctest.h"
#include "support/png_reader.hpp"

using namespace cmr;

TEST_CASE("render windows to [0, G] and draws y up") {
  Volume v = make_volume(3, 2, 2, Eigen::Vector3d(1, 1, 1));
  // Slice 0: x + 10 y; slice 1 holds the maximum and a negative value.
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 3; ++x) v.at(x, y, 0) = float(x + 10 * y);
  v.at(0, 0, 1) = 100.0f;
  v.at(1, 0, 1) = -5.0f;
  const Gray8 img = render_slice(v, 0);
  CHECK(img.width == 3);
  CHECK(img.height == 2);
  auto level = [](double value) { return std::uint8_t(std::lround(value * 255.0 / 100.0)); };
  // First row is y = 1.
  CHECK(img.pixels == std::vector<std::uint8_t>{level(10), level(11), level(12), level(0), level(1), level(2)});
  const Gray8 s1 = render_slice(v, 1);
  CHECK(s1.pixels[3] == 255);
  CHECK(s1.pixels[4] == 0);
  CHECK_THROWS_AS(render_slice(v, 2), std::out_of_range);
  CHECK_THROWS_AS(render_slice(v, -1), std::out_of_range);

  const Volume dark = make_volume(4, 4, 1, Eigen::Vector3d(1, 1, 1));
  for (auto p : render_slice(dark, 0).pixels) CHECK(p == 0);
}

TEST_CASE("PNG round trip through an independent decoder") {
  for (auto [w, h] : {std::pair{1, 1}, std::pair{7, 3}, std::pair{64, 33}}) {
    Gray8 img{w, h, {}};
    for (int i = 0; i < w * h; ++i) img.pixels.push_back(std::uint8_t((i * 37 + 11) % 256));
    const support::Png png = support::read_png(encode_png(img));
    CHECK(png.width == w);
    CHECK(png.height == h);
    CHECK(png.pixels == img.pixels);
    CHECK(png.chunks == std::vector<std::string>{"IHDR", "IDAT", "IEND"});
  }
  CHECK_THROWS_AS(encode_png(Gray8{2, 2, {1, 2, 3}}), std::invalid_argument);
  CHECK_THROWS_AS(encode_png(Gray8{0, 0, {}}), std::invalid_argument);
}

TEST_CASE("reference CRC") {
  CHECK(support::crc32_of("IEND") == 0xae426082u);
  CHECK(support::crc32_of("123456789") == 0xcbf43926u);
}
