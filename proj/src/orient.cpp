#include "cmr/orient.hpp"

#include <cmath>

#include <Eigen/LU>

namespace cmr {

OrientCode OrientCode::parse(std::string_view text) {
  if (text.size() != 3) throw std::invalid_argument("orientation code must be 3 bits: '" + std::string(text) + "'");
  unsigned bits = 0;
  for (char c : text) {
    if (c != '0' && c != '1') throw std::invalid_argument("orientation code must be 3 bits: '" + std::string(text) + "'");
    bits = (bits << 1u) | static_cast<unsigned>(c - '0');
  }
  return from_bits(bits);
}

std::string OrientCode::str() const {
  std::string s(3, '0');
  for (int i = 0; i < 3; ++i) s[2 - i] = ((bits_ >> i) & 1u) ? '1' : '0';
  return s;
}

std::array<OrientCode, kNumOrientations> all_codes() {
  std::array<OrientCode, kNumOrientations> codes;
  for (unsigned b = 0; b < kNumOrientations; ++b) codes[b] = OrientCode::from_bits(b);
  return codes;
}

namespace {

// Linear part of index_map: diag(sign_x, sign_y) times an optional axis swap.
Eigen::Matrix2i linear_part(OrientCode code) {
  Eigen::Matrix2i swap = code.transposes() ? Eigen::Matrix2i{{0, 1}, {1, 0}} : Eigen::Matrix2i::Identity();
  Eigen::Matrix2i signs = Eigen::Matrix2i::Identity();
  if (code.flips_x()) signs(0, 0) = -1;
  if (code.flips_y()) signs(1, 1) = -1;
  return signs * swap;
}

OrientCode code_from_linear(const Eigen::Matrix2i& linear) {
  unsigned bits = 0;
  int sign_x = 0;
  int sign_y = 0;
  if (linear(0, 0) == 0) {
    bits |= 4u;
    sign_x = linear(0, 1);
    sign_y = linear(1, 0);
  } else {
    sign_x = linear(0, 0);
    sign_y = linear(1, 1);
  }
  if (sign_x < 0) bits |= 1u;
  if (sign_y < 0) bits |= 2u;
  return OrientCode::from_bits(bits);
}

}  // namespace

IndexMap index_map(OrientCode code, int sx, int sy) {
  if (sx < 1 || sy < 1) throw std::invalid_argument("index_map: sizes must be positive");
  IndexMap m;
  m.linear = linear_part(code);
  m.offset = Eigen::Vector2i(code.flips_x() ? sx - 1 : 0, code.flips_y() ? sy - 1 : 0);
  m.source_sx = sx;
  m.source_sy = sy;
  m.target_sx = code.transposes() ? sy : sx;
  m.target_sy = code.transposes() ? sx : sy;
  return m;
}

IndexMap IndexMap::inverse() const {
  IndexMap inv;
  inv.linear = linear.transpose();
  inv.offset = -(inv.linear * offset);
  inv.source_sx = target_sx;
  inv.source_sy = target_sy;
  inv.target_sx = source_sx;
  inv.target_sy = source_sy;
  return inv;
}

IndexMap IndexMap::then(const IndexMap& other) const {
  IndexMap m;
  m.linear = other.linear * linear;
  m.offset = other.linear * offset + other.offset;
  m.source_sx = other.source_sx;
  m.source_sy = other.source_sy;
  m.target_sx = target_sx;
  m.target_sy = target_sy;
  return m;
}

OrientCode compose(OrientCode a, OrientCode b) {
  // Source lookups chain in reverse order of application.
  return code_from_linear(linear_part(b) * linear_part(a));
}

OrientCode invert(OrientCode code) { return code_from_linear(linear_part(code).transpose()); }

int order(OrientCode code) {
  OrientCode power = code;
  int n = 1;
  while (power != OrientCode{}) {
    power = compose(code, power);
    ++n;
  }
  return n;
}

Affine update_affine(OrientCode code, const Affine& affine, int sx, int sy) {
  if (!affine.allFinite() || std::abs(affine.topLeftCorner<3, 3>().determinant()) < 1e-12)
    throw std::invalid_argument("update_affine: affine is singular");
  const IndexMap m = index_map(code, sx, sy);
  Affine target_to_source = Affine::Identity();
  target_to_source.topLeftCorner<2, 2>() = m.linear.cast<double>();
  target_to_source.block<2, 1>(0, 3) = m.offset.cast<double>();
  return affine * target_to_source;
}

}  // namespace cmr
