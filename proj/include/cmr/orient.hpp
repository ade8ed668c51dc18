#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Core>

#include "cmr/types.hpp"

namespace cmr {

/// One of the eight axis-aligned in-plane orientations, written as three bits
/// b2b1b0. The operation applies a horizontal flip (b0), then a vertical flip
/// (b1), then a transpose (b2). Row order 000..111 is also the class index.
class OrientCode {
 public:
  constexpr OrientCode() = default;

  static constexpr OrientCode from_bits(unsigned bits) {
    if (bits > 7u) throw std::invalid_argument("orientation code out of range: " + std::to_string(bits));
    return OrientCode(static_cast<std::uint8_t>(bits));
  }
  static constexpr OrientCode from_index(int index) {
    if (index < 0) throw std::invalid_argument("negative orientation index");
    return from_bits(static_cast<unsigned>(index));
  }
  /// Parses "000".."111".
  static OrientCode parse(std::string_view text);

  constexpr unsigned bits() const noexcept { return bits_; }
  constexpr int index() const noexcept { return bits_; }
  constexpr bool flips_x() const noexcept { return (bits_ & 1u) != 0; }
  constexpr bool flips_y() const noexcept { return (bits_ & 2u) != 0; }
  constexpr bool transposes() const noexcept { return (bits_ & 4u) != 0; }

  std::string str() const;

  friend constexpr auto operator<=>(OrientCode, OrientCode) = default;

 private:
  constexpr explicit OrientCode(std::uint8_t bits) : bits_(bits) {}
  std::uint8_t bits_ = 0;
};

inline constexpr std::size_t kNumOrientations = 8;

/// The eight codes in table order 000, 001, ..., 111.
std::array<OrientCode, kNumOrientations> all_codes();

/// Target[x, y] = Source[linear * (x, y) + offset], 0-based.
struct IndexMap {
  Eigen::Matrix2i linear = Eigen::Matrix2i::Identity();
  Eigen::Vector2i offset = Eigen::Vector2i::Zero();
  int source_sx = 1;
  int source_sy = 1;
  int target_sx = 1;
  int target_sy = 1;

  Eigen::Vector2i source_of(int x, int y) const { return linear * Eigen::Vector2i(x, y) + offset; }
  Eigen::Vector2i source_of(const Eigen::Vector2i& target) const { return linear * target + offset; }

  /// Maps source indices to target indices.
  IndexMap inverse() const;
  /// (*this)(other): first look up through `other`, then through *this.
  IndexMap then(const IndexMap& other) const;

  bool is_identity() const { return linear.isIdentity() && offset.isZero(); }
};

IndexMap index_map(OrientCode code, int sx, int sy);

/// compose(a, b) applies b first, then a.
OrientCode compose(OrientCode a, OrientCode b);
OrientCode invert(OrientCode code);
/// Smallest n >= 1 with code^n == 000.
int order(OrientCode code);

/// Applies the operation to an (x, y)-indexed array. Output dims swap when the
/// code transposes.
template <typename Derived>
Grid<typename Derived::Scalar> apply(OrientCode code, const Eigen::DenseBase<Derived>& src) {
  using Out = Grid<typename Derived::Scalar>;
  if (src.size() == 0) throw std::invalid_argument("cannot orient an empty grid");
  Out out = src.derived();
  if (code.flips_x()) out = out.colwise().reverse().eval();
  if (code.flips_y()) out = out.rowwise().reverse().eval();
  if (code.transposes()) out = out.transpose().eval();
  return out;
}

/// Display order lists rows top to bottom with the y axis pointing up, the
/// way slice viewers draw NIfTI data. These convert between that and (x, y).
template <typename Derived>
Grid<typename Derived::Scalar> from_display(const Eigen::DenseBase<Derived>& rows) {
  return rows.derived().transpose().rowwise().reverse();
}
template <typename Derived>
Grid<typename Derived::Scalar> to_display(const Eigen::DenseBase<Derived>& grid) {
  return grid.derived().rowwise().reverse().transpose();
}

/// apply() on a grid given in display order.
template <typename Derived>
Grid<typename Derived::Scalar> apply_to_grid(OrientCode code, const Eigen::DenseBase<Derived>& rows) {
  return to_display(apply(code, from_display(rows)));
}

/// New voxel-to-world transform for a volume of in-plane size sx x sy after
/// applying `code`, such that every voxel keeps its world position.
Affine update_affine(OrientCode code, const Affine& affine, int sx, int sy);

}  // namespace cmr
