#pragma once

#include <cstdint>

#include <Eigen/Core>

namespace cmr {

// In-plane arrays are indexed (x, y) with x varying fastest, which matches the
// NIfTI voxel order and the (row = y, col = x) layout of network tensors.
template <typename Scalar>
using Grid = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

using Slice = Grid<float>;
using LabelSlice = Grid<std::uint8_t>;

using Affine = Eigen::Matrix4d;

}  // namespace cmr
