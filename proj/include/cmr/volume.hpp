#pragma once

#include <array>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cmr/orient.hpp"
#include "cmr/types.hpp"

namespace cmr {

enum class DType { U8, I16, U16, F32 };

std::string to_string(DType dtype);
DType dtype_from_string(const std::string& name);

/// A 2D slice or 3D stack of voxels with its voxel-to-world geometry.
///
/// Voxel values are held as float in the file's raw (unscaled) units, which
/// represents every supported on-disk type exactly. The maximum gray value G
/// is computed from the data, so it cannot go stale after a mutation.
struct Volume {
  std::array<int, 3> dims{1, 1, 1};
  int ndim = 2;
  Eigen::ArrayXf voxels;
  Eigen::Vector3d spacing = Eigen::Vector3d::Ones();
  Affine affine = Affine::Identity();
  DType dtype = DType::F32;
  // Raw header and extension bytes of the file this volume came from. Fields
  // the toolkit does not own (description, intent, units, ...) are written
  // back from here unchanged.
  std::vector<char> source_header;

  Volume() = default;
  Volume(int sx, int sy, int sz = 1);

  int sx() const { return dims[0]; }
  int sy() const { return dims[1]; }
  int sz() const { return dims[2]; }
  Eigen::Index slice_size() const { return Eigen::Index(dims[0]) * dims[1]; }

  float max_gray() const;

  Slice slice(int z) const;
  void set_slice(int z, const Slice& values);

  float& at(int x, int y, int z = 0) { return voxels[x + Eigen::Index(dims[0]) * (y + Eigen::Index(dims[1]) * z)]; }
  float at(int x, int y, int z = 0) const { return voxels[x + Eigen::Index(dims[0]) * (y + Eigen::Index(dims[1]) * z)]; }

  /// World position (mm) of a voxel center.
  Eigen::Vector3d world(double x, double y, double z = 0.0) const {
    return (affine * Eigen::Vector4d(x, y, z, 1.0)).head<3>();
  }

  /// Throws std::invalid_argument if spacing or affine are unusable or the
  /// buffer does not match dims.
  void validate() const;
};

/// Builds a volume with an axis-aligned affine from its spacing.
Volume make_volume(int sx, int sy, int sz, const Eigen::Vector3d& spacing, DType dtype = DType::F32);

struct IndexedSlice {
  int index;
  Slice data;
};

/// z-ordered in-plane slices; a 2D volume yields one.
std::vector<IndexedSlice> iter_slices(const Volume& vol);

/// Permutes every z-slice by `code` and rewrites spacing and affine so each
/// voxel keeps its world position.
Volume apply_to_volume(OrientCode code, const Volume& vol);

}  // namespace cmr
