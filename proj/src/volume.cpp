#include "cmr/volume.hpp"

#include <cmath>
#include <stdexcept>

#include <Eigen/LU>

namespace cmr {

std::string to_string(DType dtype) {
  switch (dtype) {
    case DType::U8: return "u8";
    case DType::I16: return "i16";
    case DType::U16: return "u16";
    case DType::F32: return "f32";
  }
  return "?";
}

DType dtype_from_string(const std::string& name) {
  if (name == "u8") return DType::U8;
  if (name == "i16") return DType::I16;
  if (name == "u16") return DType::U16;
  if (name == "f32") return DType::F32;
  throw std::invalid_argument("unknown dtype '" + name + "'");
}

Volume::Volume(int sx, int sy, int sz) : dims{sx, sy, sz}, ndim(sz > 1 ? 3 : 2) {
  if (sx < 1 || sy < 1 || sz < 1) throw std::invalid_argument("volume dims must be positive");
  voxels = Eigen::ArrayXf::Zero(Eigen::Index(sx) * sy * sz);
}

float Volume::max_gray() const { return voxels.size() ? voxels.maxCoeff() : 0.0f; }

Slice Volume::slice(int z) const {
  if (z < 0 || z >= dims[2]) throw std::out_of_range("slice index out of range");
  return Eigen::Map<const Slice>(voxels.data() + z * slice_size(), dims[0], dims[1]);
}

void Volume::set_slice(int z, const Slice& values) {
  if (z < 0 || z >= dims[2]) throw std::out_of_range("slice index out of range");
  if (values.rows() != dims[0] || values.cols() != dims[1]) throw std::invalid_argument("slice shape mismatch");
  Eigen::Map<Slice>(voxels.data() + z * slice_size(), dims[0], dims[1]) = values;
}

void Volume::validate() const {
  if (dims[0] < 1 || dims[1] < 1 || dims[2] < 1) throw std::invalid_argument("volume dims must be positive");
  if (voxels.size() != slice_size() * dims[2]) throw std::invalid_argument("voxel buffer does not match dims");
  if (!(spacing.array() > 0.0).all()) throw std::invalid_argument("spacing must be strictly positive");
  if (!affine.allFinite() || std::abs(affine.topLeftCorner<3, 3>().determinant()) < 1e-12)
    throw std::invalid_argument("affine is singular");
}

Volume make_volume(int sx, int sy, int sz, const Eigen::Vector3d& spacing, DType dtype) {
  Volume v(sx, sy, sz);
  v.spacing = spacing;
  v.affine = Affine::Identity();
  v.affine.diagonal().head<3>() = spacing;
  v.dtype = dtype;
  return v;
}

std::vector<IndexedSlice> iter_slices(const Volume& vol) {
  std::vector<IndexedSlice> out;
  out.reserve(vol.sz());
  for (int z = 0; z < vol.sz(); ++z) out.push_back({z, vol.slice(z)});
  return out;
}

Volume apply_to_volume(OrientCode code, const Volume& vol) {
  Volume out = vol;
  out.affine = update_affine(code, vol.affine, vol.sx(), vol.sy());
  if (code.transposes()) {
    std::swap(out.dims[0], out.dims[1]);
    std::swap(out.spacing[0], out.spacing[1]);
  }
  for (int z = 0; z < vol.sz(); ++z) {
    const Slice moved = apply(code, Eigen::Map<const Slice>(vol.voxels.data() + z * vol.slice_size(), vol.sx(), vol.sy()));
    Eigen::Map<Slice>(out.voxels.data() + z * out.slice_size(), out.sx(), out.sy()) = moved;
  }
  return out;
}

}  // namespace cmr
