#include "cmr/volume_io.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include <Eigen/Geometry>
#include <Eigen/LU>
#include <Eigen/SVD>
#include "json.hpp"
#include <zlib.h>

namespace cmr {

static_assert(std::endian::native == std::endian::little, "NIfTI codec assumes a little-endian host");

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
  std::int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  std::int32_t extents;
  std::int16_t session_error;
  char regular;
  char dim_info;
  std::int16_t dim[8];
  float intent_p1;
  float intent_p2;
  float intent_p3;
  std::int16_t intent_code;
  std::int16_t datatype;
  std::int16_t bitpix;
  std::int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  std::int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  std::int32_t glmax;
  std::int32_t glmin;
  char descrip[80];
  char aux_file[24];
  std::int16_t qform_code;
  std::int16_t sform_code;
  float quatern_b;
  float quatern_c;
  float quatern_d;
  float qoffset_x;
  float qoffset_y;
  float qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348);

constexpr std::int16_t kDtUint8 = 2;
constexpr std::int16_t kDtInt16 = 4;
constexpr std::int16_t kDtFloat32 = 16;
constexpr std::int16_t kDtUint16 = 512;
constexpr std::int16_t kXformScannerAnat = 1;

using Kind = VolumeError::Kind;

std::int16_t nifti_code(DType t) {
  switch (t) {
    case DType::U8: return kDtUint8;
    case DType::I16: return kDtInt16;
    case DType::U16: return kDtUint16;
    case DType::F32: return kDtFloat32;
  }
  return 0;
}

int bytes_per_voxel(DType t) {
  switch (t) {
    case DType::U8: return 1;
    case DType::I16:
    case DType::U16: return 2;
    case DType::F32: return 4;
  }
  return 0;
}

std::int32_t byteswap32(std::int32_t v) {
  auto u = static_cast<std::uint32_t>(v);
  return static_cast<std::int32_t>((u >> 24) | ((u >> 8) & 0xff00u) | ((u << 8) & 0xff0000u) | (u << 24));
}

struct Geometry {
  std::array<int, 3> dims{1, 1, 1};
  int ndim = 2;
  Eigen::Vector3d spacing = Eigen::Vector3d::Ones();
  Affine affine = Affine::Identity();
  DType dtype = DType::F32;
};

Geometry decode_geometry(const Nifti1Header& h, const std::string& origin) {
  Geometry g;
  const int rank = h.dim[0];
  if (rank < 1 || rank > 7) throw VolumeError(Kind::CorruptHeader, origin + ": dim[0] out of range");
  for (int i = 1; i <= rank; ++i)
    if (h.dim[i] < 1) throw VolumeError(Kind::CorruptHeader, origin + ": non-positive dimension");
  for (int i = 4; i <= rank; ++i)
    if (h.dim[i] > 1) throw VolumeError(Kind::UnsupportedDimension, origin + ": more than 3 dimensions");
  for (int i = 0; i < 3; ++i) g.dims[i] = (i + 1 <= rank) ? h.dim[i + 1] : 1;
  g.ndim = rank >= 3 ? 3 : 2;

  switch (h.datatype) {
    case kDtUint8: g.dtype = DType::U8; break;
    case kDtInt16: g.dtype = DType::I16; break;
    case kDtUint16: g.dtype = DType::U16; break;
    case kDtFloat32: g.dtype = DType::F32; break;
    default:
      throw VolumeError(Kind::UnsupportedDtype, origin + ": unsupported datatype " + std::to_string(h.datatype));
  }

  for (int i = 0; i < 3; ++i) {
    const double p = (i + 1 <= rank || h.pixdim[i + 1] > 0) ? h.pixdim[i + 1] : 1.0;
    g.spacing[i] = p > 0 ? p : 1.0;
  }

  if (h.sform_code > 0) {
    g.affine = Affine::Identity();
    for (int c = 0; c < 4; ++c) {
      g.affine(0, c) = h.srow_x[c];
      g.affine(1, c) = h.srow_y[c];
      g.affine(2, c) = h.srow_z[c];
    }
  } else if (h.qform_code > 0) {
    g.affine = quaternion_affine(h.quatern_b, h.quatern_c, h.quatern_d,
                                 Eigen::Vector3d(h.qoffset_x, h.qoffset_y, h.qoffset_z), g.spacing,
                                 h.pixdim[0] < 0 ? -1.0 : 1.0);
  } else {
    g.affine = Affine::Identity();
    g.affine.diagonal().head<3>() = g.spacing;
  }
  return g;
}

void set_quaternion(Nifti1Header& h, const Affine& affine) {
  Eigen::Matrix3d m = affine.topLeftCorner<3, 3>();
  Eigen::Vector3d norms = m.colwise().norm();
  for (int i = 0; i < 3; ++i) m.col(i) /= norms[i];
  double qfac = 1.0;
  if (m.determinant() < 0) {
    qfac = -1.0;
    m.col(2) = -m.col(2);
  }
  // Nearest proper rotation, in case the stored transform carries shear.
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
  Eigen::Quaterniond q(r);
  if (q.w() < 0) q.coeffs() = -q.coeffs();
  h.quatern_b = static_cast<float>(q.x());
  h.quatern_c = static_cast<float>(q.y());
  h.quatern_d = static_cast<float>(q.z());
  h.qoffset_x = static_cast<float>(affine(0, 3));
  h.qoffset_y = static_cast<float>(affine(1, 3));
  h.qoffset_z = static_cast<float>(affine(2, 3));
  h.pixdim[0] = static_cast<float>(qfac);
}

Nifti1Header default_header() {
  Nifti1Header h{};
  h.sizeof_hdr = 348;
  h.regular = 'r';
  h.vox_offset = 352.0f;
  h.scl_slope = 1.0f;
  h.xyzt_units = 2 | 8;  // mm, s
  h.pixdim[0] = 1.0f;
  h.qform_code = kXformScannerAnat;
  h.sform_code = kXformScannerAnat;
  std::memcpy(h.magic, "n+1\0", 4);
  return h;
}

template <typename T>
void unpack(const char* src, Eigen::Index n, float* dst) {
  for (Eigen::Index i = 0; i < n; ++i) {
    T v;
    std::memcpy(&v, src + i * Eigen::Index(sizeof(T)), sizeof(T));
    dst[i] = static_cast<float>(v);
  }
}

template <typename T>
void pack(const float* src, Eigen::Index n, char* dst) {
  for (Eigen::Index i = 0; i < n; ++i) {
    const T v = static_cast<T>(src[i]);
    std::memcpy(dst + i * Eigen::Index(sizeof(T)), &v, sizeof(T));
  }
}

void decode_voxels(const char* src, DType dtype, Eigen::ArrayXf& out) {
  switch (dtype) {
    case DType::U8: unpack<std::uint8_t>(src, out.size(), out.data()); break;
    case DType::I16: unpack<std::int16_t>(src, out.size(), out.data()); break;
    case DType::U16: unpack<std::uint16_t>(src, out.size(), out.data()); break;
    case DType::F32: unpack<float>(src, out.size(), out.data()); break;
  }
}

std::string encode_voxels(const Eigen::ArrayXf& voxels, DType dtype) {
  std::string out(std::size_t(voxels.size()) * bytes_per_voxel(dtype), '\0');
  switch (dtype) {
    case DType::U8: pack<std::uint8_t>(voxels.data(), voxels.size(), out.data()); break;
    case DType::I16: pack<std::int16_t>(voxels.data(), voxels.size(), out.data()); break;
    case DType::U16: pack<std::uint16_t>(voxels.data(), voxels.size(), out.data()); break;
    case DType::F32: pack<float>(voxels.data(), voxels.size(), out.data()); break;
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw VolumeError(Kind::Io, path.string() + ": cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool ends_with(const std::string& s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Writes next to the destination and renames, so readers never see a partial file.
void atomic_write(const std::filesystem::path& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
  std::random_device rd;
  const fs::path tmp = dir / (".tmp-" + path.filename().string() + "-" + std::to_string(rd()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw VolumeError(Kind::Io, path.string() + ": cannot open for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      std::error_code ec;
      fs::remove(tmp, ec);
      throw VolumeError(Kind::Io, path.string() + ": write failed");
    }
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw VolumeError(Kind::Io, path.string() + ": rename failed: " + ec.message());
  }
}

nlohmann::json affine_json(const Affine& a) {
  nlohmann::json rows = nlohmann::json::array();
  for (int r = 0; r < 4; ++r) rows.push_back({a(r, 0), a(r, 1), a(r, 2), a(r, 3)});
  return rows;
}

Volume read_sidecar(const std::filesystem::path& path) {
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw VolumeError(Kind::CorruptHeader, path.string() + ": " + e.what());
  }
  try {
    const auto shape = meta.at("shape").get<std::vector<int>>();
    if (shape.size() < 2) throw VolumeError(Kind::CorruptHeader, path.string() + ": shape needs 2 or 3 dims");
    if (shape.size() > 3) throw VolumeError(Kind::UnsupportedDimension, path.string() + ": more than 3 dimensions");
    Volume vol(shape[0], shape[1], shape.size() == 3 ? shape[2] : 1);
    vol.ndim = static_cast<int>(shape.size());
    const auto spacing = meta.at("spacing").get<std::vector<double>>();
    for (std::size_t i = 0; i < 3; ++i) vol.spacing[Eigen::Index(i)] = i < spacing.size() ? spacing[i] : 1.0;
    const auto rows = meta.at("affine").get<std::vector<std::vector<double>>>();
    if (rows.size() != 4) throw VolumeError(Kind::CorruptHeader, path.string() + ": affine must be 4x4");
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) vol.affine(r, c) = rows.at(r).at(c);
    try {
      vol.dtype = dtype_from_string(meta.at("dtype").get<std::string>());
    } catch (const std::invalid_argument& e) {
      throw VolumeError(Kind::UnsupportedDtype, path.string() + ": " + e.what());
    }
    std::filesystem::path data = path;
    data.replace_extension(".bin");
    if (meta.contains("data")) data = path.parent_path() / meta["data"].get<std::string>();
    const std::string raw = read_file(data);
    if (raw.size() != std::size_t(vol.voxels.size()) * bytes_per_voxel(vol.dtype))
      throw VolumeError(Kind::CorruptHeader, data.string() + ": size does not match shape");
    decode_voxels(raw.data(), vol.dtype, vol.voxels);
    return vol;
  } catch (const nlohmann::json::exception& e) {
    throw VolumeError(Kind::CorruptHeader, path.string() + ": " + e.what());
  }
}

void write_sidecar(const Volume& vol, const std::filesystem::path& path) {
  std::filesystem::path data = path;
  data.replace_extension(".bin");
  nlohmann::json meta;
  std::vector<int> shape{vol.sx(), vol.sy()};
  if (vol.ndim == 3 || vol.sz() > 1) shape.push_back(vol.sz());
  meta["shape"] = shape;
  meta["spacing"] = {vol.spacing[0], vol.spacing[1], vol.spacing[2]};
  meta["affine"] = affine_json(vol.affine);
  meta["dtype"] = to_string(vol.dtype);
  meta["data"] = data.filename().string();
  atomic_write(data, encode_voxels(vol.voxels, vol.dtype));
  atomic_write(path, meta.dump(2) + "\n");
}

}  // namespace

Affine quaternion_affine(double b, double c, double d, const Eigen::Vector3d& offset, const Eigen::Vector3d& spacing,
                         double qfac) {
  double a = 1.0 - (b * b + c * c + d * d);
  if (a < 1e-7) {
    const double n = std::sqrt(b * b + c * c + d * d);
    b /= n;
    c /= n;
    d /= n;
    a = 0.0;
  } else {
    a = std::sqrt(a);
  }
  Eigen::Matrix3d r;
  r << a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c),  //
      2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b),   //
      2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b;
  Eigen::Vector3d scale = spacing;
  scale[2] *= qfac < 0 ? -1.0 : 1.0;
  Affine out = Affine::Identity();
  out.topLeftCorner<3, 3>() = r * scale.asDiagonal();
  out.block<3, 1>(0, 3) = offset;
  return out;
}

bool has_gzip_magic(std::string_view bytes) {
  return bytes.size() >= 2 && static_cast<unsigned char>(bytes[0]) == 0x1f && static_cast<unsigned char>(bytes[1]) == 0x8b;
}

std::string gzip_compress(std::string_view raw) {
  z_stream zs{};
  if (deflateInit2(&zs, 6, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    throw VolumeError(Kind::Io, "deflateInit2 failed");
  std::string out(deflateBound(&zs, static_cast<uLong>(raw.size())) + 32, '\0');
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(raw.data()));
  zs.avail_in = static_cast<uInt>(raw.size());
  zs.next_out = reinterpret_cast<Bytef*>(out.data());
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  const auto written = zs.total_out;
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw VolumeError(Kind::Io, "gzip compression failed");
  out.resize(written);
  return out;
}

std::string gzip_decompress(std::string_view packed) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw VolumeError(Kind::Io, "inflateInit2 failed");
  zs.next_in = reinterpret_cast<Bytef*>(const_cast<char*>(packed.data()));
  zs.avail_in = static_cast<uInt>(packed.size());
  std::string out;
  char buf[1 << 16];
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = reinterpret_cast<Bytef*>(buf);
    zs.avail_out = sizeof(buf);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw VolumeError(Kind::CorruptHeader, "corrupt gzip stream");
    }
    out.append(buf, sizeof(buf) - zs.avail_out);
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw VolumeError(Kind::CorruptHeader, "truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

Volume decode_nifti(std::string_view bytes, const std::string& origin) {
  std::string inflated;
  if (has_gzip_magic(bytes)) {
    try {
      inflated = gzip_decompress(bytes);
    } catch (const VolumeError& e) {
      throw VolumeError(Kind::CorruptHeader, origin + ": " + e.what());
    }
    bytes = inflated;
  }
  if (bytes.size() < sizeof(Nifti1Header)) throw VolumeError(Kind::CorruptHeader, origin + ": file shorter than header");
  Nifti1Header h;
  std::memcpy(&h, bytes.data(), sizeof(h));
  if (h.sizeof_hdr != 348) {
    if (byteswap32(h.sizeof_hdr) == 348)
      throw VolumeError(Kind::UnsupportedByteOrder, origin + ": big-endian NIfTI is not supported");
    throw VolumeError(Kind::CorruptHeader, origin + ": bad sizeof_hdr");
  }
  if (std::memcmp(h.magic, "n+1\0", 4) != 0) throw VolumeError(Kind::CorruptHeader, origin + ": not a single-file NIfTI-1");

  const Geometry g = decode_geometry(h, origin);
  const auto offset = static_cast<std::size_t>(h.vox_offset);
  if (offset < sizeof(Nifti1Header) || h.vox_offset != static_cast<float>(offset))
    throw VolumeError(Kind::CorruptHeader, origin + ": bad vox_offset");
  if (h.bitpix != 8 * bytes_per_voxel(g.dtype)) throw VolumeError(Kind::CorruptHeader, origin + ": bitpix mismatch");

  Volume vol(g.dims[0], g.dims[1], g.dims[2]);
  vol.ndim = g.ndim;
  vol.dtype = g.dtype;
  vol.spacing = g.spacing;
  vol.affine = g.affine;
  const std::size_t need = std::size_t(vol.voxels.size()) * bytes_per_voxel(vol.dtype);
  if (bytes.size() < offset + need) throw VolumeError(Kind::CorruptHeader, origin + ": truncated voxel data");
  decode_voxels(bytes.data() + offset, vol.dtype, vol.voxels);
  vol.source_header.assign(bytes.data(), bytes.data() + offset);
  return vol;
}

std::string encode_nifti(const Volume& vol, bool gzip) {
  vol.validate();
  Nifti1Header h = default_header();
  std::string extension(4, '\0');
  bool fresh = true;
  if (vol.source_header.size() >= sizeof(Nifti1Header)) {
    std::memcpy(&h, vol.source_header.data(), sizeof(h));
    extension.assign(vol.source_header.begin() + sizeof(Nifti1Header), vol.source_header.end());
    fresh = false;
  }
  Geometry old;
  if (!fresh) old = decode_geometry(h, "<header>");

  if (fresh || old.dims != vol.dims || old.ndim != vol.ndim) {
    const int rank = std::max(vol.ndim, vol.sz() > 1 ? 3 : 2);
    if (fresh || h.dim[0] < rank) h.dim[0] = static_cast<std::int16_t>(rank);
    for (int i = 0; i < 3; ++i) h.dim[i + 1] = static_cast<std::int16_t>(vol.dims[i]);
    for (int i = 4; i < 8; ++i) h.dim[i] = 1;
  }
  if (fresh || old.dtype != vol.dtype) {
    h.datatype = nifti_code(vol.dtype);
    h.bitpix = static_cast<std::int16_t>(8 * bytes_per_voxel(vol.dtype));
  }
  if (fresh || old.spacing != vol.spacing)
    for (int i = 0; i < 3; ++i) h.pixdim[i + 1] = static_cast<float>(vol.spacing[i]);
  if (fresh || old.affine != vol.affine) {
    if (h.sform_code <= 0) h.sform_code = kXformScannerAnat;
    for (int c = 0; c < 4; ++c) {
      h.srow_x[c] = static_cast<float>(vol.affine(0, c));
      h.srow_y[c] = static_cast<float>(vol.affine(1, c));
      h.srow_z[c] = static_cast<float>(vol.affine(2, c));
    }
    if (h.qform_code > 0) set_quaternion(h, vol.affine);
  }
  h.vox_offset = static_cast<float>(sizeof(Nifti1Header) + extension.size());

  std::string out(reinterpret_cast<const char*>(&h), sizeof(h));
  out += extension;
  out += encode_voxels(vol.voxels, vol.dtype);
  return gzip ? gzip_compress(out) : out;
}

Volume read_volume(const std::filesystem::path& path) {
  const std::string name = path.string();
  if (ends_with(name, ".json")) return read_sidecar(path);
  return decode_nifti(read_file(path), name);
}

void write_volume(const Volume& vol, const std::filesystem::path& path) {
  const std::string name = path.string();
  if (ends_with(name, ".json")) {
    vol.validate();
    write_sidecar(vol, path);
    return;
  }
  atomic_write(path, encode_nifti(vol, ends_with(name, ".gz")));
}

}  // namespace cmr

namespace cmr {

std::string read_file_bytes(const std::filesystem::path& path) { return read_file(path); }

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) { atomic_write(path, bytes); }

}  // namespace cmr
