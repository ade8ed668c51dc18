#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "cmr/volume.hpp"

namespace cmr {

class VolumeError : public std::runtime_error {
 public:
  enum class Kind { Io, CorruptHeader, UnsupportedDtype, UnsupportedDimension, UnsupportedByteOrder };

  VolumeError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

/// Reads .nii, .nii.gz, or a .json sidecar (with its .bin voxel file).
Volume read_volume(const std::filesystem::path& path);

/// Writes by extension (.nii, .nii.gz, .json). The file is written to a
/// temporary name in the destination directory and renamed into place.
void write_volume(const Volume& vol, const std::filesystem::path& path);

/// In-memory NIfTI-1 codec; gzip input is detected from its magic bytes.
Volume decode_nifti(std::string_view bytes, const std::string& origin = "<memory>");
std::string encode_nifti(const Volume& vol, bool gzip);

/// Affine from NIfTI quaternion parameters (qform).
Affine quaternion_affine(double b, double c, double d, const Eigen::Vector3d& offset, const Eigen::Vector3d& spacing,
                         double qfac);

/// Whole-file read; VolumeError(Io) on failure.
std::string read_file_bytes(const std::filesystem::path& path);
/// Temp file in the destination directory, then rename.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

bool has_gzip_magic(std::string_view bytes);
std::string gzip_compress(std::string_view raw);
std::string gzip_decompress(std::string_view packed);

}  // namespace cmr
