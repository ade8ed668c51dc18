#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cmr/types.hpp"
#include "json.hpp"

namespace cmr {

struct PreprocConfig {
  std::vector<double> thresholds{0.6, 0.8, 1.0};  // fractions of the maximum gray value G
  double target_spacing = 1.367;                  // mm
  int multitask_size = 212;
  int simple_size = 100;
  int equalize_bins = 256;

  void validate() const;
};

void to_json(nlohmann::json& j, const PreprocConfig& c);
void from_json(const nlohmann::json& j, PreprocConfig& c);

/// min(img, threshold) per pixel.
Slice truncate(const Slice& img, float threshold);

struct Equalized {
  Slice image;
  bool degenerate = false;  // constant input, returned unchanged
};

/// Histogram equalization onto the integer levels 0..bins-1. Intensities are
/// first quantized linearly between the image min and max into `bins` levels,
/// then remapped through the normalized cumulative histogram.
Equalized equalize(const Slice& img, int bins = 256);

/// channel k = equalize(truncate(img, thresholds[k] * G)).
std::vector<Slice> three_channel(const Slice& img, const PreprocConfig& cfg);

/// Bilinear for images, nearest neighbor for labels; each output dimension is
/// round(dim * spacing_in / spacing_out). Pixel centers are aligned.
Slice resample_inplane(const Slice& img, const Eigen::Vector2d& spacing_in, const Eigen::Vector2d& spacing_out,
                       bool is_label = false);

/// Bilinear resize with independent axis scaling.
Slice resize(const Slice& img, int size_x, int size_y);
inline Slice resize(const Slice& img, int size) { return resize(img, size, size); }

/// Per-slice z-score; constant slices map to zeros.
Slice normalize(const Slice& img);

/// Center crop per axis when larger, symmetric zero pad when smaller.
template <typename Derived>
Grid<typename Derived::Scalar> crop_or_pad(const Eigen::DenseBase<Derived>& img, int size_x, int size_y) {
  if (size_x <= 0 || size_y <= 0) throw std::invalid_argument("crop_or_pad: size must be positive");
  using Out = Grid<typename Derived::Scalar>;
  Out out = Out::Zero(size_x, size_y);
  const int w = static_cast<int>(img.rows());
  const int h = static_cast<int>(img.cols());
  // Offsets of the source window (crop) or destination window (pad).
  const int src_x = w > size_x ? (w - size_x) / 2 : 0;
  const int src_y = h > size_y ? (h - size_y) / 2 : 0;
  const int dst_x = w < size_x ? (size_x - w) / 2 : 0;
  const int dst_y = h < size_y ? (size_y - h) / 2 : 0;
  const int nx = std::min(w, size_x);
  const int ny = std::min(h, size_y);
  out.block(dst_x, dst_y, nx, ny) = img.derived().block(src_x, src_y, nx, ny);
  return out;
}
template <typename Derived>
Grid<typename Derived::Scalar> crop_or_pad(const Eigen::DenseBase<Derived>& img, int size) {
  return crop_or_pad(img, size, size);
}

/// Nearest-neighbor label resampling.
LabelSlice resample_labels(const LabelSlice& labels, const Eigen::Vector2d& spacing_in,
                           const Eigen::Vector2d& spacing_out);

/// Full input pipeline of the simplified recognizer for one slice:
/// resample to target spacing, crop/pad to the multitask frame, resize to
/// simple_size, three_channel, scale levels to [0, 1]. Returns C*H*W values
/// in (channel, y, x) order.
Eigen::ArrayXf simple_input(const Slice& slice, const Eigen::Vector2d& spacing, const PreprocConfig& cfg);

/// Input pipeline of the multi-task network: resample, crop/pad, normalize.
Eigen::ArrayXf multitask_input(const Slice& slice, const Eigen::Vector2d& spacing, const PreprocConfig& cfg);

}  // namespace cmr
