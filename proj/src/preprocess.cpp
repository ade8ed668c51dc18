#include "cmr/preprocess.hpp"

#include <algorithm>
#include <numeric>

namespace cmr {

void PreprocConfig::validate() const {
  if (thresholds.empty()) throw std::invalid_argument("thresholds must not be empty");
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (!(thresholds[i] > 0.0)) throw std::invalid_argument("thresholds must be positive");
    if (i > 0 && !(thresholds[i] > thresholds[i - 1])) throw std::invalid_argument("thresholds must be strictly increasing");
  }
  if (thresholds.back() != 1.0) throw std::invalid_argument("last threshold must be 1.0");
  if (!(target_spacing > 0.0)) throw std::invalid_argument("target_spacing must be positive");
  if (multitask_size <= 0 || simple_size <= 0) throw std::invalid_argument("sizes must be positive");
  if (equalize_bins < 2) throw std::invalid_argument("equalize_bins must be at least 2");
}

void to_json(nlohmann::json& j, const PreprocConfig& c) {
  j = nlohmann::json{{"thresholds", c.thresholds},
                     {"target_spacing", c.target_spacing},
                     {"multitask_size", c.multitask_size},
                     {"simple_size", c.simple_size},
                     {"equalize_bins", c.equalize_bins}};
}

void from_json(const nlohmann::json& j, PreprocConfig& c) {
  PreprocConfig d;
  c.thresholds = j.value("thresholds", d.thresholds);
  c.target_spacing = j.value("target_spacing", d.target_spacing);
  c.multitask_size = j.value("multitask_size", d.multitask_size);
  c.simple_size = j.value("simple_size", d.simple_size);
  c.equalize_bins = j.value("equalize_bins", d.equalize_bins);
  c.validate();
}

Slice truncate(const Slice& img, float threshold) {
  if (!(threshold > 0.0f)) throw std::invalid_argument("truncate: threshold must be positive");
  return img.min(threshold);
}

Equalized equalize(const Slice& img, int bins) {
  if (bins < 2) throw std::invalid_argument("equalize: need at least 2 bins");
  if (img.size() == 0) return {img, true};
  const float lo = img.minCoeff();
  const float hi = img.maxCoeff();
  if (!(hi > lo)) return {img, true};

  const double scale = double(bins - 1) / (double(hi) - double(lo));
  Grid<int> level(img.rows(), img.cols());
  std::vector<long> hist(std::size_t(bins), 0);
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const int q = std::clamp(static_cast<int>(std::lround((double(img(i)) - lo) * scale)), 0, bins - 1);
    level(i) = q;
    ++hist[std::size_t(q)];
  }
  std::vector<long> cdf(hist.size());
  std::partial_sum(hist.begin(), hist.end(), cdf.begin());
  const long cdf_min = cdf[std::size_t(level.minCoeff())];
  const double denom = double(img.size() - cdf_min);

  Slice out(img.rows(), img.cols());
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const long c = cdf[std::size_t(level(i))];
    out(i) = static_cast<float>(std::round(double(c - cdf_min) / denom * (bins - 1)));
  }
  return {out, false};
}

std::vector<Slice> three_channel(const Slice& img, const PreprocConfig& cfg) {
  const float g = img.size() ? img.maxCoeff() : 0.0f;
  if (!(g > 0.0f)) throw std::invalid_argument("three_channel: maximum gray value must be positive");
  std::vector<Slice> channels;
  channels.reserve(cfg.thresholds.size());
  for (double t : cfg.thresholds) {
    const float level = static_cast<float>(t * g);
    channels.push_back(equalize(truncate(img, level), cfg.equalize_bins).image);
  }
  return channels;
}

namespace {

struct Tap {
  int i0;
  int i1;
  float w1;
};

// Center-aligned linear taps for an axis of `in` samples resampled to `out`
// samples, where one output step covers `step` input samples.
std::vector<Tap> linear_taps(int in, int out, double step) {
  std::vector<Tap> taps(static_cast<std::size_t>(out));
  for (int i = 0; i < out; ++i) {
    double s = (i + 0.5) * step - 0.5;
    s = std::clamp(s, 0.0, double(in - 1));
    const int i0 = static_cast<int>(std::floor(s));
    const int i1 = std::min(i0 + 1, in - 1);
    taps[std::size_t(i)] = {i0, i1, static_cast<float>(s - i0)};
  }
  return taps;
}

std::vector<int> nearest_taps(int in, int out, double step) {
  std::vector<int> idx(static_cast<std::size_t>(out));
  for (int i = 0; i < out; ++i)
    idx[std::size_t(i)] = std::clamp(static_cast<int>(std::floor((i + 0.5) * step)), 0, in - 1);
  return idx;
}

Slice bilinear(const Slice& img, int out_x, int out_y, double step_x, double step_y) {
  const auto tx = linear_taps(static_cast<int>(img.rows()), out_x, step_x);
  const auto ty = linear_taps(static_cast<int>(img.cols()), out_y, step_y);
  Slice out(out_x, out_y);
  for (int y = 0; y < out_y; ++y) {
    const Tap& b = ty[std::size_t(y)];
    for (int x = 0; x < out_x; ++x) {
      const Tap& a = tx[std::size_t(x)];
      const float top = img(a.i0, b.i0) * (1.0f - a.w1) + img(a.i1, b.i0) * a.w1;
      const float bottom = img(a.i0, b.i1) * (1.0f - a.w1) + img(a.i1, b.i1) * a.w1;
      out(x, y) = top * (1.0f - b.w1) + bottom * b.w1;
    }
  }
  return out;
}

template <typename Scalar>
Grid<Scalar> nearest(const Grid<Scalar>& img, int out_x, int out_y, double step_x, double step_y) {
  const auto ix = nearest_taps(static_cast<int>(img.rows()), out_x, step_x);
  const auto iy = nearest_taps(static_cast<int>(img.cols()), out_y, step_y);
  Grid<Scalar> out(out_x, out_y);
  for (int y = 0; y < out_y; ++y)
    for (int x = 0; x < out_x; ++x) out(x, y) = img(ix[std::size_t(x)], iy[std::size_t(y)]);
  return out;
}

std::pair<int, int> resampled_dims(Eigen::Index w, Eigen::Index h, const Eigen::Vector2d& in, const Eigen::Vector2d& out) {
  if (!(in.array() > 0).all() || !(out.array() > 0).all()) throw std::invalid_argument("resample: spacing must be positive");
  const int nx = std::max(1, static_cast<int>(std::lround(double(w) * in[0] / out[0])));
  const int ny = std::max(1, static_cast<int>(std::lround(double(h) * in[1] / out[1])));
  return {nx, ny};
}

}  // namespace

Slice resample_inplane(const Slice& img, const Eigen::Vector2d& spacing_in, const Eigen::Vector2d& spacing_out,
                       bool is_label) {
  const auto [nx, ny] = resampled_dims(img.rows(), img.cols(), spacing_in, spacing_out);
  if (nx == img.rows() && ny == img.cols() && spacing_in == spacing_out) return img;
  const double step_x = double(img.rows()) / nx;
  const double step_y = double(img.cols()) / ny;
  return is_label ? nearest(img, nx, ny, step_x, step_y) : bilinear(img, nx, ny, step_x, step_y);
}

LabelSlice resample_labels(const LabelSlice& labels, const Eigen::Vector2d& spacing_in,
                           const Eigen::Vector2d& spacing_out) {
  const auto [nx, ny] = resampled_dims(labels.rows(), labels.cols(), spacing_in, spacing_out);
  return nearest(labels, nx, ny, double(labels.rows()) / nx, double(labels.cols()) / ny);
}

Slice resize(const Slice& img, int size_x, int size_y) {
  if (size_x <= 0 || size_y <= 0) throw std::invalid_argument("resize: size must be positive");
  if (img.rows() == size_x && img.cols() == size_y) return img;
  return bilinear(img, size_x, size_y, double(img.rows()) / size_x, double(img.cols()) / size_y);
}

Slice normalize(const Slice& img) {
  if (img.size() == 0) return img;
  const double mean = img.cast<double>().mean();
  const double var = (img.cast<double>() - mean).square().mean();
  if (!(var > 0.0)) return Slice::Zero(img.rows(), img.cols());
  return ((img.cast<double>() - mean) / std::sqrt(var)).cast<float>();
}

namespace {

Slice to_frame(const Slice& slice, const Eigen::Vector2d& spacing, const PreprocConfig& cfg) {
  const Eigen::Vector2d target(cfg.target_spacing, cfg.target_spacing);
  return crop_or_pad(resample_inplane(slice, spacing, target), cfg.multitask_size);
}

}  // namespace

Eigen::ArrayXf simple_input(const Slice& slice, const Eigen::Vector2d& spacing, const PreprocConfig& cfg) {
  const Slice small = resize(to_frame(slice, spacing, cfg), cfg.simple_size);
  const Eigen::Index plane = small.size();
  Eigen::ArrayXf out(plane * Eigen::Index(cfg.thresholds.size()));
  if (!(small.maxCoeff() > 0.0f)) {
    out.setZero();
    return out;
  }
  const auto channels = three_channel(small, cfg);
  const float scale = 1.0f / float(cfg.equalize_bins - 1);
  for (std::size_t c = 0; c < channels.size(); ++c)
    out.segment(Eigen::Index(c) * plane, plane) = channels[c].reshaped() * scale;
  return out;
}

Eigen::ArrayXf multitask_input(const Slice& slice, const Eigen::Vector2d& spacing, const PreprocConfig& cfg) {
  return normalize(to_frame(slice, spacing, cfg)).reshaped();
}

}  // namespace cmr
