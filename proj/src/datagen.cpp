#include "cmr/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace cmr {

OrientedPair make_pair_with(const Slice& x, const std::optional<LabelSlice>& y, OrientCode code) {
  if (x.size() == 0) throw std::invalid_argument("generate_pair: empty image");
  if (y && (y->rows() != x.rows() || y->cols() != x.cols()))
    throw std::invalid_argument("generate_pair: label dims differ from image dims");
  OrientedPair out{apply(code, x), std::nullopt, code};
  if (y) out.labels = apply(code, *y);
  return out;
}

OrientedPair generate_pair(const Slice& x, const std::optional<LabelSlice>& y, Rng& rng) {
  std::uniform_int_distribution<int> pick(0, int(kNumOrientations) - 1);
  return make_pair_with(x, y, OrientCode::from_index(pick(rng)));
}

ModalityProfile bssfp_profile() { return ModalityProfile{}; }

ModalityProfile lge_profile() {
  // Late-enhancement look: bright myocardial wall around dark blood, bright
  // liver, dark spine and body wall, low SNR and surface-coil shading.
  ModalityProfile p;
  p.name = "lge";
  p.body = 0.15f;
  p.liver = 0.80f;
  p.spine = 0.20f;
  p.lv_blood = 0.20f;
  p.rv_blood = 0.18f;
  p.myocardium = 0.55f;
  p.noise = 0.12f;
  p.texture = 0.10f;
  p.shading = 0.3f;
  return p;
}

ModalityProfile profile_by_name(const std::string& name) {
  if (name == "bssfp") return bssfp_profile();
  if (name == "lge") return lge_profile();
  throw std::invalid_argument("unknown modality '" + name + "'");
}

namespace {

constexpr float kFullScale = 1000.0f;

struct Anatomy {
  double angle;     // global in-plane rotation, radians
  double scale;
  Eigen::Vector2d lv_center;
  double lv_radius;
  double wall;
  double rv_angle;
  double rv_radius;
  Eigen::Vector2d liver_center;
  Eigen::Vector2d texture_freq[3];
  double texture_phase[3];
  std::vector<Eigen::Vector2d> outliers;
};

Anatomy draw_anatomy(Rng& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double deg = std::numbers::pi / 180.0;
  Anatomy a;
  a.angle = 9.5 * deg * u(rng);
  a.scale = 1.0 + 0.06 * u(rng);
  a.lv_center = Eigen::Vector2d(0.12 + 0.015 * u(rng), 0.06 + 0.015 * u(rng));
  a.lv_radius = 0.07 + 0.01 * u(rng);
  a.wall = 0.035 + 0.005 * u(rng);
  a.rv_angle = (165.0 + 10.0 * u(rng)) * deg;
  a.rv_radius = 0.085 + 0.01 * u(rng);
  a.liver_center = Eigen::Vector2d(-0.2 + 0.02 * u(rng), -0.17 + 0.02 * u(rng));
  for (int i = 0; i < 3; ++i) {
    a.texture_freq[i] = Eigen::Vector2d(6.0 + 10.0 * unit(rng), 6.0 + 10.0 * unit(rng));
    a.texture_phase[i] = 2.0 * std::numbers::pi * unit(rng);
  }
  const int n_outliers = 2 + static_cast<int>(unit(rng) * 3.0);
  for (int i = 0; i < n_outliers; ++i) a.outliers.emplace_back(0.3 * u(rng), 0.22 * u(rng));
  return a;
}

bool in_ellipse(const Eigen::Vector2d& p, const Eigen::Vector2d& c, double rx, double ry) {
  const double dx = (p.x() - c.x()) / rx;
  const double dy = (p.y() - c.y()) / ry;
  return dx * dx + dy * dy <= 1.0;
}

// Renders one slice; `shrink` scales the heart for apex-ward slices.
Phantom render(const Anatomy& a, int size, const ModalityProfile& prof, double shrink, Rng& rng) {
  Phantom out{Slice::Zero(size, size), LabelSlice::Zero(size, size)};
  std::normal_distribution<double> noise(0.0, prof.noise);
  Eigen::Vector2d ramp = Eigen::Vector2d::Zero();
  if (prof.shading > 0.0f) {
    const double phi = std::uniform_real_distribution<double>(0.0, 2.0 * std::numbers::pi)(rng);
    ramp = 2.0 * prof.shading * Eigen::Vector2d(std::cos(phi), std::sin(phi));
  }
  const double ca = std::cos(-a.angle);
  const double sa = std::sin(-a.angle);
  const double lv_in = a.lv_radius * shrink;
  const double lv_out = lv_in + a.wall;
  const Eigen::Vector2d rv_center = a.lv_center + (lv_in + 0.035) * Eigen::Vector2d(std::cos(a.rv_angle), std::sin(a.rv_angle));
  const double rv_r = a.rv_radius * shrink;

  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const Eigen::Vector2d q((x + 0.5) / size - 0.5, (y + 0.5) / size - 0.5);
      // Evaluate the canonical layout at the un-rotated, un-scaled position.
      const Eigen::Vector2d p = Eigen::Vector2d(ca * q.x() - sa * q.y(), sa * q.x() + ca * q.y()) / a.scale;
      double v = 0.0;
      std::uint8_t label = kBackground;
      if (in_ellipse(p, {0.0, -0.02}, 0.42, 0.33)) {
        double tex = 0.0;
        for (int i = 0; i < 3; ++i)
          tex += std::sin(a.texture_freq[i].dot(p) * 2.0 * std::numbers::pi + a.texture_phase[i]);
        v = prof.body * (1.0 + prof.texture * tex / 3.0);
        if (in_ellipse(p, a.liver_center, 0.14, 0.09)) v = prof.liver;
        if (in_ellipse(p, {0.02, -0.27}, 0.045, 0.04)) v = prof.spine;
        const double r_lv = (p - a.lv_center).norm();
        const double r_rv = (p - rv_center).norm();
        if (r_lv <= lv_in) {
          v = prof.lv_blood;
          label = kLeftVentricle;
        } else if (r_lv <= lv_out) {
          v = prof.myocardium;
          label = kMyocardium;
        } else if (r_rv <= rv_r && r_lv > lv_out + 0.008) {
          v = prof.rv_blood;
          label = kRightVentricle;
        }
        v = v * (1.0 + ramp.dot(q)) + noise(rng);
      }
      out.image(x, y) = static_cast<float>(std::max(0.0, v));
      out.labels(x, y) = label;
    }
  }
  // Small bright spots (fat, vessels) far above tissue levels.
  for (const auto& o : a.outliers) {
    const Eigen::Vector2d q = a.scale * Eigen::Vector2d(ca * o.x() + sa * o.y(), -sa * o.x() + ca * o.y());
    const int cx = std::clamp(static_cast<int>((q.x() + 0.5) * size), 0, size - 2);
    const int cy = std::clamp(static_cast<int>((q.y() + 0.5) * size), 0, size - 2);
    if (out.labels.block(cx, cy, 2, 2).any()) continue;
    out.image.block(cx, cy, 2, 2).setConstant(1.9f);
  }
  out.image = (out.image * kFullScale).round();
  return out;
}

}  // namespace

Phantom make_phantom(Rng& rng, int size, const ModalityProfile& profile) {
  if (size < 32) throw std::invalid_argument("make_phantom: size must be at least 32");
  const Anatomy a = draw_anatomy(rng);
  return render(a, size, profile, 1.0, rng);
}

std::pair<Volume, Volume> make_phantom_volume(Rng& rng, int size, int slices, const ModalityProfile& profile,
                                              double spacing) {
  if (slices < 1) throw std::invalid_argument("make_phantom_volume: need at least one slice");
  const Anatomy a = draw_anatomy(rng);
  const Eigen::Vector3d sp(spacing, spacing, 8.0);
  Volume image = make_volume(size, size, slices, sp, DType::I16);
  Volume labels = make_volume(size, size, slices, sp, DType::U8);
  if (slices == 1) image.ndim = labels.ndim = 2;
  for (int z = 0; z < slices; ++z) {
    const double shrink = slices == 1 ? 1.0 : 1.0 - 0.2 * z / double(slices - 1);
    const Phantom p = render(a, size, profile, shrink, rng);
    image.set_slice(z, p.image);
    labels.set_slice(z, p.labels.cast<float>());
  }
  return {image, labels};
}

Rng item_rng(std::uint64_t seed, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  return Rng(seq);
}

Eigen::Matrix<float, 8, 1> Sample::one_hot() const {
  Eigen::Matrix<float, 8, 1> v = Eigen::Matrix<float, 8, 1>::Zero();
  v[orientation.index()] = 1.0f;
  return v;
}

SplitIndices split_indices(std::size_t n, const SplitSpec& spec) {
  if (n < 10) throw std::invalid_argument("split: dataset needs at least 10 items");
  if (spec.train < 0 || spec.val < 0 || spec.test < 0 || std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9)
    throw std::invalid_argument("split: ratios must be non-negative and sum to 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(spec.seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(spec.train * double(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(spec.val * double(n))));
  SplitIndices out;
  out.train.assign(order.begin(), order.begin() + std::ptrdiff_t(n_train));
  out.val.assign(order.begin() + std::ptrdiff_t(n_train), order.begin() + std::ptrdiff_t(n_train + n_val));
  out.test.assign(order.begin() + std::ptrdiff_t(n_train + n_val), order.end());
  return out;
}

Sample simple_sample(const Slice& image, double spacing, OrientCode code, const PreprocConfig& cfg) {
  Sample s;
  s.channels = static_cast<int>(cfg.thresholds.size());
  s.height = s.width = cfg.simple_size;
  s.image = simple_input(image, Eigen::Vector2d(spacing, spacing), cfg);
  s.orientation = code;
  return s;
}

Sample multitask_sample(const Slice& image, const LabelSlice& labels, double spacing, OrientCode code,
                        const PreprocConfig& cfg) {
  Sample s;
  s.channels = 1;
  s.height = s.width = cfg.multitask_size;
  const Eigen::Vector2d sp(spacing, spacing);
  s.image = multitask_input(image, sp, cfg);
  const Eigen::Vector2d target(cfg.target_spacing, cfg.target_spacing);
  s.seg = crop_or_pad(resample_labels(labels, sp, target), cfg.multitask_size).reshaped();
  s.orientation = code;
  return s;
}

std::vector<Sample> make_simple_dataset(std::size_t count, std::uint64_t seed, const ModalityProfile& profile,
                                        const PreprocConfig& cfg, int phantom_size) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = item_rng(seed, i);
    const Phantom p = make_phantom(rng, phantom_size, profile);
    const OrientedPair pair = generate_pair(p.image, std::nullopt, rng);
    out.push_back(simple_sample(pair.image, cfg.target_spacing, pair.code, cfg));
  }
  return out;
}

std::vector<Sample> make_multitask_dataset(std::size_t count, std::uint64_t seed, const ModalityProfile& profile,
                                           const PreprocConfig& cfg, int phantom_size) {
  std::vector<Sample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng = item_rng(seed, i);
    const Phantom p = make_phantom(rng, phantom_size, profile);
    const OrientedPair pair = generate_pair(p.image, p.labels, rng);
    out.push_back(multitask_sample(pair.image, *pair.labels, cfg.target_spacing, pair.code, cfg));
  }
  return out;
}

}  // namespace cmr
