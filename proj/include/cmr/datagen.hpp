#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cmr/orient.hpp"
#include "cmr/preprocess.hpp"
#include "cmr/types.hpp"
#include "cmr/volume.hpp"

namespace cmr {

using Rng = std::mt19937_64;

/// Segmentation classes.
enum SegClass : std::uint8_t { kBackground = 0, kRightVentricle = 1, kLeftVentricle = 2, kMyocardium = 3 };
inline constexpr int kNumSegClasses = 4;

/// An image (and optional label map) warped by a drawn orientation code.
struct OrientedPair {
  Slice image;
  std::optional<LabelSlice> labels;
  OrientCode code;
};

/// Draws a code uniformly from the eight classes and applies it to x and y.
OrientedPair generate_pair(const Slice& x, const std::optional<LabelSlice>& y, Rng& rng);
/// Same, with the code fixed.
OrientedPair make_pair_with(const Slice& x, const std::optional<LabelSlice>& y, OrientCode code);

/// Tissue intensities of one synthetic sequence, as fractions of full scale.
struct ModalityProfile {
  std::string name = "bssfp";
  float body = 0.35f;
  float liver = 0.30f;
  float spine = 0.55f;
  float lv_blood = 0.95f;
  float rv_blood = 0.90f;
  float myocardium = 0.22f;
  float noise = 0.02f;
  float texture = 0.05f;
  float shading = 0.0f;  // peak relative gain of a linear coil-sensitivity ramp
};

ModalityProfile bssfp_profile();
/// Tissue ordering differs from bssfp: bright wall, dark blood, bright liver,
/// plus low SNR and coil shading.
ModalityProfile lge_profile();
ModalityProfile profile_by_name(const std::string& name);

struct Phantom {
  Slice image;         // integer-valued intensities, full scale ~1000
  LabelSlice labels;   // SegClass values
};

/// Cardiac-like short-axis slice: an off-center myocardial ring around an LV
/// pool with an RV crescent beside it, inside a textured torso with liver and
/// spine landmarks. Slightly rotated (< 10 degrees) and noisy. The layout has
/// no dihedral symmetry, so the eight oriented variants are all distinct.
Phantom make_phantom(Rng& rng, int size, const ModalityProfile& profile = bssfp_profile());

/// A stack of `slices` phantoms sharing one anatomy (apex-ward shrinking LV),
/// with spacing (spacing, spacing, 8 mm). Returns image and label volumes.
std::pair<Volume, Volume> make_phantom_volume(Rng& rng, int size, int slices, const ModalityProfile& profile,
                                              double spacing = 1.367);

/// Deterministic generator for item `index` of a run seeded with `seed`.
Rng item_rng(std::uint64_t seed, std::uint64_t index);

/// A network-ready training example.
struct Sample {
  int channels = 0;
  int height = 0;
  int width = 0;
  Eigen::ArrayXf image;  // (channel, y, x) order, x fastest
  OrientCode orientation;
  std::optional<Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>> seg;  // (y, x), SegClass values

  Eigen::Matrix<float, 8, 1> one_hot() const;
};

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

/// Shuffled, disjoint, covering split; sizes within one of the exact ratios.
SplitIndices split_indices(std::size_t n, const SplitSpec& spec);

template <typename T>
struct Split {
  std::vector<T> train, val, test;
};

template <typename T>
Split<T> split(const std::vector<T>& data, const SplitSpec& spec) {
  const SplitIndices idx = split_indices(data.size(), spec);
  Split<T> out;
  for (auto i : idx.train) out.train.push_back(data[i]);
  for (auto i : idx.val) out.val.push_back(data[i]);
  for (auto i : idx.test) out.test.push_back(data[i]);
  return out;
}

/// Simplified-network examples: phantom -> generate_pair -> simple_input.
std::vector<Sample> make_simple_dataset(std::size_t count, std::uint64_t seed, const ModalityProfile& profile,
                                        const PreprocConfig& cfg, int phantom_size = 212);

/// Multi-task examples: phantom -> generate_pair -> multitask_input, with the
/// warped label map attached.
std::vector<Sample> make_multitask_dataset(std::size_t count, std::uint64_t seed, const ModalityProfile& profile,
                                           const PreprocConfig& cfg, int phantom_size = 212);

Sample simple_sample(const Slice& image, double spacing, OrientCode code, const PreprocConfig& cfg);
Sample multitask_sample(const Slice& image, const LabelSlice& labels, double spacing, OrientCode code,
                        const PreprocConfig& cfg);

}  // namespace cmr
