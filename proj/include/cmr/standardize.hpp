#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cmr/nets.hpp"
#include "cmr/orient.hpp"
#include "cmr/preprocess.hpp"
#include "cmr/volume.hpp"
#include "json.hpp"

namespace cmr {

using ClassProbs = Eigen::Matrix<float, 8, 1>;

/// Maps raw slices to probabilities over the eight codes. Implementations
/// must be safe to call concurrently.
class OrientationRecognizer {
 public:
  virtual ~OrientationRecognizer() = default;
  /// One probability vector per slice; all slices share one in-plane spacing.
  virtual std::vector<ClassProbs> probabilities(const std::vector<Slice>& slices, const Eigen::Vector2d& spacing) const = 0;
  virtual std::string name() const = 0;
};

class SimpleRecognizer final : public OrientationRecognizer {
 public:
  SimpleRecognizer(SimpleCnn net, PreprocConfig cfg);
  std::vector<ClassProbs> probabilities(const std::vector<Slice>& slices, const Eigen::Vector2d& spacing) const override;
  std::string name() const override { return "simple"; }

 private:
  SimpleCnn net_;
  PreprocConfig cfg_;
};

class MultiTaskRecognizer final : public OrientationRecognizer {
 public:
  MultiTaskRecognizer(MultiTaskNet net, PreprocConfig cfg);
  std::vector<ClassProbs> probabilities(const std::vector<Slice>& slices, const Eigen::Vector2d& spacing) const override;
  std::string name() const override { return "multitask"; }

 private:
  MultiTaskNet net_;
  PreprocConfig cfg_;
};

/// Builds the recognizer named by the checkpoint's model card. The card's
/// "preprocess" object, when present, overrides the default PreprocConfig.
std::shared_ptr<const OrientationRecognizer> make_recognizer(const ad::Checkpoint& ckpt);
std::shared_ptr<const OrientationRecognizer> load_recognizer(const std::filesystem::path& manifest);

struct SliceVote {
  int slice = 0;
  OrientCode code;
  double confidence = 0.0;  // probability of `code`
  ClassProbs probs = ClassProbs::Zero();
};

struct Recognition {
  std::vector<SliceVote> slices;
  OrientCode consensus;
  double confidence = 0.0;  // mean over slices of the consensus probability
  bool unanimous = true;
};

/// Confidence-weighted vote: each slice adds its confidence to its code;
/// the highest total wins, ties to the lowest code.
Recognition consensus_of(std::vector<SliceVote> votes);

/// Per-slice prediction plus volume-level consensus. Throws on an empty volume.
Recognition recognize(const Volume& vol, const OrientationRecognizer& model);

/// apply_to_volume(invert(code), vol).
Volume correct(const Volume& vol, OrientCode code);

enum class Action { Corrected, AlreadyStandard, SkippedLowConfidence, Failed };
std::string to_string(Action action);

struct StandardizationReport {
  std::string input;
  std::string output;  // empty when nothing was written
  Action action = Action::Failed;
  std::optional<Recognition> recognition;
  std::string error;

  nlohmann::json to_json() const;
};

nlohmann::json to_json(const Recognition& r);

inline constexpr double kDefaultConfidenceFloor = 0.5;

/// recognize -> correct -> write. Consensus 000 leaves the data alone (a
/// byte copy when out_path differs from in_path); a consensus below the floor
/// is reported, not applied. Never throws: failures become Action::Failed.
StandardizationReport standardize_file(const std::filesystem::path& in_path, const std::filesystem::path& out_path,
                                       const OrientationRecognizer& model,
                                       double confidence_floor = kDefaultConfidenceFloor);

}  // namespace cmr
