#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cmr/standardize.hpp"

namespace cmr {

struct BatchOptions {
  std::filesystem::path input;                     // folder
  std::optional<std::filesystem::path> output_dir;  // mirrors the input tree
  bool in_place = false;
  bool recursive = false;
  double confidence_floor = kDefaultConfidenceFloor;
  int jobs = 1;
  std::optional<std::filesystem::path> report_path;  // JSON-lines
};

struct BatchResult {
  int exit_code = 0;  // 0 all ok, 2 some skipped or failed, 1 fatal setup error
  std::vector<StandardizationReport> reports;  // sorted by input path
  std::string fatal_error;

  std::string jsonl() const;
};

/// .nii and .nii.gz files under `folder`, sorted.
std::vector<std::filesystem::path> find_volumes(const std::filesystem::path& folder, bool recursive);

/// Standardizes every volume in the folder. Per-file errors are reported and
/// never stop the batch.
BatchResult adjust_batch(const BatchOptions& opts, const OrientationRecognizer& model);

/// Loads the model first; a missing or unreadable model is a fatal error
/// (exit code 1) before any file is touched.
BatchResult adjust_batch(const BatchOptions& opts, const std::filesystem::path& model_path);

}  // namespace cmr
