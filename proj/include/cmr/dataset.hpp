#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cmr/datagen.hpp"

namespace cmr {

struct DatasetSpec {
  std::size_t count = 100;
  std::uint64_t seed = 0;
  int size = 212;
  int slices = 1;
  std::string modality = "bssfp";
  double spacing = 1.367;
  SplitSpec split;
};

struct DatasetRecord {
  std::string split;   // train, val or test
  std::string image;   // path relative to the dataset root
  std::string labels;
  OrientCode code;     // operation applied to the canonical phantom
  std::uint64_t index = 0;
};

/// Writes <dir>/<split>/case_NNNNN.nii.gz and case_NNNNN_seg.nii.gz, one
/// phantom volume each, oriented by a uniformly drawn code, plus
/// <dir>/manifest.jsonl with one record per case.
std::vector<DatasetRecord> write_dataset(const std::filesystem::path& dir, const DatasetSpec& spec);

std::vector<DatasetRecord> read_manifest(const std::filesystem::path& dir);

enum class SampleKind { Simple, MultiTask };

/// Every slice of every case becomes one sample, grouped by split.
Split<Sample> load_dataset(const std::filesystem::path& dir, SampleKind kind, const PreprocConfig& cfg);

}  // namespace cmr
