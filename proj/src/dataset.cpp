#include "cmr/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "cmr/volume_io.hpp"
#include "json.hpp"

namespace cmr {

namespace fs = std::filesystem;

std::vector<DatasetRecord> write_dataset(const fs::path& dir, const DatasetSpec& spec) {
  if (spec.count < 10) throw std::invalid_argument("gen-dataset: need at least 10 cases");
  const ModalityProfile profile = profile_by_name(spec.modality);
  const SplitIndices parts = split_indices(spec.count, spec.split);
  std::vector<std::string> split_of(spec.count);
  for (auto i : parts.train) split_of[i] = "train";
  for (auto i : parts.val) split_of[i] = "val";
  for (auto i : parts.test) split_of[i] = "test";
  for (const char* s : {"train", "val", "test"}) fs::create_directories(dir / s);

  std::vector<DatasetRecord> records;
  std::string manifest;
  for (std::size_t i = 0; i < spec.count; ++i) {
    Rng rng = item_rng(spec.seed, i);
    auto [image, labels] = make_phantom_volume(rng, spec.size, spec.slices, profile, spec.spacing);
    const OrientCode code = OrientCode::from_index(std::uniform_int_distribution<int>(0, 7)(rng));
    char stem[32];
    std::snprintf(stem, sizeof stem, "case_%05zu", i);
    DatasetRecord r{split_of[i], split_of[i] + "/" + stem + ".nii.gz", split_of[i] + "/" + stem + "_seg.nii.gz", code, i};
    write_volume(apply_to_volume(code, image), dir / r.image);
    write_volume(apply_to_volume(code, labels), dir / r.labels);
    manifest += nlohmann::json{{"split", r.split}, {"image", r.image}, {"labels", r.labels}, {"orientation", code.str()},
                               {"index", i}, {"modality", spec.modality}, {"seed", spec.seed}}
                    .dump() +
                "\n";
    records.push_back(std::move(r));
  }
  write_file_atomic(dir / "manifest.jsonl", manifest);
  return records;
}

std::vector<DatasetRecord> read_manifest(const fs::path& dir) {
  std::vector<DatasetRecord> out;
  std::istringstream lines(read_file_bytes(dir / "manifest.jsonl"));
  for (std::string line; std::getline(lines, line);) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    out.push_back({j.at("split").get<std::string>(), j.at("image").get<std::string>(), j.value("labels", ""),
                   OrientCode::parse(j.at("orientation").get<std::string>()), j.value("index", std::uint64_t{0})});
  }
  return out;
}

Split<Sample> load_dataset(const fs::path& dir, SampleKind kind, const PreprocConfig& cfg) {
  Split<Sample> out;
  for (const auto& r : read_manifest(dir)) {
    std::vector<Sample>& bucket = r.split == "train" ? out.train : r.split == "val" ? out.val : out.test;
    const Volume image = read_volume(dir / r.image);
    const double spacing = image.spacing[0];
    if (std::abs(image.spacing[1] - spacing) > 1e-9)
      throw std::invalid_argument(r.image + ": anisotropic in-plane spacing is not supported for training");
    if (kind == SampleKind::Simple) {
      for (const auto& s : iter_slices(image)) bucket.push_back(simple_sample(s.data, spacing, r.code, cfg));
      continue;
    }
    const Volume labels = read_volume(dir / r.labels);
    for (const auto& s : iter_slices(image))
      bucket.push_back(multitask_sample(s.data, labels.slice(s.index).cast<std::uint8_t>(), spacing, r.code, cfg));
  }
  return out;
}

}  // namespace cmr
