#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cmr/optim.hpp"
#include "json.hpp"

namespace cmr::ad {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointEntry {
  std::string name;
  Shape shape;
  Eigen::ArrayXf values;
};

/// Named float32 tensors plus a free-form model card.
struct Checkpoint {
  nlohmann::json card = nlohmann::json::object();
  std::vector<CheckpointEntry> tensors;

  const CheckpointEntry* find(const std::string& name) const;
};

/// Copies current values of `params` (no gradients).
Checkpoint snapshot(const ParamList<float>& params, nlohmann::json card = nlohmann::json::object());

/// Writes values back into `params`. Every parameter must be present with the
/// same shape; extra checkpoint entries are ignored.
void restore(const ParamList<float>& params, const Checkpoint& ckpt);

/// `path` is the JSON manifest; the buffers go to the same stem with a .bin
/// extension. Both files are written atomically.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace cmr::ad
