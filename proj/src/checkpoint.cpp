#include "cmr/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "cmr/volume_io.hpp"

namespace cmr::ad {

static_assert(std::endian::native == std::endian::little, "checkpoint buffers are little-endian");

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : tensors)
    if (e.name == name) return &e;
  return nullptr;
}

Checkpoint snapshot(const ParamList<float>& params, nlohmann::json card) {
  Checkpoint ckpt;
  ckpt.card = std::move(card);
  for (const auto& p : params) ckpt.tensors.push_back({p.name, p.tensor.shape(), p.tensor.value()});
  return ckpt;
}

void restore(const ParamList<float>& params, const Checkpoint& ckpt) {
  // Validate everything before touching any parameter.
  for (const auto& p : params) {
    const CheckpointEntry* e = ckpt.find(p.name);
    if (!e) throw CheckpointError("checkpoint has no tensor '" + p.name + "'");
    if (e->shape != p.tensor.shape())
      throw CheckpointError("tensor '" + p.name + "': checkpoint shape " + shape_str(e->shape) + ", model expects " +
                            shape_str(p.tensor.shape()));
  }
  for (const auto& p : params) p.tensor.mutable_value() = ckpt.find(p.name)->values;
}

namespace {

std::filesystem::path data_path(const std::filesystem::path& manifest) {
  std::filesystem::path p = manifest;
  return p.replace_extension(".bin");
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  nlohmann::json entries = nlohmann::json::array();
  std::string data;
  for (const auto& e : ckpt.tensors) {
    if (numel(e.shape) != e.values.size()) throw CheckpointError("tensor '" + e.name + "': values do not match shape");
    entries.push_back({{"name", e.name},
                       {"shape", e.shape},
                       {"dtype", "f32"},
                       {"offset", data.size()},
                       {"count", e.values.size()}});
    data.append(reinterpret_cast<const char*>(e.values.data()), std::size_t(e.values.size()) * sizeof(float));
  }
  const nlohmann::json manifest{{"format", "cmr-checkpoint"},
                                {"version", 1},
                                {"data_file", data_path(path).filename().string()},
                                {"byte_order", "little"},
                                {"card", ckpt.card},
                                {"tensors", entries}};
  write_file_atomic(data_path(path), data);
  write_file_atomic(path, manifest.dump(2) + "\n");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file_bytes(path));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(path.string() + ": malformed manifest: " + e.what());
  }
  if (manifest.value("format", "") != "cmr-checkpoint") throw CheckpointError(path.string() + ": not a checkpoint manifest");
  const std::filesystem::path bin = path.parent_path() / manifest.at("data_file").get<std::string>();
  const std::string data = read_file_bytes(bin);

  Checkpoint ckpt;
  ckpt.card = manifest.value("card", nlohmann::json::object());
  for (const auto& e : manifest.at("tensors")) {
    CheckpointEntry entry;
    entry.name = e.at("name").get<std::string>();
    entry.shape = e.at("shape").get<Shape>();
    if (e.value("dtype", "f32") != "f32") throw CheckpointError("tensor '" + entry.name + "': unsupported dtype");
    const auto offset = e.at("offset").get<std::size_t>();
    const auto count = e.at("count").get<std::size_t>();
    if (Eigen::Index(count) != numel(entry.shape)) throw CheckpointError("tensor '" + entry.name + "': count does not match shape");
    if (offset + count * sizeof(float) > data.size())
      throw CheckpointError("tensor '" + entry.name + "': buffer extends past end of " + bin.string());
    entry.values.resize(Eigen::Index(count));
    std::memcpy(entry.values.data(), data.data() + offset, count * sizeof(float));
    ckpt.tensors.push_back(std::move(entry));
  }
  return ckpt;
}

}  // namespace cmr::ad
