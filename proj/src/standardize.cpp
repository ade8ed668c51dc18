#include "cmr/standardize.hpp"

#include <algorithm>

#include "cmr/volume_io.hpp"

namespace cmr {

namespace {

std::vector<ClassProbs> rows_of(const TensorF& probs) {
  std::vector<ClassProbs> out;
  for (int i = 0; i < probs.dim(0); ++i) out.emplace_back(probs.value().segment(Eigen::Index(i) * 8, 8).matrix());
  return out;
}

// Inference in chunks keeps peak memory flat for tall stacks.
constexpr std::size_t kChunk = 8;

}  // namespace

SimpleRecognizer::SimpleRecognizer(SimpleCnn net, PreprocConfig cfg) : net_(std::move(net)), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (net_.config().input_size != cfg_.simple_size || net_.config().in_channels != int(cfg_.thresholds.size()))
    throw std::invalid_argument("simple recognizer: network input does not match preprocessing config");
}

std::vector<ClassProbs> SimpleRecognizer::probabilities(const std::vector<Slice>& slices, const Eigen::Vector2d& spacing) const {
  ad::NoGradGuard no_grad;
  std::vector<ClassProbs> out;
  const int c = int(cfg_.thresholds.size()), s = cfg_.simple_size;
  for (std::size_t i = 0; i < slices.size(); i += kChunk) {
    const std::size_t n = std::min(kChunk, slices.size() - i);
    Eigen::ArrayXf data(Eigen::Index(n) * c * s * s);
    for (std::size_t k = 0; k < n; ++k) data.segment(Eigen::Index(k) * c * s * s, c * s * s) = simple_input(slices[i + k], spacing, cfg_);
    const TensorF x = TensorF::from_data({int(n), c, s, s}, std::move(data));
    for (auto& p : rows_of(class_probabilities(net_.forward(x), net_.config().head))) out.push_back(p);
  }
  return out;
}

MultiTaskRecognizer::MultiTaskRecognizer(MultiTaskNet net, PreprocConfig cfg) : net_(std::move(net)), cfg_(std::move(cfg)) {
  cfg_.validate();
  if (net_.config().input_size != cfg_.multitask_size || net_.config().in_channels != 1)
    throw std::invalid_argument("multitask recognizer: network input does not match preprocessing config");
}

std::vector<ClassProbs> MultiTaskRecognizer::probabilities(const std::vector<Slice>& slices, const Eigen::Vector2d& spacing) const {
  ad::NoGradGuard no_grad;
  std::vector<ClassProbs> out;
  const int s = cfg_.multitask_size;
  for (std::size_t i = 0; i < slices.size(); i += kChunk) {
    const std::size_t n = std::min(kChunk, slices.size() - i);
    Eigen::ArrayXf data(Eigen::Index(n) * s * s);
    for (std::size_t k = 0; k < n; ++k) data.segment(Eigen::Index(k) * s * s, s * s) = multitask_input(slices[i + k], spacing, cfg_);
    const TensorF x = TensorF::from_data({int(n), 1, s, s}, std::move(data));
    for (auto& p : rows_of(class_probabilities(net_.forward(x).head, net_.config().head))) out.push_back(p);
  }
  return out;
}

std::shared_ptr<const OrientationRecognizer> make_recognizer(const ad::Checkpoint& ckpt) {
  PreprocConfig pre;
  if (ckpt.card.contains("preprocess")) pre = ckpt.card.at("preprocess").get<PreprocConfig>();
  const std::string model = ckpt.card.value("model", "");
  if (model == "simple") return std::make_shared<SimpleRecognizer>(SimpleCnn::from_checkpoint(ckpt), pre);
  if (model == "multitask") return std::make_shared<MultiTaskRecognizer>(MultiTaskNet::from_checkpoint(ckpt), pre);
  throw ad::CheckpointError("model card names unknown model '" + model + "'");
}

std::shared_ptr<const OrientationRecognizer> load_recognizer(const std::filesystem::path& manifest) {
  return make_recognizer(ad::load_checkpoint(manifest));
}

Recognition consensus_of(std::vector<SliceVote> votes) {
  if (votes.empty()) throw std::invalid_argument("consensus: no slices");
  std::array<double, kNumOrientations> score{};
  for (const auto& v : votes) score[std::size_t(v.code.index())] += v.confidence;
  int best = 0;
  for (int c = 1; c < int(kNumOrientations); ++c)
    if (score[std::size_t(c)] > score[std::size_t(best)]) best = c;
  Recognition r;
  r.consensus = OrientCode::from_index(best);
  double total = 0;
  for (const auto& v : votes) {
    total += v.probs[best];
    r.unanimous = r.unanimous && v.code == r.consensus;
  }
  r.confidence = std::clamp(total / double(votes.size()), 0.0, 1.0);
  r.slices = std::move(votes);
  return r;
}

Recognition recognize(const Volume& vol, const OrientationRecognizer& model) {
  if (vol.voxels.size() == 0 || vol.sz() < 1) throw std::invalid_argument("recognize: empty volume");
  std::vector<Slice> slices;
  for (auto& s : iter_slices(vol)) slices.push_back(std::move(s.data));
  const auto probs = model.probabilities(slices, vol.spacing.head<2>());
  if (probs.size() != slices.size()) throw std::logic_error("recognizer returned the wrong number of predictions");
  std::vector<SliceVote> votes;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    SliceVote v;
    v.slice = int(k);
    v.probs = probs[k];
    v.code = predict_code(v.probs);
    v.confidence = v.probs[v.code.index()];
    votes.push_back(v);
  }
  return consensus_of(std::move(votes));
}

Volume correct(const Volume& vol, OrientCode code) { return apply_to_volume(invert(code), vol); }

std::string to_string(Action action) {
  switch (action) {
    case Action::Corrected: return "corrected";
    case Action::AlreadyStandard: return "already-standard";
    case Action::SkippedLowConfidence: return "skipped-low-confidence";
    case Action::Failed: return "failed";
  }
  return "failed";
}

nlohmann::json to_json(const Recognition& r) {
  nlohmann::json slices = nlohmann::json::array();
  for (const auto& v : r.slices) {
    std::vector<float> p(v.probs.data(), v.probs.data() + 8);
    slices.push_back({{"slice", v.slice}, {"code", v.code.str()}, {"confidence", v.confidence}, {"probabilities", p}});
  }
  return {{"consensus", r.consensus.str()}, {"confidence", r.confidence}, {"unanimous", r.unanimous}, {"slices", slices}};
}

nlohmann::json StandardizationReport::to_json() const {
  nlohmann::json j{{"input", input}, {"output", output.empty() ? nlohmann::json(nullptr) : nlohmann::json(output)},
                   {"action", cmr::to_string(action)}};
  if (recognition) {
    const nlohmann::json r = cmr::to_json(*recognition);
    j["consensus"] = r["consensus"];
    j["confidence"] = r["confidence"];
    j["unanimous"] = r["unanimous"];
    j["slices"] = r["slices"];
  } else {
    j["consensus"] = nullptr;
    j["confidence"] = nullptr;
    j["unanimous"] = nullptr;
    j["slices"] = nlohmann::json::array();
  }
  j["error"] = error.empty() ? nlohmann::json(nullptr) : nlohmann::json(error);
  return j;
}

StandardizationReport standardize_file(const std::filesystem::path& in_path, const std::filesystem::path& out_path,
                                       const OrientationRecognizer& model, double confidence_floor) {
  StandardizationReport report;
  report.input = in_path.string();
  try {
    const std::string bytes = read_file_bytes(in_path);
    const std::string name = in_path.string();
    const Volume vol = name.size() >= 5 && name.ends_with(".json") ? read_volume(in_path) : decode_nifti(bytes, name);
    report.recognition = recognize(vol, model);
    const Recognition& r = *report.recognition;
    std::error_code ec;
    const bool same_file = std::filesystem::exists(out_path) && std::filesystem::equivalent(in_path, out_path, ec);
    if (r.consensus == OrientCode()) {
      report.action = Action::AlreadyStandard;
      if (!same_file) {
        if (name.ends_with(".json")) write_volume(vol, out_path);
        else write_file_atomic(out_path, bytes);
        report.output = out_path.string();
      }
    } else if (r.confidence < confidence_floor) {
      report.action = Action::SkippedLowConfidence;
    } else {
      write_volume(correct(vol, r.consensus), out_path);
      report.action = Action::Corrected;
      report.output = out_path.string();
    }
  } catch (const std::exception& e) {
    report.action = Action::Failed;
    report.error = e.what();
  }
  return report;
}

}  // namespace cmr
