#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "cmr/datagen.hpp"
#include "cmr/losses.hpp"
#include "cmr/nets.hpp"
#include "json.hpp"

namespace cmr {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct StageEpochs {
  int segmentation = 12;
  int orientation = 6;
  int joint = 4;
};

struct TrainConfig {
  int epochs = 15;  // simple network
  StageEpochs stages;
  int transfer_fc_epochs = 4;
  int transfer_finetune_epochs = 10;
  int batch_size = 16;
  ad::AdamConfig optimizer;
  std::uint64_t seed = 0;
  std::vector<double> class_weights{1.0, 1.0, 1.0, 1.0};
  std::string class_weight_preset = "uniform";  // or "inverse_frequency"
  HeadType head = HeadType::Softmax8;
  int patience = 3;
  double time_budget_s = 0.0;  // per training call; 0 disables

  void validate() const;
};
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochRecord {
  std::string stage;
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double val_dice = 0.0;  // mean over foreground classes; 0 when not segmenting
  double seconds = 0.0;
};
void to_json(nlohmann::json& j, const EpochRecord& r);

struct EvalResult {
  double orientation_loss = 0.0;
  double segmentation_loss = 0.0;
  double accuracy = 0.0;
  std::map<std::string, double> dice;  // RV, LV, Myo
  double mean_dice = 0.0;

  double integral_loss() const { return orientation_loss + segmentation_loss; }
};

struct Metrics {
  EvalResult final;
  std::vector<EpochRecord> history;

  void write_csv(const std::filesystem::path& path) const;
  void write_jsonl(const std::filesystem::path& path) const;
  nlohmann::json to_json() const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Network-ready batch tensors for a subset of samples.
struct Batch {
  TensorF images;  // [N, C, H, W]
  TensorF onehot;  // [N, 8]
  TensorF seg;     // [N, 4, H, W] binary maps; undefined when samples lack labels
};
Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices);

/// Inverse-frequency class weights from training label maps, scaled to mean 1.
std::vector<double> inverse_frequency_weights(const std::vector<Sample>& samples);

EvalResult evaluate(const SimpleCnn& net, const std::vector<Sample>& samples, int batch_size = 32);
EvalResult evaluate(const MultiTaskNet& net, const std::vector<Sample>& samples, const std::vector<double>& weights,
                    int batch_size = 8);

struct SimpleResult {
  SimpleCnn model;
  Metrics metrics;
};

/// Single-stage orientation training with early stopping on validation loss.
/// The returned model holds the best validation snapshot; metrics.final is
/// its score on data.test (or data.val when test is empty).
SimpleResult train_simple(const TrainConfig& cfg, const Split<Sample>& data, const SimpleCnnConfig& net_cfg = {},
                          const EpochCallback& on_epoch = {});

/// Two phases on a new modality: phase A trains only the fully connected
/// layer, phase B trains convolutions and the fully connected layer together.
/// Each phase stops after `patience` epochs without validation improvement.
SimpleResult transfer(const SimpleCnn& pretrained, const Split<Sample>& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});

/// Evidence that the stage-2 freeze held.
struct FreezeAudit {
  bool encoder_unchanged = false;   // bit-identical to the end of stage 1
  bool decoder_unchanged = false;
  bool frozen_grads_zero = false;   // every backward left frozen gradients exactly 0
  bool head_reinitialized = false;  // head differed from its stage-1 values at stage-2 start
  std::size_t backward_checks = 0;

  bool ok() const { return encoder_unchanged && decoder_unchanged && frozen_grads_zero && head_reinitialized; }
};

struct MultiTaskResult {
  MultiTaskNet model;
  Metrics metrics;
  FreezeAudit audit;
};

/// Stage 1: encoder + decoder on L_segmentation, best validation mean Dice.
/// Stage 2: encoder + decoder frozen, head re-initialized, L_orientation.
/// Stage 3: everything on L_integral; best validation L_integral retained.
MultiTaskResult train_multitask(const TrainConfig& cfg, const Split<Sample>& data, const MultiTaskConfig& net_cfg = {},
                                const EpochCallback& on_epoch = {});

/// Per-class Dice of argmax(seg maps) against labels for one sample.
std::array<double, 3> class_dice(const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>& predicted,
                                 const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>& truth);

}  // namespace cmr
