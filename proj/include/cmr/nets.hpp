#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cmr/checkpoint.hpp"
#include "cmr/optim.hpp"
#include "cmr/orient.hpp"
#include "cmr/tensor.hpp"
#include "json.hpp"

namespace cmr {

using TensorF = ad::Tensor<float>;
using ParamList = ad::ParamList<float>;

/// Softmax8: eight logits, one per code. Bits3: three logits, one per bit
/// b2 b1 b0 read through independent sigmoids; the code probability is the
/// product of the three bit probabilities.
enum class HeadType { Softmax8, Bits3 };

std::string to_string(HeadType head);
HeadType head_type_from_string(const std::string& name);
int head_outputs(HeadType head);

/// [N, 8] log-probabilities over codes in table order from raw head outputs.
TensorF class_log_probabilities(const TensorF& head_out, HeadType head);
/// [N, 8] probabilities over codes.
TensorF class_probabilities(const TensorF& head_out, HeadType head);

/// Argmax over eight scores, ties to the lowest code. Throws on NaN.
template <typename Derived>
OrientCode predict_code(const Eigen::DenseBase<Derived>& scores) {
  if (scores.size() != Eigen::Index(kNumOrientations))
    throw std::invalid_argument("predict_code: expected 8 scores, got " + std::to_string(scores.size()));
  int best = 0;
  for (int i = 0; i < int(kNumOrientations); ++i) {
    if (std::isnan(double(scores.derived().coeff(i)))) throw std::invalid_argument("predict_code: NaN score");
    if (scores.derived().coeff(i) > scores.derived().coeff(best)) best = i;
  }
  return OrientCode::from_index(best);
}

struct Conv2dLayer {
  TensorF weight;  // [O, C, K, K]
  TensorF bias;    // [O]
  int pad = 1;

  TensorF operator()(const TensorF& x) const;
};

/// Batch-statistic normalization in training mode; running statistics at
/// inference.
struct BatchNormLayer {
  TensorF gamma;
  TensorF beta;
  TensorF running_mean;  // not trained; updated in training mode
  TensorF running_var;
  float momentum = 0.1f;
  float eps = 1e-5f;

  TensorF operator()(const TensorF& x, bool training) const;
};

struct LinearLayer {
  TensorF weight;  // [O, F]
  TensorF bias;    // [O]

  TensorF operator()(const TensorF& x) const;
};

struct SimpleCnnConfig {
  int input_size = 100;
  int in_channels = 3;
  std::vector<int> widths{16, 32, 64};
  HeadType head = HeadType::Softmax8;

  void validate() const;
};
void to_json(nlohmann::json& j, const SimpleCnnConfig& c);
void from_json(const nlohmann::json& j, SimpleCnnConfig& c);

/// Three conv(3x3) -> relu -> max_pool(2) blocks and one fully connected
/// layer. Input [N, in_channels, input_size, input_size].
class SimpleCnn {
 public:
  explicit SimpleCnn(SimpleCnnConfig cfg = {}, std::uint64_t seed = 0);

  const SimpleCnnConfig& config() const { return cfg_; }
  /// Raw head outputs, [N, 8] or [N, 3].
  TensorF forward(const TensorF& x) const;

  ParamList conv_params() const;
  ParamList fc_params() const;
  ParamList params() const;
  std::size_t parameter_count() const;

  void reset_fc(std::uint64_t seed);
  nlohmann::json card() const;
  ad::Checkpoint save_state(nlohmann::json extra = nlohmann::json::object()) const;
  void load_state(const ad::Checkpoint& ckpt);
  static SimpleCnn from_checkpoint(const ad::Checkpoint& ckpt);

 private:
  SimpleCnnConfig cfg_;
  std::vector<Conv2dLayer> convs_;
  LinearLayer fc_;
};

struct MultiTaskConfig {
  int input_size = 212;
  int in_channels = 1;
  int seg_classes = 4;
  int base_width = 16;
  int depth = 4;            // resolution levels; depth - 1 poolings
  int convs_per_level = 2;
  std::vector<int> head_widths{16, 32, 64};
  HeadType head = HeadType::Softmax8;

  void validate() const;
};
void to_json(nlohmann::json& j, const MultiTaskConfig& c);
void from_json(const nlohmann::json& j, MultiTaskConfig& c);

struct MultiTaskOutput {
  TensorF seg_logits;  // [N, s, H, W]
  TensorF seg;         // sigmoid(seg_logits)
  TensorF head;        // raw head outputs
};

/// Which parts run in training mode (batch statistics, running-stat updates).
struct ForwardMode {
  bool backbone = false;
  bool head = false;
};

/// U-Net encoder/decoder with per-class sigmoid maps, plus an orientation
/// head that sees the input image concatenated with the predicted maps.
class MultiTaskNet {
 public:
  explicit MultiTaskNet(MultiTaskConfig cfg = {}, std::uint64_t seed = 0);

  const MultiTaskConfig& config() const { return cfg_; }
  MultiTaskOutput forward(const TensorF& x, ForwardMode mode = {}) const;
  /// Segmentation only; the head is not evaluated.
  TensorF segment_logits(const TensorF& x, bool training = false) const;
  TensorF head_forward(const TensorF& x, const TensorF& seg, bool training = false) const;

  // Trainable parameters by group.
  ParamList encoder_params() const;
  ParamList decoder_params() const;
  ParamList head_params() const;
  ParamList params() const;
  /// Trainable parameters plus normalization running statistics.
  ParamList state() const;
  std::size_t parameter_count() const;

  void reinit_head(std::uint64_t seed);
  nlohmann::json card() const;
  ad::Checkpoint save_state(nlohmann::json extra = nlohmann::json::object()) const;
  void load_state(const ad::Checkpoint& ckpt);
  static MultiTaskNet from_checkpoint(const ad::Checkpoint& ckpt);

 private:
  struct Block {
    Conv2dLayer conv;
    BatchNormLayer norm;
  };
  void build_head(std::mt19937_64& rng);
  static ParamList block_params(const std::vector<Block>& blocks, const std::string& prefix, bool with_stats);
  TensorF run(const std::vector<Block>& blocks, std::size_t begin, std::size_t end, TensorF x, bool training) const;

  MultiTaskConfig cfg_;
  std::vector<Block> encoder_;  // depth * convs_per_level blocks
  std::vector<Block> decoder_;  // (depth - 1) * convs_per_level blocks
  Conv2dLayer seg_out_;         // 1x1 to seg_classes
  std::vector<Block> head_blocks_;
  LinearLayer head_fc_;
};

/// Class order written into model cards.
nlohmann::json class_order_json();

}  // namespace cmr
