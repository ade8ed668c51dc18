#include <cmath>
#include <fstream>

#include "cmr/train.hpp"
#include "doctest.h"
#include "support/tempdir.hpp"

using namespace cmr;

namespace {

PreprocConfig small_preproc() {
  PreprocConfig p;
  p.simple_size = 32;
  p.multitask_size = 32;
  return p;
}

SimpleCnnConfig small_simple() {
  SimpleCnnConfig c;
  c.input_size = 32;
  c.widths = {4, 8, 8};
  return c;
}

MultiTaskConfig small_multitask() {
  MultiTaskConfig c;
  c.input_size = 32;
  c.base_width = 4;
  c.depth = 3;
  c.convs_per_level = 1;
  c.head_widths = {4, 4, 8};
  return c;
}

const Split<Sample>& simple_data() {
  static const Split<Sample> d = split(make_simple_dataset(150, 3, bssfp_profile(), small_preproc(), 64), SplitSpec{});
  return d;
}

const Split<Sample>& multitask_data() {
  static const Split<Sample> d = split(make_multitask_dataset(30, 4, bssfp_profile(), small_preproc(), 64), SplitSpec{});
  return d;
}

bool same_values(const ParamList& a, const ParamList& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!(a[i].tensor.value() == b[i].tensor.value()).all()) return false;
  return a.size() == b.size();
}

}  // namespace

TEST_CASE("train config JSON and validation") {
  TrainConfig c;
  c.epochs = 3;
  c.stages = {5, 4, 2};
  c.batch_size = 4;
  c.optimizer.lr = 3e-3;
  c.class_weights = {0.5, 1, 2, 3};
  c.head = HeadType::Bits3;
  c.time_budget_s = 60;
  const nlohmann::json j = c;
  const TrainConfig back = j.get<TrainConfig>();
  CHECK(nlohmann::json(back) == j);
  CHECK(back.stages.orientation == 4);
  CHECK(back.optimizer.lr == 3e-3);
  CHECK(back.head == HeadType::Bits3);
  CHECK(TrainConfig{}.optimizer.lr == 1e-3);

  auto rejects = [](auto mutate) {
    TrainConfig bad;
    mutate(bad);
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  };
  rejects([](TrainConfig& b) { b.epochs = 0; });
  rejects([](TrainConfig& b) { b.batch_size = 0; });
  rejects([](TrainConfig& b) { b.optimizer.lr = 0; });
  rejects([](TrainConfig& b) { b.class_weights = {1, 1, 1}; });
  rejects([](TrainConfig& b) { b.class_weights = {1, -1, 1, 1}; });
  rejects([](TrainConfig& b) { b.class_weight_preset = "median"; });
  rejects([](TrainConfig& b) { b.patience = 0; });
  rejects([](TrainConfig& b) { b.time_budget_s = -1; });
  nlohmann::json sgd = j;
  sgd["optimizer"]["name"] = "sgd";
  CHECK_THROWS(sgd.get<TrainConfig>());
}

TEST_CASE("make_batch") {
  const auto& data = multitask_data().train;
  const Batch b = make_batch(data, {2, 0});
  CHECK(b.images.shape() == ad::Shape{2, 1, 32, 32});
  CHECK(b.onehot.value()[data[2].orientation.index()] == 1.0f);
  CHECK(b.onehot.value()[8 + data[0].orientation.index()] == 1.0f);
  CHECK(b.onehot.value().sum() == 2.0f);
  REQUIRE(b.seg.defined());
  CHECK(b.seg.shape() == ad::Shape{2, 4, 32, 32});
  // One class per pixel, matching the label map.
  const Eigen::Index plane = 32 * 32;
  for (Eigen::Index p = 0; p < plane; ++p) {
    float total = 0;
    for (int c = 0; c < 4; ++c) total += b.seg.value()[c * plane + p];
    CHECK(total == 1.0f);
    CHECK(b.seg.value()[Eigen::Index((*data[2].seg)[p]) * plane + p] == 1.0f);
  }
  CHECK_FALSE(make_batch(simple_data().train, {0}).seg.defined());
  CHECK_THROWS_AS(make_batch(data, {}), std::invalid_argument);
  std::vector<Sample> mixed{data[0], simple_data().train[0]};
  CHECK_THROWS_AS(make_batch(mixed, {0, 1}), std::invalid_argument);
}

TEST_CASE("inverse frequency weights") {
  const auto& data = multitask_data().train;
  std::array<double, 4> counts{};
  for (const auto& s : data)
    for (auto v : *s.seg) counts[v] += 1;
  const double total = counts[0] + counts[1] + counts[2] + counts[3];
  std::array<double, 4> expect{};
  double mean = 0;
  for (int c = 0; c < 4; ++c) mean += (expect[c] = total / counts[c]) / 4;
  const auto w = inverse_frequency_weights(data);
  for (int c = 0; c < 4; ++c) CHECK(w[c] == doctest::Approx(expect[c] / mean).epsilon(1e-12));
  CHECK(w[0] < w[1]);  // background is the most common class
  CHECK_THROWS_AS(inverse_frequency_weights(simple_data().train), std::invalid_argument);
}

TEST_CASE("class_dice") {
  Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> truth(6), pred(6);
  truth << 0, 1, 1, 2, 3, 3;
  pred << 0, 1, 2, 2, 3, 3;
  const auto d = class_dice(pred, truth);
  CHECK(d[0] == doctest::Approx(2.0 / 3));  // RV: 1 shared of 2 + 1
  CHECK(d[1] == doctest::Approx(2.0 / 3));  // LV: 1 shared of 1 + 2
  CHECK(d[2] == 1.0);
  CHECK(class_dice(truth, truth) == std::array<double, 3>{1, 1, 1});
}

TEST_CASE("untrained evaluation is near chance") {
  const SimpleCnn net(small_simple(), 0);
  const EvalResult r = evaluate(net, simple_data().val);
  CHECK(r.orientation_loss == doctest::Approx(std::log(8.0)).epsilon(0.2));
  CHECK(r.accuracy >= 0.0);
  CHECK(r.accuracy <= 1.0);
  CHECK(r.segmentation_loss == 0.0);
}

TEST_CASE("simple training improves on chance and records history") {
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.batch_size = 8;
  cfg.optimizer.lr = 3e-3;
  int calls = 0;
  const SimpleResult r = train_simple(cfg, simple_data(), small_simple(), [&](const EpochRecord& e) {
    ++calls;
    CHECK(e.stage == "orientation");
    CHECK(std::isfinite(e.train_loss));
  });
  CHECK(calls == int(r.metrics.history.size()));
  CHECK(calls >= 1);
  CHECK(r.metrics.final.orientation_loss < std::log(8.0));
  CHECK(r.metrics.final.accuracy > 0.25);
  // Seconds are cumulative.
  for (std::size_t i = 1; i < r.metrics.history.size(); ++i)
    CHECK(r.metrics.history[i].seconds >= r.metrics.history[i - 1].seconds);

  support::TempDir dir;
  r.metrics.write_csv(dir / "m.csv");
  r.metrics.write_jsonl(dir / "m.jsonl");
  std::ifstream csv(dir / "m.csv"), jl(dir / "m.jsonl");
  std::string line;
  std::getline(csv, line);
  CHECK(line == "stage,epoch,train_loss,val_loss,val_accuracy,val_dice,seconds");
  std::getline(jl, line);
  CHECK(nlohmann::json::parse(line).at("stage") == "orientation");
  CHECK(r.metrics.to_json().at("history").size() == r.metrics.history.size());
}

TEST_CASE("transfer leaves the source model untouched") {
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.transfer_fc_epochs = 2;
  cfg.transfer_finetune_epochs = 0;
  cfg.batch_size = 8;
  const SimpleCnn source(small_simple(), 5);
  const ad::Checkpoint before = source.save_state();
  const SimpleResult r = transfer(source, simple_data(), cfg);
  CHECK(same_values(source.params(), SimpleCnn::from_checkpoint(before).params()));
  // With no fine-tune phase only the fully connected layer may move.
  CHECK(same_values(r.model.conv_params(), source.conv_params()));
  CHECK_FALSE(same_values(r.model.fc_params(), source.fc_params()));
  for (const auto& e : r.metrics.history) CHECK(e.stage == "transfer-fc");

  cfg.transfer_finetune_epochs = 1;
  const SimpleResult r2 = transfer(source, simple_data(), cfg);
  CHECK_FALSE(same_values(r2.model.conv_params(), source.conv_params()));
  CHECK(r2.metrics.history.back().stage == "transfer-finetune");
}

TEST_CASE("three-stage training keeps the stage-2 freeze") {
  TrainConfig cfg;
  cfg.stages = {1, 1, 1};
  cfg.batch_size = 4;
  const MultiTaskResult r = train_multitask(cfg, multitask_data(), small_multitask());
  CHECK(r.audit.ok());
  CHECK(r.audit.encoder_unchanged);
  CHECK(r.audit.decoder_unchanged);
  CHECK(r.audit.frozen_grads_zero);
  CHECK(r.audit.head_reinitialized);
  CHECK(r.audit.backward_checks == (multitask_data().train.size() + 3) / 4);
  std::vector<std::string> stages;
  for (const auto& e : r.metrics.history) stages.push_back(e.stage);
  CHECK(stages == std::vector<std::string>{"segmentation", "orientation", "joint"});
  CHECK(r.metrics.final.dice.size() == 3);
  CHECK(std::isfinite(r.metrics.final.integral_loss()));
  for (const auto& p : r.model.params()) CHECK(p.tensor.requires_grad());

  TrainConfig inv = cfg;
  inv.class_weight_preset = "inverse_frequency";
  CHECK(train_multitask(inv, multitask_data(), small_multitask()).audit.ok());
}

TEST_CASE("training input errors") {
  TrainConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_simple(cfg, Split<Sample>{}, small_simple()), std::invalid_argument);
  Split<Sample> no_val = simple_data();
  no_val.val.clear();
  CHECK_THROWS_AS(train_simple(cfg, no_val, small_simple()), std::invalid_argument);
  CHECK_THROWS_AS(train_multitask(cfg, simple_data(), small_multitask()), std::invalid_argument);

  Split<Sample> poisoned = simple_data();
  poisoned.train[0].image[0] = std::nanf("");
  cfg.batch_size = 200;
  CHECK_THROWS_AS(train_simple(cfg, poisoned, small_simple()), TrainingError);
}

TEST_CASE("time budget stops training early") {
  TrainConfig cfg;
  cfg.epochs = 50;
  cfg.patience = 50;
  cfg.batch_size = 8;
  cfg.time_budget_s = 1e-9;
  const SimpleResult r = train_simple(cfg, simple_data(), small_simple());
  CHECK(r.metrics.history.size() == 1);
}
