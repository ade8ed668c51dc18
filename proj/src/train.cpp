#include "cmr/train.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "cmr/volume_io.hpp"

namespace cmr {

// ------------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (epochs <= 0 || stages.segmentation <= 0 || stages.orientation <= 0 || stages.joint <= 0)
    throw std::invalid_argument("train config: epochs must be positive");
  if (transfer_fc_epochs <= 0 || transfer_finetune_epochs < 0)
    throw std::invalid_argument("train config: transfer epochs must be positive (fine-tune may be 0)");
  if (batch_size <= 0) throw std::invalid_argument("train config: batch_size must be positive");
  if (!(optimizer.lr > 0)) throw std::invalid_argument("train config: learning rate must be positive");
  if (class_weights.size() != 4) throw std::invalid_argument("train config: expected 4 class weights");
  for (double w : class_weights)
    if (!(w > 0)) throw std::invalid_argument("train config: class weights must be positive");
  if (class_weight_preset != "uniform" && class_weight_preset != "inverse_frequency")
    throw std::invalid_argument("train config: class_weight_preset must be uniform or inverse_frequency");
  if (patience <= 0) throw std::invalid_argument("train config: patience must be positive");
  if (time_budget_s < 0) throw std::invalid_argument("train config: time_budget_s must be non-negative");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"stages", {{"segmentation", c.stages.segmentation}, {"orientation", c.stages.orientation}, {"joint", c.stages.joint}}},
       {"transfer_fc_epochs", c.transfer_fc_epochs},
       {"transfer_finetune_epochs", c.transfer_finetune_epochs},
       {"batch_size", c.batch_size},
       {"optimizer",
        {{"name", "adam"},
         {"lr", c.optimizer.lr},
         {"beta1", c.optimizer.beta1},
         {"beta2", c.optimizer.beta2},
         {"eps", c.optimizer.eps}}},
       {"seed", c.seed},
       {"class_weights", c.class_weights},
       {"class_weight_preset", c.class_weight_preset},
       {"head", to_string(c.head)},
       {"patience", c.patience},
       {"time_budget_s", c.time_budget_s}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d;
  c.epochs = j.value("epochs", d.epochs);
  if (j.contains("stages")) {
    const auto& s = j.at("stages");
    c.stages.segmentation = s.value("segmentation", d.stages.segmentation);
    c.stages.orientation = s.value("orientation", d.stages.orientation);
    c.stages.joint = s.value("joint", d.stages.joint);
  }
  c.transfer_fc_epochs = j.value("transfer_fc_epochs", d.transfer_fc_epochs);
  c.transfer_finetune_epochs = j.value("transfer_finetune_epochs", d.transfer_finetune_epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    if (o.value("name", "adam") != "adam") throw std::invalid_argument("train config: only the adam optimizer is supported");
    c.optimizer.lr = o.value("lr", d.optimizer.lr);
    c.optimizer.beta1 = o.value("beta1", d.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", d.optimizer.beta2);
    c.optimizer.eps = o.value("eps", d.optimizer.eps);
  }
  c.seed = j.value("seed", d.seed);
  c.class_weights = j.value("class_weights", d.class_weights);
  c.class_weight_preset = j.value("class_weight_preset", d.class_weight_preset);
  c.head = head_type_from_string(j.value("head", to_string(d.head)));
  c.patience = j.value("patience", d.patience);
  c.time_budget_s = j.value("time_budget_s", d.time_budget_s);
  c.validate();
}

void to_json(nlohmann::json& j, const EpochRecord& r) {
  j = {{"stage", r.stage},         {"epoch", r.epoch},
       {"train_loss", r.train_loss}, {"val_loss", r.val_loss},
       {"val_accuracy", r.val_accuracy}, {"val_dice", r.val_dice},
       {"seconds", r.seconds}};
}

// ------------------------------------------------------------------ metrics

nlohmann::json Metrics::to_json() const {
  return {{"accuracy", final.accuracy},
          {"orientation_loss", final.orientation_loss},
          {"segmentation_loss", final.segmentation_loss},
          {"dice", final.dice},
          {"mean_dice", final.mean_dice},
          {"history", history}};
}

void Metrics::write_csv(const std::filesystem::path& path) const {
  std::ostringstream out;
  out << "stage,epoch,train_loss,val_loss,val_accuracy,val_dice,seconds\n" << std::setprecision(9);
  for (const auto& r : history)
    out << r.stage << ',' << r.epoch << ',' << r.train_loss << ',' << r.val_loss << ',' << r.val_accuracy << ','
        << r.val_dice << ',' << r.seconds << '\n';
  write_file_atomic(path, out.str());
}

void Metrics::write_jsonl(const std::filesystem::path& path) const {
  std::string out;
  for (const auto& r : history) out += nlohmann::json(r).dump() + "\n";
  write_file_atomic(path, out);
}

// -------------------------------------------------------------------- data

Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: empty batch");
  const Sample& first = samples.at(indices[0]);
  const int n = int(indices.size());
  const Eigen::Index per = first.image.size();
  const Eigen::Index plane = Eigen::Index(first.height) * first.width;
  const bool labelled = std::all_of(indices.begin(), indices.end(), [&](std::size_t i) { return samples.at(i).seg.has_value(); });

  Eigen::ArrayXf images(per * n);
  Eigen::ArrayXf onehot = Eigen::ArrayXf::Zero(Eigen::Index(n) * 8);
  Eigen::ArrayXf seg;
  if (labelled) seg = Eigen::ArrayXf::Zero(plane * kNumSegClasses * n);
  for (int k = 0; k < n; ++k) {
    const Sample& s = samples.at(indices[std::size_t(k)]);
    if (s.image.size() != per || s.channels != first.channels || s.height != first.height)
      throw std::invalid_argument("make_batch: samples differ in shape");
    images.segment(k * per, per) = s.image;
    onehot[k * 8 + s.orientation.index()] = 1.0f;
    if (labelled) {
      const auto& labels = *s.seg;
      for (Eigen::Index p = 0; p < plane; ++p) seg[(Eigen::Index(k) * kNumSegClasses + labels[p]) * plane + p] = 1.0f;
    }
  }
  Batch b;
  b.images = TensorF::from_data({n, first.channels, first.height, first.width}, std::move(images));
  b.onehot = TensorF::from_data({n, 8}, std::move(onehot));
  if (labelled) b.seg = TensorF::from_data({n, kNumSegClasses, first.height, first.width}, std::move(seg));
  return b;
}

std::vector<double> inverse_frequency_weights(const std::vector<Sample>& samples) {
  std::array<double, kNumSegClasses> counts{};
  double total = 0;
  for (const auto& s : samples) {
    if (!s.seg) continue;
    for (auto v : *s.seg) counts[std::min<std::size_t>(v, kNumSegClasses - 1)] += 1;
    total += double(s.seg->size());
  }
  if (total == 0) throw std::invalid_argument("inverse_frequency_weights: no labelled samples");
  std::vector<double> w(kNumSegClasses);
  for (int c = 0; c < kNumSegClasses; ++c) w[std::size_t(c)] = total / std::max(counts[std::size_t(c)], 1.0);
  const double mean = std::accumulate(w.begin(), w.end(), 0.0) / double(w.size());
  for (auto& x : w) x /= mean;
  return w;
}

std::array<double, 3> class_dice(const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>& predicted,
                                 const Eigen::Array<std::uint8_t, Eigen::Dynamic, 1>& truth) {
  return {dice(predicted == kRightVentricle, truth == kRightVentricle), dice(predicted == kLeftVentricle, truth == kLeftVentricle),
          dice(predicted == kMyocardium, truth == kMyocardium)};
}

// --------------------------------------------------------------- evaluation

namespace {

std::vector<std::vector<std::size_t>> batches_in_order(std::size_t n, int batch_size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += std::size_t(batch_size)) {
    std::vector<std::size_t> b;
    for (std::size_t k = i; k < std::min(n, i + std::size_t(batch_size)); ++k) b.push_back(k);
    out.push_back(std::move(b));
  }
  return out;
}

void tally_orientation(const TensorF& head_out, HeadType head, const Batch& batch, double& loss, std::size_t& correct) {
  const TensorF probs = class_probabilities(head_out, head);
  loss += orientation_loss(probs, batch.onehot).item() * probs.dim(0);
  for (int i = 0; i < probs.dim(0); ++i) {
    const auto row = probs.value().segment(Eigen::Index(i) * 8, 8);
    const auto truth = batch.onehot.value().segment(Eigen::Index(i) * 8, 8);
    correct += predict_code(row) == predict_code(truth);
  }
}

}  // namespace

EvalResult evaluate(const SimpleCnn& net, const std::vector<Sample>& samples, int batch_size) {
  EvalResult r;
  if (samples.empty()) return r;
  ad::NoGradGuard no_grad;
  double loss = 0;
  std::size_t correct = 0;
  for (const auto& idx : batches_in_order(samples.size(), batch_size)) {
    const Batch b = make_batch(samples, idx);
    tally_orientation(net.forward(b.images), net.config().head, b, loss, correct);
  }
  r.orientation_loss = loss / double(samples.size());
  r.accuracy = double(correct) / double(samples.size());
  return r;
}

EvalResult evaluate(const MultiTaskNet& net, const std::vector<Sample>& samples, const std::vector<double>& weights,
                    int batch_size) {
  EvalResult r;
  if (samples.empty()) return r;
  ad::NoGradGuard no_grad;
  double loss = 0, seg_loss = 0;
  std::size_t correct = 0;
  std::array<double, 3> dice_sum{};
  const int classes = net.config().seg_classes;
  for (const auto& idx : batches_in_order(samples.size(), batch_size)) {
    const Batch b = make_batch(samples, idx);
    const MultiTaskOutput out = net.forward(b.images);
    tally_orientation(out.head, net.config().head, b, loss, correct);
    if (!b.seg.defined()) continue;
    seg_loss += segmentation_loss(out.seg, b.seg, weights).item() * double(idx.size());
    const Eigen::Index plane = Eigen::Index(b.images.dim(2)) * b.images.dim(3);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      Eigen::Array<std::uint8_t, Eigen::Dynamic, 1> pred(plane);
      const float* z = out.seg_logits.value().data() + Eigen::Index(k) * classes * plane;
      for (Eigen::Index p = 0; p < plane; ++p) {
        int best = 0;
        for (int c = 1; c < classes; ++c)
          if (z[c * plane + p] > z[best * plane + p]) best = c;
        pred[p] = std::uint8_t(best);
      }
      const auto d = class_dice(pred, *samples[idx[k]].seg);
      for (int c = 0; c < 3; ++c) dice_sum[std::size_t(c)] += d[std::size_t(c)];
    }
  }
  const double n = double(samples.size());
  r.orientation_loss = loss / n;
  r.segmentation_loss = seg_loss / n;
  r.accuracy = double(correct) / n;
  r.dice = {{"RV", dice_sum[0] / n}, {"LV", dice_sum[1] / n}, {"Myo", dice_sum[2] / n}};
  r.mean_dice = (dice_sum[0] + dice_sum[1] + dice_sum[2]) / (3.0 * n);
  return r;
}

// ----------------------------------------------------------------- training

namespace {

using Clock = std::chrono::steady_clock;

class Trainer {
 public:
  Trainer(const TrainConfig& cfg, const EpochCallback& cb) : cfg_(cfg), cb_(cb), start_(Clock::now()) {}

  double elapsed() const { return std::chrono::duration<double>(Clock::now() - start_).count(); }
  bool out_of_time() const { return cfg_.time_budget_s > 0 && elapsed() >= cfg_.time_budget_s; }

  // One pass over `n` shuffled items; `step` returns the batch loss after
  // running backward. Returns the mean batch loss.
  template <typename Step>
  double epoch(const std::string& stage, int epoch_no, std::size_t n, ad::Adam<float>& opt, Step&& step) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(cfg_.seed * 1000003ULL + std::hash<std::string>{}(stage) + std::uint64_t(epoch_no));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    int steps = 0;
    for (std::size_t i = 0; i < n; i += std::size_t(cfg_.batch_size)) {
      std::vector<std::size_t> idx(order.begin() + std::ptrdiff_t(i), order.begin() + std::ptrdiff_t(std::min(n, i + std::size_t(cfg_.batch_size))));
      opt.zero_grad();
      const double loss = step(idx);
      if (!std::isfinite(loss))
        throw TrainingError("non-finite loss in stage '" + stage + "', epoch " + std::to_string(epoch_no) + ", step " +
                            std::to_string(steps));
      try {
        opt.step();
      } catch (const ad::NonFiniteError& e) {
        throw TrainingError(std::string(e.what()) + " (stage '" + stage + "', epoch " + std::to_string(epoch_no) +
                            ", step " + std::to_string(steps) + ")");
      }
      total += loss;
      ++steps;
      if (out_of_time()) break;
    }
    return steps ? total / steps : 0.0;
  }

  void record(Metrics& m, EpochRecord r) {
    r.seconds = elapsed();
    m.history.push_back(r);
    if (cb_) cb_(r);
  }

  const TrainConfig& cfg() const { return cfg_; }

 private:
  const TrainConfig& cfg_;
  const EpochCallback& cb_;
  Clock::time_point start_;
};

void set_trainable(const ParamList& params, bool on) {
  for (const auto& p : params) {
    p.tensor.set_requires_grad(on);
    p.tensor.zero_grad();
  }
}

ParamList join(ParamList a, const ParamList& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::vector<Eigen::ArrayXf> values_of(const ParamList& params) {
  std::vector<Eigen::ArrayXf> out;
  for (const auto& p : params) out.push_back(p.tensor.value());
  return out;
}

bool bit_identical(const ParamList& params, const std::vector<Eigen::ArrayXf>& before) {
  if (params.size() != before.size()) return false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& v = params[i].tensor.value();
    if (v.size() != before[i].size() || std::memcmp(v.data(), before[i].data(), sizeof(float) * std::size_t(v.size())) != 0)
      return false;
  }
  return true;
}

bool grads_zero(const ParamList& params) {
  for (const auto& p : params)
    if (p.tensor.has_grad() && !(p.tensor.grad_buffer() == 0.0f).all()) return false;
  return true;
}

const std::vector<Sample>& held_out(const Split<Sample>& data) { return data.test.empty() ? data.val : data.test; }

void require_data(const Split<Sample>& data) {
  if (data.train.empty()) throw std::invalid_argument("training data is empty");
  if (data.val.empty()) throw std::invalid_argument("validation data is empty");
}

// Orientation-only epochs with early stopping on validation loss. Trains
// `trainable`; restores the best snapshot of `state` at the end.
void fit_orientation(Trainer& t, Metrics& m, const std::string& stage, int epochs, SimpleCnn& net,
                     const ParamList& trainable, const Split<Sample>& data) {
  ad::Adam<float> opt(trainable, t.cfg().optimizer);
  const HeadType head = net.config().head;
  double best = evaluate(net, data.val).orientation_loss;
  ad::Checkpoint best_state = net.save_state();
  int stale = 0;
  for (int e = 1; e <= epochs; ++e) {
    const double train_loss = t.epoch(stage, e, data.train.size(), opt, [&](const std::vector<std::size_t>& idx) {
      const Batch b = make_batch(data.train, idx);
      TensorF loss = orientation_nll(class_log_probabilities(net.forward(b.images), head), b.onehot);
      loss.backward();
      return double(loss.item());
    });
    const EvalResult ev = evaluate(net, data.val);
    t.record(m, {stage, e, train_loss, ev.orientation_loss, ev.accuracy, 0.0, 0.0});
    if (ev.orientation_loss < best) {
      best = ev.orientation_loss;
      best_state = net.save_state();
      stale = 0;
    } else if (++stale >= t.cfg().patience) {
      break;
    }
    if (t.out_of_time()) break;
  }
  net.load_state(best_state);
}

}  // namespace

SimpleResult train_simple(const TrainConfig& cfg, const Split<Sample>& data, const SimpleCnnConfig& net_cfg,
                          const EpochCallback& on_epoch) {
  cfg.validate();
  require_data(data);
  SimpleCnnConfig nc = net_cfg;
  nc.head = cfg.head;
  SimpleResult result{SimpleCnn(nc, cfg.seed), {}};
  Trainer t(cfg, on_epoch);
  fit_orientation(t, result.metrics, "orientation", cfg.epochs, result.model, result.model.params(), data);
  result.metrics.final = evaluate(result.model, held_out(data));
  return result;
}

SimpleResult transfer(const SimpleCnn& pretrained, const Split<Sample>& data, const TrainConfig& cfg,
                      const EpochCallback& on_epoch) {
  cfg.validate();
  require_data(data);
  // Deep copy: the source model's tensors must not be touched.
  SimpleResult result{SimpleCnn::from_checkpoint(pretrained.save_state()), {}};
  SimpleCnn& net = result.model;
  Trainer t(cfg, on_epoch);

  set_trainable(net.conv_params(), false);
  fit_orientation(t, result.metrics, "transfer-fc", cfg.transfer_fc_epochs, net, net.fc_params(), data);
  set_trainable(net.conv_params(), true);
  if (cfg.transfer_finetune_epochs > 0)
    fit_orientation(t, result.metrics, "transfer-finetune", cfg.transfer_finetune_epochs, net, net.params(), data);
  result.metrics.final = evaluate(net, held_out(data));
  return result;
}

MultiTaskResult train_multitask(const TrainConfig& cfg, const Split<Sample>& data, const MultiTaskConfig& net_cfg,
                                const EpochCallback& on_epoch) {
  cfg.validate();
  require_data(data);
  for (const auto* part : {&data.train, &data.val})
    for (const auto& s : *part)
      if (!s.seg) throw std::invalid_argument("train_multitask: every sample needs a segmentation label");

  MultiTaskConfig nc = net_cfg;
  nc.head = cfg.head;
  MultiTaskResult result{MultiTaskNet(nc, cfg.seed), {}, {}};
  MultiTaskNet& net = result.model;
  Metrics& m = result.metrics;
  const std::vector<double> weights =
      cfg.class_weight_preset == "inverse_frequency" ? inverse_frequency_weights(data.train) : cfg.class_weights;
  const HeadType head = nc.head;
  Trainer t(cfg, on_epoch);
  auto batch_of = [&](const std::vector<std::size_t>& idx) { return make_batch(data.train, idx); };

  // Stage 1: segmentation.
  {
    set_trainable(net.head_params(), false);
    const ParamList trainable = join(net.encoder_params(), net.decoder_params());
    ad::Adam<float> opt(trainable, cfg.optimizer);
    double best = -1;
    ad::Checkpoint best_state = net.save_state();
    int stale = 0;
    for (int e = 1; e <= cfg.stages.segmentation; ++e) {
      const double train_loss = t.epoch("segmentation", e, data.train.size(), opt, [&](const std::vector<std::size_t>& idx) {
        const Batch b = batch_of(idx);
        TensorF loss = segmentation_loss_logits(net.segment_logits(b.images, true), b.seg, weights);
        loss.backward();
        return double(loss.item());
      });
      const EvalResult ev = evaluate(net, data.val, weights);
      t.record(m, {"segmentation", e, train_loss, ev.segmentation_loss, ev.accuracy, ev.mean_dice, 0.0});
      if (ev.mean_dice > best) {
        best = ev.mean_dice;
        best_state = net.save_state();
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
      if (t.out_of_time()) break;
    }
    net.load_state(best_state);
  }

  // Stage 2: frozen backbone, fresh head, orientation loss.
  {
    const ParamList backbone_state = [&] {
      ParamList all = net.state(), out;
      for (auto& p : all)
        if (p.name.rfind("head.", 0) != 0) out.push_back(p);
      return out;
    }();
    const ParamList encoder = net.encoder_params();
    const ParamList decoder = net.decoder_params();
    const auto enc_before = values_of(encoder);
    const auto dec_before = values_of(decoder);
    const auto backbone_before = values_of(backbone_state);
    const auto head_before = values_of(net.head_params());

    net.reinit_head(cfg.seed + 0x5eedULL);
    result.audit.head_reinitialized = !bit_identical(net.head_params(), head_before);
    set_trainable(join(encoder, decoder), false);
    const ParamList head_params = net.head_params();
    ad::Adam<float> opt(head_params, cfg.optimizer);

    bool grads_ok = true;
    double best = std::numeric_limits<double>::infinity();
    ad::Checkpoint best_state = net.save_state();
    int stale = 0;
    for (int e = 1; e <= cfg.stages.orientation; ++e) {
      const double train_loss = t.epoch("orientation", e, data.train.size(), opt, [&](const std::vector<std::size_t>& idx) {
        const Batch b = batch_of(idx);
        const TensorF seg = ad::sigmoid(net.segment_logits(b.images, false));
        TensorF loss = orientation_nll(class_log_probabilities(net.head_forward(b.images, seg, true), head), b.onehot);
        loss.backward();
        grads_ok = grads_ok && grads_zero(encoder) && grads_zero(decoder);
        ++result.audit.backward_checks;
        return double(loss.item());
      });
      const EvalResult ev = evaluate(net, data.val, weights);
      t.record(m, {"orientation", e, train_loss, ev.orientation_loss, ev.accuracy, ev.mean_dice, 0.0});
      if (ev.orientation_loss < best) {
        best = ev.orientation_loss;
        best_state = net.save_state();
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
      if (t.out_of_time()) break;
    }
    net.load_state(best_state);
    result.audit.frozen_grads_zero = grads_ok && result.audit.backward_checks > 0;
    result.audit.encoder_unchanged = bit_identical(encoder, enc_before);
    result.audit.decoder_unchanged = bit_identical(decoder, dec_before) && bit_identical(backbone_state, backbone_before);
    set_trainable(join(encoder, decoder), true);
  }

  // Stage 3: joint fine-tuning on the integral loss.
  {
    set_trainable(net.head_params(), true);
    ad::Adam<float> opt(net.params(), cfg.optimizer);
    double best = evaluate(net, data.val, weights).integral_loss();
    ad::Checkpoint best_state = net.save_state();
    int stale = 0;
    for (int e = 1; e <= cfg.stages.joint; ++e) {
      const double train_loss = t.epoch("joint", e, data.train.size(), opt, [&](const std::vector<std::size_t>& idx) {
        const Batch b = batch_of(idx);
        const MultiTaskOutput out = net.forward(b.images, {true, true});
        TensorF loss = integral_loss(segmentation_loss_logits(out.seg_logits, b.seg, weights),
                                     orientation_nll(class_log_probabilities(out.head, head), b.onehot));
        loss.backward();
        return double(loss.item());
      });
      const EvalResult ev = evaluate(net, data.val, weights);
      t.record(m, {"joint", e, train_loss, ev.integral_loss(), ev.accuracy, ev.mean_dice, 0.0});
      if (ev.integral_loss() < best) {
        best = ev.integral_loss();
        best_state = net.save_state();
        stale = 0;
      } else if (++stale >= cfg.patience) {
        break;
      }
      if (t.out_of_time()) break;
    }
    net.load_state(best_state);
  }

  m.final = evaluate(net, held_out(data), weights);
  return result;
}

}  // namespace cmr
