#include "cmr/nets.hpp"

#include <algorithm>

namespace cmr {

using ad::Shape;

std::string to_string(HeadType head) { return head == HeadType::Softmax8 ? "softmax8" : "bits3"; }

HeadType head_type_from_string(const std::string& name) {
  if (name == "softmax8") return HeadType::Softmax8;
  if (name == "bits3") return HeadType::Bits3;
  throw std::invalid_argument("unknown head type '" + name + "' (expected softmax8 or bits3)");
}

int head_outputs(HeadType head) { return head == HeadType::Softmax8 ? int(kNumOrientations) : 3; }

namespace {

// log sigmoid(z), stable for large |z|.
inline float log_sigmoid(float z) { return z >= 0 ? -std::log1p(std::exp(-z)) : z - std::log1p(std::exp(z)); }
inline float sigmoidf(float z) { return 1.0f / (1.0f + std::exp(-z)); }

// log p(code) = sum over bits of log sigmoid(+-z_bit).
TensorF bits_log_probabilities(const TensorF& z) {
  if (z.rank() != 2 || z.dim(1) != 3) throw ad::ShapeError("bits3 head expects [N, 3], got " + ad::shape_str(z.shape()));
  const int n = z.dim(0);
  Eigen::ArrayXf out(Eigen::Index(n) * 8);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < 8; ++c) {
      float s = 0.0f;
      for (int k = 0; k < 3; ++k) {
        // Head output k holds bit (2 - k): outputs are ordered b2, b1, b0.
        const bool bit = (c >> (2 - k)) & 1;
        const float zk = z.value()[i * 3 + k];
        s += bit ? log_sigmoid(zk) : log_sigmoid(-zk);
      }
      out[i * 8 + c] = s;
    }
  return ad::make_op<float>({n, 8}, std::move(out), {z}, [n](ad::Node<float>& self) {
    auto& p = self.parents[0];
    if (!p->needs_grad) return;
    auto& g = p->grad_buffer();
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < 8; ++c) {
        const float gc = self.grad[i * 8 + c];
        for (int k = 0; k < 3; ++k) {
          const bool bit = (c >> (2 - k)) & 1;
          const float sk = sigmoidf(p->value[i * 3 + k]);
          g[i * 3 + k] += gc * (bit ? 1.0f - sk : -sk);
        }
      }
  });
}

float he_std(int fan_in) { return std::sqrt(2.0f / float(fan_in)); }

TensorF normal_param(Shape shape, float stddev, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, stddev);
  Eigen::ArrayXf v(ad::numel(shape));
  for (auto& x : v) x = dist(rng);
  return TensorF::parameter(std::move(shape), std::move(v));
}

TensorF zero_param(Shape shape) {
  const auto n = ad::numel(shape);
  return TensorF::parameter(std::move(shape), Eigen::ArrayXf::Zero(n));
}

Conv2dLayer make_conv(int in, int out, int kernel, std::mt19937_64& rng) {
  return {normal_param({out, in, kernel, kernel}, he_std(in * kernel * kernel), rng), zero_param({out}), kernel / 2};
}

BatchNormLayer make_norm(int channels) {
  BatchNormLayer bn;
  bn.gamma = TensorF::parameter({channels}, Eigen::ArrayXf::Ones(channels));
  bn.beta = zero_param({channels});
  bn.running_mean = TensorF::zeros({channels});
  bn.running_var = TensorF::full({channels}, 1.0f);
  return bn;
}

// Small weights keep a fresh classifier close to uniform over the classes.
LinearLayer make_linear(int in, int out, std::mt19937_64& rng) {
  return {normal_param({out, in}, 0.1f / std::sqrt(float(in)), rng), zero_param({out})};
}

void add(ParamList& list, const std::string& name, const TensorF& t) { list.push_back({name, t}); }

void add_conv(ParamList& list, const std::string& prefix, const Conv2dLayer& c) {
  add(list, prefix + ".weight", c.weight);
  add(list, prefix + ".bias", c.bias);
}

void add_linear(ParamList& list, const std::string& prefix, const LinearLayer& l) {
  add(list, prefix + ".weight", l.weight);
  add(list, prefix + ".bias", l.bias);
}

std::size_t count(const ParamList& list) {
  std::size_t n = 0;
  for (const auto& p : list) n += std::size_t(p.tensor.numel());
  return n;
}

int pooled(int size, int times) {
  for (int i = 0; i < times; ++i) size = size < 2 ? 0 : (size - 2) / 2 + 1;
  return size;
}

}  // namespace

TensorF class_log_probabilities(const TensorF& head_out, HeadType head) {
  if (head == HeadType::Bits3) return bits_log_probabilities(head_out);
  if (head_out.rank() != 2 || head_out.dim(1) != 8)
    throw ad::ShapeError("softmax8 head expects [N, 8], got " + ad::shape_str(head_out.shape()));
  return ad::log_softmax(head_out);
}

TensorF class_probabilities(const TensorF& head_out, HeadType head) {
  if (head == HeadType::Softmax8) {
    if (head_out.rank() != 2 || head_out.dim(1) != 8)
      throw ad::ShapeError("softmax8 head expects [N, 8], got " + ad::shape_str(head_out.shape()));
    return ad::softmax(head_out);
  }
  TensorF logp = bits_log_probabilities(head_out);
  return TensorF::from_data(logp.shape(), logp.value().exp());
}

nlohmann::json class_order_json() {
  nlohmann::json order = nlohmann::json::array();
  for (OrientCode c : all_codes()) order.push_back(c.str());
  return order;
}

TensorF Conv2dLayer::operator()(const TensorF& x) const { return ad::conv2d(x, weight, bias, {1, pad}); }

TensorF BatchNormLayer::operator()(const TensorF& x, bool training) const {
  if (!training) {
    const Eigen::ArrayXf scale = gamma.value() / (running_var.value() + eps).sqrt();
    const Eigen::ArrayXf shift = beta.value() - running_mean.value() * scale;
    return ad::channel_affine(x, TensorF::from_data(gamma.shape(), scale), TensorF::from_data(beta.shape(), shift));
  }
  Eigen::ArrayXf mean, var;
  TensorF y = ad::batch_norm(x, gamma, beta, eps, &mean, &var);
  const float n = float(x.numel() / x.dim(1));
  const Eigen::ArrayXf unbiased = n > 1 ? Eigen::ArrayXf(var * (n / (n - 1))) : var;
  running_mean.mutable_value() = (1 - momentum) * running_mean.value() + momentum * mean;
  running_var.mutable_value() = (1 - momentum) * running_var.value() + momentum * unbiased;
  return y;
}

TensorF LinearLayer::operator()(const TensorF& x) const { return ad::linear(x, weight, bias); }

// ------------------------------------------------------------------ SimpleCnn

void SimpleCnnConfig::validate() const {
  if (input_size < 8) throw std::invalid_argument("simple cnn: input_size too small");
  if (in_channels < 1) throw std::invalid_argument("simple cnn: in_channels must be positive");
  if (widths.size() != 3) throw std::invalid_argument("simple cnn: exactly three conv widths required");
  for (int w : widths)
    if (w < 1) throw std::invalid_argument("simple cnn: widths must be positive");
}

void to_json(nlohmann::json& j, const SimpleCnnConfig& c) {
  j = {{"input_size", c.input_size}, {"in_channels", c.in_channels}, {"widths", c.widths}, {"head", to_string(c.head)}};
}

void from_json(const nlohmann::json& j, SimpleCnnConfig& c) {
  SimpleCnnConfig d;
  c.input_size = j.value("input_size", d.input_size);
  c.in_channels = j.value("in_channels", d.in_channels);
  c.widths = j.value("widths", d.widths);
  c.head = head_type_from_string(j.value("head", to_string(d.head)));
  c.validate();
}

SimpleCnn::SimpleCnn(SimpleCnnConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  int in = cfg_.in_channels;
  for (int w : cfg_.widths) {
    convs_.push_back(make_conv(in, w, 3, rng));
    in = w;
  }
  const int side = pooled(cfg_.input_size, 3);
  fc_ = make_linear(in * side * side, head_outputs(cfg_.head), rng);
}

TensorF SimpleCnn::forward(const TensorF& x) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.input_size || x.dim(3) != cfg_.input_size)
    throw ad::ShapeError("simple cnn expects [N, " + std::to_string(cfg_.in_channels) + ", " +
                         std::to_string(cfg_.input_size) + ", " + std::to_string(cfg_.input_size) + "], got " +
                         ad::shape_str(x.shape()));
  TensorF h = x;
  for (const auto& conv : convs_) h = ad::max_pool2d(ad::relu(conv(h)), 2, 2);
  return fc_(ad::flatten(h));
}

ParamList SimpleCnn::conv_params() const {
  ParamList out;
  for (std::size_t i = 0; i < convs_.size(); ++i) add_conv(out, "conv" + std::to_string(i), convs_[i]);
  return out;
}

ParamList SimpleCnn::fc_params() const {
  ParamList out;
  add_linear(out, "fc", fc_);
  return out;
}

ParamList SimpleCnn::params() const {
  ParamList out = conv_params();
  for (auto& p : fc_params()) out.push_back(p);
  return out;
}

std::size_t SimpleCnn::parameter_count() const { return count(params()); }

void SimpleCnn::reset_fc(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  fc_ = make_linear(int(fc_.weight.dim(1)), head_outputs(cfg_.head), rng);
}

nlohmann::json SimpleCnn::card() const {
  return {{"model", "simple"},
          {"config", cfg_},
          {"input_size", {cfg_.in_channels, cfg_.input_size, cfg_.input_size}},
          {"head", to_string(cfg_.head)},
          {"class_order", class_order_json()},
          {"parameter_count", parameter_count()}};
}

ad::Checkpoint SimpleCnn::save_state(nlohmann::json extra) const {
  nlohmann::json c = card();
  c.update(extra);
  return ad::snapshot(params(), std::move(c));
}

void SimpleCnn::load_state(const ad::Checkpoint& ckpt) { ad::restore(params(), ckpt); }

SimpleCnn SimpleCnn::from_checkpoint(const ad::Checkpoint& ckpt) {
  if (ckpt.card.value("model", "") != "simple") throw ad::CheckpointError("checkpoint is not a simple cnn");
  SimpleCnn net(ckpt.card.at("config").get<SimpleCnnConfig>());
  net.load_state(ckpt);
  return net;
}

// --------------------------------------------------------------- MultiTaskNet

void MultiTaskConfig::validate() const {
  if (in_channels < 1 || seg_classes < 1) throw std::invalid_argument("multitask: channel counts must be positive");
  if (base_width < 1 || depth < 1 || convs_per_level < 1) throw std::invalid_argument("multitask: invalid backbone size");
  if (head_widths.size() != 3) throw std::invalid_argument("multitask: exactly three head widths required");
  if (pooled(input_size, std::max(depth - 1, 3)) < 1) throw std::invalid_argument("multitask: input_size too small");
}

void to_json(nlohmann::json& j, const MultiTaskConfig& c) {
  j = {{"input_size", c.input_size},   {"in_channels", c.in_channels},
       {"seg_classes", c.seg_classes}, {"base_width", c.base_width},
       {"depth", c.depth},             {"convs_per_level", c.convs_per_level},
       {"head_widths", c.head_widths}, {"head", to_string(c.head)}};
}

void from_json(const nlohmann::json& j, MultiTaskConfig& c) {
  MultiTaskConfig d;
  c.input_size = j.value("input_size", d.input_size);
  c.in_channels = j.value("in_channels", d.in_channels);
  c.seg_classes = j.value("seg_classes", d.seg_classes);
  c.base_width = j.value("base_width", d.base_width);
  c.depth = j.value("depth", d.depth);
  c.convs_per_level = j.value("convs_per_level", d.convs_per_level);
  c.head_widths = j.value("head_widths", d.head_widths);
  c.head = head_type_from_string(j.value("head", to_string(d.head)));
  c.validate();
}

MultiTaskNet::MultiTaskNet(MultiTaskConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  int in = cfg_.in_channels;
  for (int level = 0; level < cfg_.depth; ++level) {
    const int width = cfg_.base_width << level;
    for (int k = 0; k < cfg_.convs_per_level; ++k) {
      encoder_.push_back({make_conv(in, width, 3, rng), make_norm(width)});
      in = width;
    }
  }
  for (int level = cfg_.depth - 2; level >= 0; --level) {
    const int width = cfg_.base_width << level;
    in += width;  // skip connection
    for (int k = 0; k < cfg_.convs_per_level; ++k) {
      decoder_.push_back({make_conv(in, width, 3, rng), make_norm(width)});
      in = width;
    }
  }
  seg_out_ = make_conv(in, cfg_.seg_classes, 1, rng);
  build_head(rng);
}

void MultiTaskNet::build_head(std::mt19937_64& rng) {
  head_blocks_.clear();
  int in = cfg_.in_channels + cfg_.seg_classes;
  for (int w : cfg_.head_widths) {
    head_blocks_.push_back({make_conv(in, w, 3, rng), make_norm(w)});
    in = w;
  }
  const int side = pooled(cfg_.input_size, 3);
  head_fc_ = make_linear(in * side * side, head_outputs(cfg_.head), rng);
}

void MultiTaskNet::reinit_head(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  build_head(rng);
}

TensorF MultiTaskNet::run(const std::vector<Block>& blocks, std::size_t begin, std::size_t end, TensorF x,
                          bool training) const {
  for (std::size_t i = begin; i < end; ++i) x = ad::relu(blocks[i].norm(blocks[i].conv(x), training));
  return x;
}

TensorF MultiTaskNet::segment_logits(const TensorF& x, bool training) const {
  if (x.rank() != 4 || x.dim(1) != cfg_.in_channels || x.dim(2) != cfg_.input_size || x.dim(3) != cfg_.input_size)
    throw ad::ShapeError("multitask net expects [N, " + std::to_string(cfg_.in_channels) + ", " +
                         std::to_string(cfg_.input_size) + ", " + std::to_string(cfg_.input_size) + "], got " +
                         ad::shape_str(x.shape()));
  const auto per = std::size_t(cfg_.convs_per_level);
  std::vector<TensorF> skips;
  TensorF h = x;
  for (int level = 0; level < cfg_.depth; ++level) {
    if (level > 0) h = ad::max_pool2d(h, 2, 2);
    h = run(encoder_, level * per, (level + 1) * per, h, training);
    skips.push_back(h);
  }
  std::size_t block = 0;
  for (int level = cfg_.depth - 2; level >= 0; --level) {
    const TensorF& skip = skips[std::size_t(level)];
    h = ad::upsample_nearest(h, skip.dim(2), skip.dim(3));
    h = ad::concat<float>({h, skip}, 1);
    h = run(decoder_, block, block + per, h, training);
    block += per;
  }
  return seg_out_(h);
}

TensorF MultiTaskNet::head_forward(const TensorF& x, const TensorF& seg, bool training) const {
  TensorF h = ad::concat<float>({x, seg}, 1);
  for (const auto& b : head_blocks_) h = ad::max_pool2d(ad::relu(b.norm(b.conv(h), training)), 2, 2);
  return head_fc_(ad::flatten(h));
}

MultiTaskOutput MultiTaskNet::forward(const TensorF& x, ForwardMode mode) const {
  MultiTaskOutput out;
  out.seg_logits = segment_logits(x, mode.backbone);
  out.seg = ad::sigmoid(out.seg_logits);
  out.head = head_forward(x, out.seg, mode.head);
  return out;
}

ParamList MultiTaskNet::block_params(const std::vector<Block>& blocks, const std::string& prefix, bool with_stats) {
  ParamList out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = prefix + std::to_string(i);
    add_conv(out, p + ".conv", blocks[i].conv);
    add(out, p + ".norm.gamma", blocks[i].norm.gamma);
    add(out, p + ".norm.beta", blocks[i].norm.beta);
    if (with_stats) {
      add(out, p + ".norm.running_mean", blocks[i].norm.running_mean);
      add(out, p + ".norm.running_var", blocks[i].norm.running_var);
    }
  }
  return out;
}

ParamList MultiTaskNet::encoder_params() const { return block_params(encoder_, "encoder.", false); }

ParamList MultiTaskNet::decoder_params() const {
  ParamList out = block_params(decoder_, "decoder.", false);
  add_conv(out, "decoder.out", seg_out_);
  return out;
}

ParamList MultiTaskNet::head_params() const {
  ParamList out = block_params(head_blocks_, "head.", false);
  add_linear(out, "head.fc", head_fc_);
  return out;
}

ParamList MultiTaskNet::params() const {
  ParamList out = encoder_params();
  for (auto& p : decoder_params()) out.push_back(p);
  for (auto& p : head_params()) out.push_back(p);
  return out;
}

ParamList MultiTaskNet::state() const {
  ParamList out = block_params(encoder_, "encoder.", true);
  for (auto& p : block_params(decoder_, "decoder.", true)) out.push_back(p);
  add_conv(out, "decoder.out", seg_out_);
  for (auto& p : block_params(head_blocks_, "head.", true)) out.push_back(p);
  add_linear(out, "head.fc", head_fc_);
  return out;
}

std::size_t MultiTaskNet::parameter_count() const { return count(params()); }

nlohmann::json MultiTaskNet::card() const {
  return {{"model", "multitask"},
          {"config", cfg_},
          {"input_size", {cfg_.in_channels, cfg_.input_size, cfg_.input_size}},
          {"head", to_string(cfg_.head)},
          {"class_order", class_order_json()},
          {"seg_classes", {"background", "RV", "LV", "Myo"}},
          {"parameter_count", parameter_count()}};
}

ad::Checkpoint MultiTaskNet::save_state(nlohmann::json extra) const {
  nlohmann::json c = card();
  c.update(extra);
  return ad::snapshot(state(), std::move(c));
}

void MultiTaskNet::load_state(const ad::Checkpoint& ckpt) { ad::restore(state(), ckpt); }

MultiTaskNet MultiTaskNet::from_checkpoint(const ad::Checkpoint& ckpt) {
  if (ckpt.card.value("model", "") != "multitask") throw ad::CheckpointError("checkpoint is not a multitask net");
  MultiTaskNet net(ckpt.card.at("config").get<MultiTaskConfig>());
  net.load_state(ckpt);
  return net;
}

}  // namespace cmr
