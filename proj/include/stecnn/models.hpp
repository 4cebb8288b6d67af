#pragma once

#include "stecnn/data.hpp"
#include "stecnn/layers.hpp"

#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

namespace stecnn {

// ---------------------------------------------------------------------------
// Configurations
// ---------------------------------------------------------------------------

struct EquiOneDCNNConfig {
  Index lift_channels = 16;
  std::vector<Index> gconv_channels = {32, 32};
  Index kernel_size = 3;
  int num_scales = 3;
  Index scale_kernel_size = 2;  // scale offsets spanned by group kernels
  std::vector<Index> head_hidden = {64};
  Padding padding = Padding::Circular;
  ProjectionMode projection = ProjectionMode::Max;
  bool pool_translation = false;  // invariance test mode: also pool positions
};

struct EquiResNetConfig {
  std::vector<int> blocks = {1, 1, 1, 1};  // desk preset
  std::vector<Index> stage_channels = {16, 32, 64, 128};
  Index kernel_size = 3;
  int num_scales = 3;
  Index scale_kernel_size = 2;
  Padding padding = Padding::Circular;
  ProjectionMode projection = ProjectionMode::Max;
  bool pool_translation = false;

  static EquiResNetConfig paper_preset() {
    EquiResNetConfig cfg;
    cfg.blocks = {3, 4, 6, 3};
    return cfg;
  }
};

struct OneDCNNConfig {
  std::vector<Index> channels = {16, 32, 32};  // widths matched to EquiOneDCNN
  Index kernel_size = 3;
  std::vector<Index> head_hidden = {64};
  Padding padding = Padding::Circular;
};

struct MLPConfig {
  std::vector<Index> hidden = {512, 256, 128, 64};
};

enum class ModelKind { EquiOneDCNN, EquiResNet, OneDCNN, Mlp };

inline const char* to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::EquiOneDCNN: return "equi_onedcnn";
    case ModelKind::EquiResNet: return "equiresnet";
    case ModelKind::OneDCNN: return "onedcnn";
    case ModelKind::Mlp: return "mlp";
  }
  return "?";
}

inline ModelKind model_kind_from_string(const std::string& s) {
  if (s == "equi_onedcnn") return ModelKind::EquiOneDCNN;
  if (s == "equiresnet") return ModelKind::EquiResNet;
  if (s == "onedcnn") return ModelKind::OneDCNN;
  if (s == "mlp") return ModelKind::Mlp;
  fail("unknown model kind '", s, "'");
}

struct ModelConfig {
  ModelKind kind = ModelKind::EquiOneDCNN;
  EquiOneDCNNConfig equi_onedcnn;
  EquiResNetConfig equiresnet;
  OneDCNNConfig onedcnn;
  MLPConfig mlp;
};

// ---------------------------------------------------------------------------
// Model interface
// ---------------------------------------------------------------------------

/// A classifier from (B,6,16) windows to (B,17) logits with a named-parameter
/// registry. The trunk (everything up to the flattened features) and the head
/// are split so pre-trained trunks can be transplanted.
template <typename Scalar>
class Model {
 public:
  virtual ~Model() = default;

  virtual Tensor<Scalar> forward(const Tensor<Scalar>& x) = 0;
  /// Flattened trunk output of shape (B, feature_dim()).
  virtual Tensor<Scalar> features(const Tensor<Scalar>& x) = 0;
  virtual Index feature_dim() const = 0;
  virtual ModelKind kind() const = 0;

  void train() { training_ = true; }
  void eval() { training_ = false; }
  bool training() const { return training_; }

  std::vector<Tensor<Scalar>>& parameters() { return registry_.trainable; }
  std::vector<std::pair<std::string, Tensor<Scalar>>>& named_tensors() { return registry_.named; }
  Tensor<Scalar>* find_tensor(const std::string& name) { return registry_.find(name); }

  Index parameter_count() {
    Index n = 0;
    for (const auto& p : registry_.trainable) n += p.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : registry_.trainable) p.zero_grad();
  }

 protected:
  ParamRegistry<Scalar> registry_;
  bool training_ = true;
};

namespace detail {

inline void check_window_input(const Shape& shape) {
  check(shape.size() == 3 && shape[1] == kNumFeatures && shape[2] == kWindowLength,
        "model: input must be (B,", kNumFeatures, ",", kWindowLength, "), got ", to_string(shape));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// EquiOneDCNN: lift + two group convolutions + scale projection + MLP head
// ---------------------------------------------------------------------------

template <typename Scalar>
class EquiOneDCNN final : public Model<Scalar> {
 public:
  EquiOneDCNN(const EquiOneDCNNConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    check(cfg.lift_channels > 0 && cfg.kernel_size > 0 && cfg.num_scales > 0 &&
              cfg.scale_kernel_size > 0 && !cfg.gconv_channels.empty(),
          "EquiOneDCNN: all sizes must be positive");
    for (Index c : cfg.gconv_channels) check(c > 0, "EquiOneDCNN: channel sizes must be positive");
    const ScaleGrid grid(cfg.num_scales);
    Rng rng(seed);
    lift_ = LiftLayer<Scalar>(kNumFeatures, cfg.lift_channels, cfg.kernel_size, grid, cfg.padding,
                              rng);
    lift_bn_ = BatchNormLayer<Scalar>(cfg.lift_channels);
    Index in = cfg.lift_channels;
    for (Index out : cfg.gconv_channels) {
      gconvs_.emplace_back(in, out, cfg.scale_kernel_size, cfg.kernel_size, grid, cfg.padding, rng);
      gconv_bns_.emplace_back(out);
      in = out;
    }
    feature_dim_ = cfg.pool_translation ? in : in * kWindowLength;
    Index head_in = feature_dim_;
    for (Index h : cfg.head_hidden) {
      check(h > 0, "EquiOneDCNN: head sizes must be positive");
      head_.emplace_back(head_in, h, rng);
      head_in = h;
    }
    out_ = DenseLayer<Scalar>(head_in, kNumClasses, rng);

    lift_.register_into(this->registry_, "trunk.lift");
    lift_bn_.register_into(this->registry_, "trunk.lift_bn");
    for (std::size_t i = 0; i < gconvs_.size(); ++i) {
      gconvs_[i].register_into(this->registry_, "trunk.gconv" + std::to_string(i));
      gconv_bns_[i].register_into(this->registry_, "trunk.gconv" + std::to_string(i) + "_bn");
    }
    for (std::size_t i = 0; i < head_.size(); ++i)
      head_[i].register_into(this->registry_, "head.fc" + std::to_string(i));
    out_.register_into(this->registry_, "head.out");
  }

  Tensor<Scalar> features(const Tensor<Scalar>& x) override {
    detail::check_window_input(x.shape());
    auto f = relu(lift_bn_.forward(lift_.forward(x), this->training_));
    ensure_finite(f, "equi_onedcnn.lift");
    for (std::size_t i = 0; i < gconvs_.size(); ++i) {
      f = relu(gconv_bns_[i].forward(gconvs_[i].forward(f), this->training_));
      ensure_finite(f, "equi_onedcnn.gconv");
    }
    auto p = project(f, cfg_.projection);
    if (cfg_.pool_translation) p = max_pool_axis(p, 2);
    return flatten_batch(p);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override {
    auto h = features(x);
    for (auto& fc : head_) h = relu(fc.forward(h));
    auto logits = out_.forward(h);
    ensure_finite(logits, "equi_onedcnn.head");
    return logits;
  }

  Index feature_dim() const override { return feature_dim_; }
  ModelKind kind() const override { return ModelKind::EquiOneDCNN; }

 private:
  EquiOneDCNNConfig cfg_;
  LiftLayer<Scalar> lift_;
  BatchNormLayer<Scalar> lift_bn_;
  std::vector<GroupConvLayer<Scalar>> gconvs_;
  std::vector<BatchNormLayer<Scalar>> gconv_bns_;
  std::vector<DenseLayer<Scalar>> head_;
  DenseLayer<Scalar> out_;
  Index feature_dim_ = 0;
};

// ---------------------------------------------------------------------------
// EquiResNet: lift + residual stages of group convolutions + projection
// ---------------------------------------------------------------------------

/// Two group convolutions, each followed by batch normalization and ReLU,
/// added onto an identity skip (1x1 group convolution when channels change).
template <typename Scalar>
struct ResidualBlock {
  GroupConvLayer<Scalar> conv1, conv2;
  BatchNormLayer<Scalar> bn1, bn2;
  bool channel_change = false;
  GroupConvLayer<Scalar> skip;

  ResidualBlock() = default;
  ResidualBlock(Index in, Index out, Index scale_taps, Index taps, ScaleGrid grid, Padding pad,
                Rng& rng)
      : conv1(in, out, scale_taps, taps, grid, pad, rng),
        conv2(out, out, scale_taps, taps, grid, pad, rng),
        bn1(out),
        bn2(out),
        channel_change(in != out) {
    if (channel_change) skip = GroupConvLayer<Scalar>(in, out, 1, 1, grid, pad, rng);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training) {
    auto h = relu(bn1.forward(conv1.forward(x), training));
    h = relu(bn2.forward(conv2.forward(h), training));
    auto s = channel_change ? skip.forward(x) : x;
    return add(s, h);
  }

  void register_into(ParamRegistry<Scalar>& reg, const std::string& prefix) {
    conv1.register_into(reg, prefix + ".conv1");
    bn1.register_into(reg, prefix + ".bn1");
    conv2.register_into(reg, prefix + ".conv2");
    bn2.register_into(reg, prefix + ".bn2");
    if (channel_change) skip.register_into(reg, prefix + ".skip");
  }
};

template <typename Scalar>
class EquiResNet final : public Model<Scalar> {
 public:
  EquiResNet(const EquiResNetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    check(cfg.blocks.size() == cfg.stage_channels.size(),
          "EquiResNet: need one channel width per stage");
    for (int b : cfg.blocks) check(b > 0, "EquiResNet: block counts must be positive");
    for (std::size_t i = 1; i < cfg.stage_channels.size(); ++i)
      check(cfg.stage_channels[i] >= cfg.stage_channels[i - 1],
            "EquiResNet: stage channels must be non-decreasing");
    const ScaleGrid grid(cfg.num_scales);
    Rng rng(seed);
    lift_ = LiftLayer<Scalar>(kNumFeatures, cfg.stage_channels[0], cfg.kernel_size, grid,
                              cfg.padding, rng);
    lift_bn_ = BatchNormLayer<Scalar>(cfg.stage_channels[0]);
    Index in = cfg.stage_channels[0];
    for (std::size_t s = 0; s < cfg.blocks.size(); ++s) {
      for (int b = 0; b < cfg.blocks[s]; ++b) {
        blocks_.emplace_back(in, cfg.stage_channels[s], cfg.scale_kernel_size, cfg.kernel_size,
                             grid, cfg.padding, rng);
        in = cfg.stage_channels[s];
      }
    }
    final_conv_ = GroupConvLayer<Scalar>(in, in, cfg.scale_kernel_size, cfg.kernel_size, grid,
                                         cfg.padding, rng);
    final_bn_ = BatchNormLayer<Scalar>(in);
    feature_dim_ = cfg.pool_translation ? in : in * kWindowLength;
    out_ = DenseLayer<Scalar>(feature_dim_, kNumClasses, rng);

    lift_.register_into(this->registry_, "trunk.lift");
    lift_bn_.register_into(this->registry_, "trunk.lift_bn");
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      blocks_[i].register_into(this->registry_, "trunk.block" + std::to_string(i));
    final_conv_.register_into(this->registry_, "trunk.final_conv");
    final_bn_.register_into(this->registry_, "trunk.final_bn");
    out_.register_into(this->registry_, "head.out");
  }

  Tensor<Scalar> features(const Tensor<Scalar>& x) override {
    detail::check_window_input(x.shape());
    auto f = relu(lift_bn_.forward(lift_.forward(x), this->training_));
    ensure_finite(f, "equiresnet.lift");
    for (auto& block : blocks_) {
      f = block.forward(f, this->training_);
      ensure_finite(f, "equiresnet.block");
    }
    f = relu(final_bn_.forward(final_conv_.forward(f), this->training_));
    ensure_finite(f, "equiresnet.final_conv");
    auto p = project(f, cfg_.projection);
    if (cfg_.pool_translation) p = max_pool_axis(p, 2);
    return flatten_batch(p);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override {
    auto logits = out_.forward(features(x));
    ensure_finite(logits, "equiresnet.head");
    return logits;
  }

  Index feature_dim() const override { return feature_dim_; }
  ModelKind kind() const override { return ModelKind::EquiResNet; }

  ResidualBlock<Scalar>& block(std::size_t i) { return blocks_.at(i); }

 private:
  EquiResNetConfig cfg_;
  LiftLayer<Scalar> lift_;
  BatchNormLayer<Scalar> lift_bn_;
  std::vector<ResidualBlock<Scalar>> blocks_;
  GroupConvLayer<Scalar> final_conv_;
  BatchNormLayer<Scalar> final_bn_;
  DenseLayer<Scalar> out_;
  Index feature_dim_ = 0;
};

// ---------------------------------------------------------------------------
// OneDCNN: the non-equivariant counterpart of EquiOneDCNN
// ---------------------------------------------------------------------------

template <typename Scalar>
class OneDCNN final : public Model<Scalar> {
 public:
  OneDCNN(const OneDCNNConfig& cfg, std::uint64_t seed) {
    check(!cfg.channels.empty() && cfg.kernel_size > 0, "OneDCNN: bad config");
    Rng rng(seed);
    Index in = kNumFeatures;
    for (Index out : cfg.channels) {
      check(out > 0, "OneDCNN: channel sizes must be positive");
      convs_.emplace_back(in, out, cfg.kernel_size, cfg.padding, rng);
      bns_.emplace_back(out);
      in = out;
    }
    feature_dim_ = in * kWindowLength;
    Index head_in = feature_dim_;
    for (Index h : cfg.head_hidden) {
      head_.emplace_back(head_in, h, rng);
      head_in = h;
    }
    out_ = DenseLayer<Scalar>(head_in, kNumClasses, rng);

    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].register_into(this->registry_, "trunk.conv" + std::to_string(i));
      bns_[i].register_into(this->registry_, "trunk.conv" + std::to_string(i) + "_bn");
    }
    for (std::size_t i = 0; i < head_.size(); ++i)
      head_[i].register_into(this->registry_, "head.fc" + std::to_string(i));
    out_.register_into(this->registry_, "head.out");
  }

  Tensor<Scalar> features(const Tensor<Scalar>& x) override {
    detail::check_window_input(x.shape());
    auto f = x;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      f = relu(bns_[i].forward(convs_[i].forward(f), this->training_));
      ensure_finite(f, "onedcnn.conv");
    }
    return flatten_batch(f);
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override {
    auto h = features(x);
    for (auto& fc : head_) h = relu(fc.forward(h));
    auto logits = out_.forward(h);
    ensure_finite(logits, "onedcnn.head");
    return logits;
  }

  Index feature_dim() const override { return feature_dim_; }
  ModelKind kind() const override { return ModelKind::OneDCNN; }

 private:
  std::vector<Conv1dLayer<Scalar>> convs_;
  std::vector<BatchNormLayer<Scalar>> bns_;
  std::vector<DenseLayer<Scalar>> head_;
  DenseLayer<Scalar> out_;
  Index feature_dim_ = 0;
};

// ---------------------------------------------------------------------------
// MLP baseline on the flattened 96-vector
// ---------------------------------------------------------------------------

template <typename Scalar>
class Mlp final : public Model<Scalar> {
 public:
  Mlp(const MLPConfig& cfg, std::uint64_t seed) {
    check(!cfg.hidden.empty(), "Mlp: need at least one hidden layer");
    Rng rng(seed);
    Index in = kNumFeatures * kWindowLength;
    for (Index h : cfg.hidden) {
      check(h > 0, "Mlp: layer sizes must be positive");
      layers_.emplace_back(in, h, rng);
      bns_.emplace_back(h);
      in = h;
    }
    feature_dim_ = in;
    out_ = DenseLayer<Scalar>(in, kNumClasses, rng);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      layers_[i].register_into(this->registry_, "trunk.fc" + std::to_string(i));
      bns_[i].register_into(this->registry_, "trunk.fc" + std::to_string(i) + "_bn");
    }
    out_.register_into(this->registry_, "head.out");
  }

  Tensor<Scalar> features(const Tensor<Scalar>& x) override {
    // Accepts the flattened (B,96) form or raw (B,6,16) windows.
    Tensor<Scalar> h;
    if (x.rank() == 3) {
      detail::check_window_input(x.shape());
      h = flatten_batch(x);
    } else {
      check(x.rank() == 2 && x.dim(1) == kNumFeatures * kWindowLength,
            "mlp: input must be (B,96) or (B,6,16), got ", to_string(x.shape()));
      h = x;
    }
    // Each layer: linear transform, ReLU activation, then batch normalization.
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      h = bns_[i].forward(relu(layers_[i].forward(h)), this->training_);
      ensure_finite(h, "mlp.fc");
    }
    return h;
  }

  Tensor<Scalar> forward(const Tensor<Scalar>& x) override {
    auto logits = out_.forward(features(x));
    ensure_finite(logits, "mlp.head");
    return logits;
  }

  Index feature_dim() const override { return feature_dim_; }
  ModelKind kind() const override { return ModelKind::Mlp; }

 private:
  std::vector<DenseLayer<Scalar>> layers_;
  std::vector<BatchNormLayer<Scalar>> bns_;
  DenseLayer<Scalar> out_;
  Index feature_dim_ = 0;
};

// ---------------------------------------------------------------------------
// Factory, batching, prediction
// ---------------------------------------------------------------------------

template <typename Scalar>
std::unique_ptr<Model<Scalar>> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  switch (cfg.kind) {
    case ModelKind::EquiOneDCNN: return std::make_unique<EquiOneDCNN<Scalar>>(cfg.equi_onedcnn, seed);
    case ModelKind::EquiResNet: return std::make_unique<EquiResNet<Scalar>>(cfg.equiresnet, seed);
    case ModelKind::OneDCNN: return std::make_unique<OneDCNN<Scalar>>(cfg.onedcnn, seed);
    case ModelKind::Mlp: return std::make_unique<Mlp<Scalar>>(cfg.mlp, seed);
  }
  fail("build_model: unknown kind");
}

/// Stacks windows (all, or the given subset) into a (B,6,16) batch tensor.
template <typename Scalar>
Tensor<Scalar> make_batch(std::span<const WindowSample> samples,
                          std::span<const Index> indices = {}) {
  const Index batch = indices.empty() ? static_cast<Index>(samples.size())
                                      : static_cast<Index>(indices.size());
  check(batch > 0, "make_batch: empty batch");
  Tensor<Scalar> x = Tensor<Scalar>::empty({batch, kNumFeatures, kWindowLength});
  for (Index b = 0; b < batch; ++b) {
    const WindowSample& s =
        samples[static_cast<std::size_t>(indices.empty() ? b : indices[static_cast<std::size_t>(b)])];
    for (Index f = 0; f < kNumFeatures; ++f)
      for (Index p = 0; p < kWindowLength; ++p)
        x(b, f, p) = static_cast<Scalar>(s.x(f, p));
  }
  return x;
}

inline std::vector<int> batch_labels(std::span<const WindowSample> samples,
                                     std::span<const Index> indices = {}) {
  const std::size_t batch = indices.empty() ? samples.size() : indices.size();
  std::vector<int> y(batch);
  for (std::size_t b = 0; b < batch; ++b)
    y[b] = samples[static_cast<std::size_t>(indices.empty() ? static_cast<Index>(b)
                                                            : indices[b])].y;
  return y;
}

/// Argmax class per row, ties broken toward the smallest index. Runs the
/// model in eval mode without recording.
template <typename Scalar>
std::vector<int> predict(Model<Scalar>& model, const Tensor<Scalar>& x) {
  NoGrad no_grad;
  const bool was_training = model.training();
  model.eval();
  auto logits = model.forward(x);
  if (was_training) model.train();
  const Index batch = logits.dim(0), classes = logits.dim(1);
  std::vector<int> labels(static_cast<std::size_t>(batch));
  for (Index b = 0; b < batch; ++b) {
    Index best = 0;
    for (Index k = 1; k < classes; ++k)
      if (logits[b * classes + k] > logits[b * classes + best]) best = k;
    labels[static_cast<std::size_t>(b)] = static_cast<int>(best);
  }
  return labels;
}

}  // namespace stecnn
