#pragma once

#include "stecnn/models.hpp"
#include "stecnn/optim.hpp"

#include <cmath>
#include <map>
#include <string>
#include <vector>

namespace stecnn {

// ---------------------------------------------------------------------------
// View augmentation
// ---------------------------------------------------------------------------

struct AugmentationPolicy {
  double crop_min_fraction = 0.5;  // shortest crop as a fraction of the window
  double flip_probability = 0.5;

  void validate() const {
    check(crop_min_fraction > 0.0 && crop_min_fraction <= 1.0,
          "AugmentationPolicy: crop fraction must lie in (0,1]");
    check(flip_probability >= 0.0 && flip_probability <= 1.0,
          "AugmentationPolicy: flip probability must lie in [0,1]");
  }
};

/// Random resized crop along the position axis (all feature rows cropped
/// identically, linear resampling back to the original length) followed by a
/// random reversal of the position axis.
inline Eigen::MatrixXd augment(const Eigen::MatrixXd& window, const AugmentationPolicy& policy,
                               Rng& rng) {
  policy.validate();
  const Index rows = window.rows(), length = window.cols();
  const Index min_span =
      static_cast<Index>(std::ceil(policy.crop_min_fraction * static_cast<double>(length)));
  const Index span = min_span + rng.uniform_index(length - min_span + 1);
  const Index start = rng.uniform_index(length - span + 1);
  Eigen::MatrixXd out(rows, length);
  if (span == 1) {
    for (Index p = 0; p < length; ++p) out.col(p) = window.col(start);
  } else {
    const double step = static_cast<double>(span - 1) / static_cast<double>(length - 1);
    for (Index p = 0; p < length; ++p) {
      const double src = static_cast<double>(start) + static_cast<double>(p) * step;
      const Index lo = std::min(static_cast<Index>(std::floor(src)), start + span - 2);
      const double frac = src - static_cast<double>(lo);
      out.col(p) = (1.0 - frac) * window.col(lo) + frac * window.col(lo + 1);
    }
  }
  if (rng.bernoulli(policy.flip_probability)) out = out.rowwise().reverse().eval();
  return out;
}

// ---------------------------------------------------------------------------
// NT-Xent loss
// ---------------------------------------------------------------------------

/// Normalized temperature-scaled cross entropy over 2N unit embeddings laid
/// out so rows (2i, 2i+1) form the positive pairs:
///   L_i = -log( exp(sim(z_i,z_j)/tau) / sum_{k != i} exp(sim(z_i,z_k)/tau) )
/// averaged over all 2N anchors, with sim the cosine similarity (the dot
/// product, since rows are unit-normalized).
template <typename Scalar>
Tensor<Scalar> nt_xent(const Tensor<Scalar>& z, double tau) {
  check(z.rank() == 2, "nt_xent: embeddings must be (2N,D), got ", to_string(z.shape()));
  const Index rows = z.dim(0), dim = z.dim(1);
  check(rows >= 4 && rows % 2 == 0, "nt_xent: need at least 2 positive pairs, got ", rows,
        " embeddings");
  check(tau > 0.0, "nt_xent: temperature must be positive, got ", tau);
  for (Index r = 0; r < rows; ++r) {
    const double norm = std::sqrt(static_cast<double>(z.values().segment(r * dim, dim).square().sum()));
    check(std::abs(norm - 1.0) < 1e-3, "nt_xent: embedding row ", r, " is not unit length (", norm,
          ")");
  }

  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> zm(z.data(), rows, dim);
  RowMat sim = zm * zm.transpose();

  const Scalar inv_tau = static_cast<Scalar>(1.0 / tau);
  auto weights = std::make_shared<RowMat>(rows, rows);  // softmax over k != i, per anchor
  Scalar loss = 0;
  for (Index i = 0; i < rows; ++i) {
    const Index pos = (i % 2 == 0) ? i + 1 : i - 1;
    Scalar max_s = -std::numeric_limits<Scalar>::infinity();
    for (Index k = 0; k < rows; ++k)
      if (k != i) max_s = std::max(max_s, sim(i, k) * inv_tau);
    Scalar denom = 0;
    for (Index k = 0; k < rows; ++k) {
      if (k == i) {
        (*weights)(i, k) = 0;
        continue;
      }
      const Scalar e = std::exp(sim(i, k) * inv_tau - max_s);
      (*weights)(i, k) = e;
      denom += e;
    }
    weights->row(i) /= denom;
    loss -= sim(i, pos) * inv_tau - max_s - std::log(denom);  // -log p(pos | anchor i)
  }
  loss /= static_cast<Scalar>(rows);

  Tensor<Scalar> out = Tensor<Scalar>::scalar(loss);
  if (track_grad(z)) {
    out.set_requires_grad(true);
    Tape<Scalar>::active().record("nt_xent", [z, out, weights, rows, dim, inv_tau]() {
      if (!out.has_grad() || !z.requires_grad()) return;
      // dL/dS(i,k) = (softmax_ik - [k = pos(i)]) / (tau * 2N); dL/dZ = (G + G^T) Z.
      RowMat g = *weights;
      for (Index i = 0; i < rows; ++i) {
        const Index pos = (i % 2 == 0) ? i + 1 : i - 1;
        g(i, pos) -= Scalar(1);
      }
      g *= out.grad()[0] * inv_tau / static_cast<Scalar>(rows);
      Eigen::Map<const RowMat> zm(z.data(), rows, dim);
      Eigen::Map<RowMat> gz(z.grad().data(), rows, dim);
      gz.noalias() += (g + g.transpose()) * zm;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pre-training and weight transfer
// ---------------------------------------------------------------------------

struct PretrainConfig {
  Index batch_size = 128;  // windows per batch (two views each)
  double tau = 0.1;
  int epochs = 50;
  double lr = 3e-4;
  Index projection_dim = 64;
  AugmentationPolicy augmentation;
  std::uint64_t seed = 0;

  void validate() const {
    check(batch_size >= 2, "PretrainConfig: batch size must be >= 2");
    check(tau > 0, "PretrainConfig: temperature must be positive");
    check(epochs >= 0, "PretrainConfig: epochs must be >= 0");
    augmentation.validate();
  }
};

struct PretrainResult {
  std::vector<double> epoch_losses;  // mean NT-Xent loss per epoch
};

/// SimCLR-style pre-training of a classifier trunk on unlabeled windows. A
/// two-layer projection head (hidden width = feature dim, ReLU between) is
/// appended for the contrastive objective and dropped afterwards; the trunk
/// weights are updated in place.
template <typename Scalar>
PretrainResult pretrain(Model<Scalar>& model, std::span<const WindowSample> unlabeled,
                        const PretrainConfig& cfg) {
  cfg.validate();
  check(!unlabeled.empty(), "pretrain: no unlabeled windows");
  const Index feature_dim = model.feature_dim();

  Rng init_rng(Rng::derive_seed(cfg.seed, 0xC0117A57ULL));
  DenseLayer<Scalar> proj_hidden(feature_dim, feature_dim, init_rng);
  DenseLayer<Scalar> proj_out(feature_dim, cfg.projection_dim, init_rng);

  std::vector<Tensor<Scalar>> params;
  for (auto& [name, t] : model.named_tensors())
    if (name.rfind("trunk.", 0) == 0 && t.requires_grad()) params.push_back(t);
  for (auto t : {proj_hidden.w, proj_hidden.b, proj_out.w, proj_out.b}) {
    t.set_requires_grad(true);
    params.push_back(t);
  }
  Adam<Scalar> adam(params, {.lr = cfg.lr});

  PretrainResult result;
  const Index n = static_cast<Index>(unlabeled.size());
  const Index batch = std::min(cfg.batch_size, n);
  auto& tape = Tape<Scalar>::active();
  model.train();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<Index> order(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng epoch_rng(Rng::derive_seed(cfg.seed, 0x500 + static_cast<std::uint64_t>(epoch)));
    epoch_rng.shuffle(order);

    double epoch_loss = 0;
    Index steps = 0;
    for (Index begin = 0; begin + batch <= n; begin += batch) {
      Tensor<Scalar> views = Tensor<Scalar>::empty({2 * batch, kNumFeatures, kWindowLength});
      for (Index b = 0; b < batch; ++b) {
        const Index sample = order[static_cast<std::size_t>(begin + b)];
        // Per-sample substreams keyed on (seed, epoch, sample) so view
        // generation is order-independent and parallelizable.
        Rng view_rng(Rng::derive_seed(Rng::derive_seed(cfg.seed, static_cast<std::uint64_t>(epoch)),
                                      static_cast<std::uint64_t>(sample)));
        const auto& w = unlabeled[static_cast<std::size_t>(sample)].x;
        for (int v = 0; v < 2; ++v) {
          const Eigen::MatrixXd aug = augment(w, cfg.augmentation, view_rng);
          for (Index f = 0; f < kNumFeatures; ++f)
            for (Index p = 0; p < kWindowLength; ++p)
              views(2 * b + v, f, p) = static_cast<Scalar>(aug(f, p));
        }
      }
      tape.reset();
      adam.zero_grad();
      auto h = relu(proj_hidden.forward(model.features(views)));
      auto embeddings = l2_normalize_rows(proj_out.forward(h));
      auto loss = nt_xent(embeddings, cfg.tau);
      if (!std::isfinite(static_cast<double>(loss.value())))
        fail_runtime("pretrain: non-finite loss at epoch ", epoch, ", batch ", steps);
      backward(loss);
      adam.step();
      epoch_loss += static_cast<double>(loss.value());
      ++steps;
      tape.reset();
    }
    result.epoch_losses.push_back(steps > 0 ? epoch_loss / static_cast<double>(steps) : 0.0);
  }
  return result;
}

/// Copies every "trunk.*" tensor from `source` into `target` by name. The
/// freshly initialized head is left untouched, and all parameters remain
/// trainable.
template <typename Scalar>
void transfer(const std::map<std::string, Tensor<Scalar>>& source, Model<Scalar>& target) {
  for (const auto& [name, tensor] : source) {
    if (name.rfind("trunk.", 0) != 0) continue;
    Tensor<Scalar>* dst = target.find_tensor(name);
    if (dst == nullptr) fail_runtime("transfer: target model has no tensor named '", name, "'");
    if (dst->shape() != tensor.shape())
      fail_runtime("transfer: shape mismatch for '", name, "': checkpoint ",
                   to_string(tensor.shape()), " vs model ", to_string(dst->shape()));
    dst->values() = tensor.values();
  }
}

}  // namespace stecnn
