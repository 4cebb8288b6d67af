#pragma once

#include "stecnn/tensor.hpp"

#include <cmath>
#include <vector>

namespace stecnn {

/// Adam with bias correction. Moment buffers shape-match their parameters;
/// the step counter advances by exactly one per step().
template <typename Scalar>
class Adam {
 public:
  struct Options {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  Adam() = default;
  explicit Adam(std::vector<Tensor<Scalar>> params, Options options = {})
      : params_(std::move(params)), options_(options) {
    check(options_.lr > 0 && options_.beta1 > 0 && options_.beta2 > 0 && options_.eps > 0,
          "Adam: hyperparameters must be positive");
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (const auto& p : params_) {
      m_.emplace_back(Storage::Zero(p.size()));
      v_.emplace_back(Storage::Zero(p.size()));
    }
  }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;  // untouched parameter: zero gradient, zero update
      const auto& g = p.grad();
      if (!g.isFinite().all())
        fail_runtime("Adam: non-finite gradient for parameter ", i, " at step ", t_);
      m_[i] = static_cast<Scalar>(options_.beta1) * m_[i] +
              static_cast<Scalar>(1.0 - options_.beta1) * g;
      v_[i] = static_cast<Scalar>(options_.beta2) * v_[i] +
              static_cast<Scalar>(1.0 - options_.beta2) * g.square();
      const Storage mhat = m_[i] / static_cast<Scalar>(bc1);
      const Storage vhat = v_[i] / static_cast<Scalar>(bc2);
      p.values() -= static_cast<Scalar>(options_.lr) * mhat /
                    (vhat.sqrt() + static_cast<Scalar>(options_.eps));
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  long step_count() const { return t_; }
  const Options& options() const { return options_; }

 private:
  using Storage = typename Tensor<Scalar>::Storage;
  std::vector<Tensor<Scalar>> params_;
  std::vector<Storage> m_, v_;
  Options options_;
  long t_ = 0;
};

}  // namespace stecnn
