#pragma once

#include "stecnn/group.hpp"
#include "stecnn/ops.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

namespace stecnn {

/// Named parameters and buffers of a model. Trainable tensors also appear in
/// the flat list handed to the optimizer.
template <typename Scalar>
struct ParamRegistry {
  std::vector<std::pair<std::string, Tensor<Scalar>>> named;
  std::vector<Tensor<Scalar>> trainable;

  void add_param(std::string name, const Tensor<Scalar>& t) {
    t.set_requires_grad(true);
    trainable.push_back(t);
    named.emplace_back(std::move(name), t);
  }

  void add_buffer(std::string name, const Tensor<Scalar>& t) {
    named.emplace_back(std::move(name), t);
  }

  Tensor<Scalar>* find(const std::string& name) {
    for (auto& [n, t] : named)
      if (n == name) return &t;
    return nullptr;
  }
};

namespace detail {

/// Fan-in-scaled uniform init with bound sqrt(1/fan_in).
template <typename Scalar>
Tensor<Scalar> fan_in_uniform(Shape shape, Index fan_in, Rng& rng) {
  const Scalar bound = static_cast<Scalar>(std::sqrt(1.0 / static_cast<double>(fan_in)));
  return Tensor<Scalar>::uniform(std::move(shape), -bound, bound, rng);
}

}  // namespace detail

template <typename Scalar>
struct DenseLayer {
  Tensor<Scalar> w, b;

  DenseLayer() = default;
  DenseLayer(Index in, Index out, Rng& rng)
      : w(detail::fan_in_uniform<Scalar>({in, out}, in, rng)),
        b(detail::fan_in_uniform<Scalar>({out}, in, rng)) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const { return affine(x, w, b); }

  void register_into(ParamRegistry<Scalar>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".w", w);
    reg.add_param(prefix + ".b", b);
  }
};

template <typename Scalar>
struct Conv1dLayer {
  Tensor<Scalar> w, b;
  Padding padding = Padding::Circular;

  Conv1dLayer() = default;
  Conv1dLayer(Index in, Index out, Index taps, Padding pad, Rng& rng)
      : w(detail::fan_in_uniform<Scalar>({out, in, taps}, in * taps, rng)),
        b(detail::fan_in_uniform<Scalar>({out}, in * taps, rng)),
        padding(pad) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    return add_channel_bias(conv1d(x, w, padding), b);
  }

  void register_into(ParamRegistry<Scalar>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".w", w);
    reg.add_param(prefix + ".b", b);
  }
};

template <typename Scalar>
struct LiftLayer {
  Tensor<Scalar> w, b;
  ScaleGrid grid;
  Padding padding = Padding::Circular;

  LiftLayer() = default;
  LiftLayer(Index in, Index out, Index taps, ScaleGrid g, Padding pad, Rng& rng)
      : w(detail::fan_in_uniform<Scalar>({out, in, taps}, in * taps, rng)),
        b(detail::fan_in_uniform<Scalar>({out}, in * taps, rng)),
        grid(g),
        padding(pad) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x) const {
    return add_channel_bias(lift(x, w, grid, padding), b);
  }

  void register_into(ParamRegistry<Scalar>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".w", w);
    reg.add_param(prefix + ".b", b);
  }
};

template <typename Scalar>
struct GroupConvLayer {
  Tensor<Scalar> w, b;
  ScaleGrid grid;
  Padding padding = Padding::Circular;

  GroupConvLayer() = default;
  GroupConvLayer(Index in, Index out, Index scale_taps, Index taps, ScaleGrid g, Padding pad,
                 Rng& rng)
      : w(detail::fan_in_uniform<Scalar>({out, in, scale_taps, taps}, in * scale_taps * taps, rng)),
        b(detail::fan_in_uniform<Scalar>({out}, in * scale_taps * taps, rng)),
        grid(g),
        padding(pad) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& f) const {
    return add_channel_bias(group_conv(f, w, grid, padding), b);
  }

  void register_into(ParamRegistry<Scalar>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".w", w);
    reg.add_param(prefix + ".b", b);
  }
};

template <typename Scalar>
struct BatchNormLayer {
  Tensor<Scalar> gamma, beta;
  Tensor<Scalar> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNormLayer() = default;
  explicit BatchNormLayer(Index channels)
      : gamma(Tensor<Scalar>::ones({channels})),
        beta(Tensor<Scalar>::zeros({channels})),
        running_mean(Tensor<Scalar>::zeros({channels})),
        running_var(Tensor<Scalar>::ones({channels})) {}

  Tensor<Scalar> forward(const Tensor<Scalar>& x, bool training) {
    return batch_norm1d(x, gamma, beta, running_mean, running_var, training, momentum, eps);
  }

  void register_into(ParamRegistry<Scalar>& reg, const std::string& prefix) {
    reg.add_param(prefix + ".gamma", gamma);
    reg.add_param(prefix + ".beta", beta);
    reg.add_buffer(prefix + ".running_mean", running_mean);
    reg.add_buffer(prefix + ".running_var", running_var);
  }
};

}  // namespace stecnn
