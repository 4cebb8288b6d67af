#pragma once

#include "stecnn/tensor.hpp"

#include <algorithm>
#include <functional>

namespace stecnn {

/// Central-difference gradient verification in 64-bit. f must map x to a
/// scalar tensor and be pure in x. Returns the maximum over coordinates of
/// |analytic - numeric| / max(1, |analytic|, |numeric|).
inline double fd_gradcheck(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           Tensor<double> x, double eps = 1e-5) {
  auto& tape = Tape<double>::active();
  tape.reset();
  x.set_requires_grad(true);
  x.zero_grad();
  Tensor<double> y = f(x);
  check(y.size() == 1, "fd_gradcheck: f must return a scalar, got shape ", to_string(y.shape()));
  tape.backward(y);
  Eigen::ArrayXd analytic = x.has_grad() ? x.grad() : Eigen::ArrayXd::Zero(x.size());
  tape.reset();
  x.zero_grad();

  double worst = 0.0;
  {
    NoGrad no_grad;
    for (Index i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + eps;
      const double up = f(x).value();
      x[i] = saved - eps;
      const double down = f(x).value();
      x[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double err = std::abs(analytic[i] - numeric) /
                         std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace stecnn
