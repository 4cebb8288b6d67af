#pragma once

#include "stecnn/tensor.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace stecnn {

enum class Padding { Circular, Zero };

namespace detail {

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

// Gathered-patch matrix for same-length 1D cross-correlation with a
// left-anchored, optionally dilated kernel:
//   cols(b*L+u, c*K+k) = x[b, c, u + k*dil]   (mod L when circular, else 0 outside)
// Column (c,k) is filled with two contiguous segments per batch row, so the
// gather stays cache-friendly and the convolution reduces to one GEMM.
template <typename Scalar>
void gather_patches(const Scalar* x, Index batch, Index channels, Index length, Index taps,
                    Index dilation, bool circular, MatrixX<Scalar>& cols) {
  cols.resize(batch * length, channels * taps);
  for (Index c = 0; c < channels; ++c) {
    for (Index k = 0; k < taps; ++k) {
      const Index off = k * dilation;
      Scalar* dst = cols.col(c * taps + k).data();
      for (Index b = 0; b < batch; ++b) {
        const Scalar* src = x + (b * channels + c) * length;
        Scalar* out = dst + b * length;
        const Index head = length - off;
        for (Index u = 0; u < head; ++u) out[u] = src[u + off];
        if (circular) {
          for (Index u = head; u < length; ++u) out[u] = src[u + off - length];
        } else {
          for (Index u = head; u < length; ++u) out[u] = Scalar(0);
        }
      }
    }
  }
}

// Scatter-add transpose of gather_patches.
template <typename Scalar>
void scatter_patches_add(const MatrixX<Scalar>& cols, Index batch, Index channels, Index length,
                         Index taps, Index dilation, bool circular, Scalar* dx) {
  for (Index c = 0; c < channels; ++c) {
    for (Index k = 0; k < taps; ++k) {
      const Index off = k * dilation;
      const Scalar* src = cols.col(c * taps + k).data();
      for (Index b = 0; b < batch; ++b) {
        Scalar* out = dx + (b * channels + c) * length;
        const Scalar* in = src + b * length;
        const Index head = length - off;
        for (Index u = 0; u < head; ++u) out[u + off] += in[u];
        if (circular) {
          for (Index u = head; u < length; ++u) out[u + off - length] += in[u];
        }
      }
    }
  }
}

// y[b,o,u] = sum_{c,k} w[o,c,k] * x[b,c,u+k*dil], same-length output.
template <typename Scalar>
void conv_forward(const Scalar* x, Index batch, Index channels, Index length, const Scalar* w,
                  Index out_channels, Index taps, Index dilation, bool circular, Scalar* y) {
  MatrixX<Scalar> cols;
  gather_patches(x, batch, channels, length, taps, dilation, circular, cols);
  // Row-major kernel [O, C*K] maps to a column-major (C*K) x O view of w^T.
  Eigen::Map<const MatrixX<Scalar>> wt(w, channels * taps, out_channels);
  MatrixX<Scalar> yt = cols * wt;  // (B*L) x O
  for (Index o = 0; o < out_channels; ++o) {
    const Scalar* src = yt.col(o).data();
    for (Index b = 0; b < batch; ++b) {
      Scalar* dst = y + (b * out_channels + o) * length;
      const Scalar* in = src + b * length;
      for (Index u = 0; u < length; ++u) dst[u] = in[u];
    }
  }
}

// Accumulates input/weight gradients; dx or dw may be null to skip a side.
template <typename Scalar>
void conv_backward(const Scalar* x, const Scalar* w, const Scalar* gy, Index batch, Index channels,
                   Index length, Index out_channels, Index taps, Index dilation, bool circular,
                   Scalar* dx, Scalar* dw) {
  MatrixX<Scalar> gyt(batch * length, out_channels);
  for (Index o = 0; o < out_channels; ++o) {
    Scalar* dst = gyt.col(o).data();
    for (Index b = 0; b < batch; ++b) {
      const Scalar* src = gy + (b * out_channels + o) * length;
      for (Index u = 0; u < length; ++u) dst[b * length + u] = src[u];
    }
  }
  if (dw != nullptr) {
    MatrixX<Scalar> cols;
    gather_patches(x, batch, channels, length, taps, dilation, circular, cols);
    Eigen::Map<MatrixX<Scalar>> dwt(dw, channels * taps, out_channels);
    dwt.noalias() += cols.transpose() * gyt;
  }
  if (dx != nullptr) {
    Eigen::Map<const MatrixX<Scalar>> wt(w, channels * taps, out_channels);
    MatrixX<Scalar> dcols = gyt * wt.transpose();  // (B*L) x (C*K)
    scatter_patches_add(dcols, batch, channels, length, taps, dilation, circular, dx);
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check(a.shape() == b.shape(), "add: shape mismatch ", to_string(a.shape()), " vs ",
        to_string(b.shape()));
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  y.values() = a.values() + b.values();
  if (track_grad(a, b)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("add", [a, b, y]() {
      if (!y.has_grad()) return;
      if (a.requires_grad()) a.grad() += y.grad();
      if (b.requires_grad()) b.grad() += y.grad();
    });
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check(a.shape() == b.shape(), "sub: shape mismatch ", to_string(a.shape()), " vs ",
        to_string(b.shape()));
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  y.values() = a.values() - b.values();
  if (track_grad(a, b)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("sub", [a, b, y]() {
      if (!y.has_grad()) return;
      if (a.requires_grad()) a.grad() += y.grad();
      if (b.requires_grad()) b.grad() -= y.grad();
    });
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  check(a.shape() == b.shape(), "mul: shape mismatch ", to_string(a.shape()), " vs ",
        to_string(b.shape()));
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  y.values() = a.values() * b.values();
  if (track_grad(a, b)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("mul", [a, b, y]() {
      if (!y.has_grad()) return;
      if (a.requires_grad()) a.grad() += y.grad() * b.values();
      if (b.requires_grad()) b.grad() += y.grad() * a.values();
    });
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  Tensor<Scalar> y = Tensor<Scalar>::empty(a.shape());
  y.values() = a.values() * factor;
  if (track_grad(a)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("scale", [a, y, factor]() {
      if (!y.has_grad()) return;
      if (a.requires_grad()) a.grad() += y.grad() * factor;
    });
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return mul(a, b);
}
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar s) {
  return scale(a, s);
}
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) {
  return scale(a, s);
}

// ---------------------------------------------------------------------------
// Reductions and shape
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Tensor<Scalar> y = Tensor<Scalar>::scalar(x.values().sum());
  if (track_grad(x)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("sum", [x, y]() {
      if (!y.has_grad()) return;
      if (x.requires_grad()) x.grad() += y.grad()[0];
    });
  }
  return y;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  check(x.size() > 0, "mean: empty tensor");
  const Scalar inv = Scalar(1) / static_cast<Scalar>(x.size());
  Tensor<Scalar> y = Tensor<Scalar>::scalar(x.values().sum() * inv);
  if (track_grad(x)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("mean", [x, y, inv]() {
      if (!y.has_grad()) return;
      if (x.requires_grad()) x.grad() += y.grad()[0] * inv;
    });
  }
  return y;
}

/// Copies data into a new shape with the same element count.
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  check(numel(shape) == x.size(), "reshape: cannot view ", to_string(x.shape()), " as ",
        to_string(shape));
  Tensor<Scalar> y = Tensor<Scalar>::empty(std::move(shape));
  y.values() = x.values();
  if (track_grad(x)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("reshape", [x, y]() {
      if (!y.has_grad()) return;
      if (x.requires_grad()) x.grad() += y.grad();
    });
  }
  return y;
}

/// (B, d1, d2, ...) -> (B, d1*d2*...)
template <typename Scalar>
Tensor<Scalar> flatten_batch(const Tensor<Scalar>& x) {
  check(x.rank() >= 2, "flatten_batch: rank must be >= 2");
  return reshape(x, Shape{x.dim(0), x.size() / x.dim(0)});
}

// ---------------------------------------------------------------------------
// Dense algebra
// ---------------------------------------------------------------------------

/// y = x W + b with x:(B,D), W:(D,E), b:(E).
template <typename Scalar>
Tensor<Scalar> affine(const Tensor<Scalar>& x, const Tensor<Scalar>& w, const Tensor<Scalar>& b) {
  check(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "affine: expected ranks (2,2,1), got ",
        x.rank(), ",", w.rank(), ",", b.rank());
  const Index batch = x.dim(0), in = x.dim(1), out = w.dim(1);
  check(w.dim(0) == in, "affine: inner dimension mismatch, x ", to_string(x.shape()), " vs W ",
        to_string(w.shape()));
  check(b.dim(0) == out, "affine: bias length ", b.dim(0), " != output width ", out);

  using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> xm(x.data(), batch, in);
  Eigen::Map<const RowMat> wm(w.data(), in, out);
  Tensor<Scalar> y = Tensor<Scalar>::empty({batch, out});
  Eigen::Map<RowMat> ym(y.data(), batch, out);
  ym.noalias() = xm * wm;
  Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> bv(b.data(), out);
  ym.rowwise() += bv.transpose();

  if (track_grad(x, w, b)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("affine", [x, w, b, y, batch, in, out]() {
      if (!y.has_grad()) return;
      Eigen::Map<const RowMat> gm(y.grad().data(), batch, out);
      if (x.requires_grad()) {
        Eigen::Map<const RowMat> wm(w.data(), in, out);
        Eigen::Map<RowMat> gx(x.grad().data(), batch, in);
        gx.noalias() += gm * wm.transpose();
      }
      if (w.requires_grad()) {
        Eigen::Map<const RowMat> xm(x.data(), batch, in);
        Eigen::Map<RowMat> gw(w.grad().data(), in, out);
        gw.noalias() += xm.transpose() * gm;
      }
      if (b.requires_grad()) {
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>> gb(b.grad().data(), out);
        gb.noalias() += gm.colwise().sum().transpose();
      }
    });
  }
  return y;
}

/// Adds a per-channel bias along axis 1 of a rank >= 2 tensor.
template <typename Scalar>
Tensor<Scalar> add_channel_bias(const Tensor<Scalar>& x, const Tensor<Scalar>& b) {
  check(x.rank() >= 2, "add_channel_bias: rank must be >= 2");
  check(b.rank() == 1 && b.dim(0) == x.dim(1), "add_channel_bias: bias shape ",
        to_string(b.shape()), " does not match channel count ", x.dim(1));
  const Index batch = x.dim(0), channels = x.dim(1), inner = x.size() / (x.dim(0) * x.dim(1));
  Tensor<Scalar> y = Tensor<Scalar>::empty(x.shape());
  for (Index n = 0; n < batch; ++n)
    for (Index c = 0; c < channels; ++c) {
      const Index base = (n * channels + c) * inner;
      y.values().segment(base, inner) = x.values().segment(base, inner) + b[c];
    }
  if (track_grad(x, b)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("add_channel_bias", [x, b, y, batch, channels, inner]() {
      if (!y.has_grad()) return;
      if (x.requires_grad()) x.grad() += y.grad();
      if (b.requires_grad()) {
        for (Index n = 0; n < batch; ++n)
          for (Index c = 0; c < channels; ++c)
            b.grad()[c] += y.grad().segment((n * channels + c) * inner, inner).sum();
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Same-length 1D cross-correlation with a left-anchored kernel:
///   y[b,o,u] = sum_{c,k} w[o,c,k] * x[b,c,u+k*dilation]
/// Positions wrap modulo L under circular padding and read zero outside [0,L)
/// under zero padding. x:(B,Cin,L), w:(Cout,Cin,K) -> y:(B,Cout,L).
template <typename Scalar>
Tensor<Scalar> conv1d(const Tensor<Scalar>& x, const Tensor<Scalar>& w, Padding padding,
                      Index dilation = 1) {
  check(x.rank() == 3, "conv1d: input must be (B,Cin,L), got ", to_string(x.shape()));
  check(w.rank() == 3, "conv1d: kernel must be (Cout,Cin,K), got ", to_string(w.shape()));
  const Index batch = x.dim(0), channels = x.dim(1), length = x.dim(2);
  const Index out_channels = w.dim(0), taps = w.dim(2);
  check(w.dim(1) == channels, "conv1d: input has ", channels, " channels but kernel expects ",
        w.dim(1));
  check(dilation >= 1, "conv1d: dilation must be >= 1");
  const Index support = (taps - 1) * dilation + 1;
  check(support <= length, "conv1d: kernel support ", support, " exceeds input length ", length);

  const bool circular = padding == Padding::Circular;
  Tensor<Scalar> y = Tensor<Scalar>::empty({batch, out_channels, length});
  detail::conv_forward(x.data(), batch, channels, length, w.data(), out_channels, taps, dilation,
                       circular, y.data());
  if (track_grad(x, w)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record(
        "conv1d", [x, w, y, batch, channels, length, out_channels, taps, dilation, circular]() {
          if (!y.has_grad()) return;
          detail::conv_backward(x.data(), w.data(), y.grad().data(), batch, channels, length,
                                out_channels, taps, dilation, circular,
                                x.requires_grad() ? x.grad().data() : nullptr,
                                w.requires_grad() ? w.grad().data() : nullptr);
        });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Nonlinearities and pooling
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  Tensor<Scalar> y = Tensor<Scalar>::empty(x.shape());
  y.values() = x.values().max(Scalar(0));
  if (track_grad(x)) {
    y.set_requires_grad(true);
    // Subgradient at 0 is 0.
    Tape<Scalar>::active().record("relu", [x, y]() {
      if (!y.has_grad() || !x.requires_grad()) return;
      x.grad() += (x.values() > Scalar(0)).select(y.grad(), Scalar(0));
    });
  }
  return y;
}

/// Maximum over one axis; the axis is removed from the shape. Backward routes
/// the gradient to the first maximal element along the axis.
template <typename Scalar>
Tensor<Scalar> max_pool_axis(const Tensor<Scalar>& x, int axis) {
  check(axis >= 0 && axis < x.rank(), "max_pool_axis: axis ", axis, " invalid for rank ", x.rank());
  const Shape& s = x.shape();
  Shape out_shape;
  Index outer = 1, inner = 1;
  for (int d = 0; d < x.rank(); ++d) {
    if (d < axis) outer *= s[static_cast<std::size_t>(d)];
    if (d > axis) inner *= s[static_cast<std::size_t>(d)];
    if (d != axis) out_shape.push_back(s[static_cast<std::size_t>(d)]);
  }
  const Index n = s[static_cast<std::size_t>(axis)];
  Tensor<Scalar> y = Tensor<Scalar>::empty(std::move(out_shape));
  auto argmax = std::make_shared<std::vector<Index>>(static_cast<std::size_t>(outer * inner));
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      Index best = o * n * inner + i;
      Scalar best_v = x[best];
      for (Index a = 1; a < n; ++a) {
        const Index idx = (o * n + a) * inner + i;
        if (x[idx] > best_v) {
          best_v = x[idx];
          best = idx;
        }
      }
      y[o * inner + i] = best_v;
      (*argmax)[static_cast<std::size_t>(o * inner + i)] = best;
    }
  }
  if (track_grad(x)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("max_pool_axis", [x, y, argmax]() {
      if (!y.has_grad() || !x.requires_grad()) return;
      for (Index j = 0; j < y.size(); ++j)
        x.grad()[(*argmax)[static_cast<std::size_t>(j)]] += y.grad()[j];
    });
  }
  return y;
}

/// Arithmetic mean over one axis; the axis is removed from the shape.
template <typename Scalar>
Tensor<Scalar> mean_pool_axis(const Tensor<Scalar>& x, int axis) {
  check(axis >= 0 && axis < x.rank(), "mean_pool_axis: axis ", axis, " invalid for rank ",
        x.rank());
  const Shape& s = x.shape();
  Shape out_shape;
  Index outer = 1, inner = 1;
  for (int d = 0; d < x.rank(); ++d) {
    if (d < axis) outer *= s[static_cast<std::size_t>(d)];
    if (d > axis) inner *= s[static_cast<std::size_t>(d)];
    if (d != axis) out_shape.push_back(s[static_cast<std::size_t>(d)]);
  }
  const Index n = s[static_cast<std::size_t>(axis)];
  const Scalar inv = Scalar(1) / static_cast<Scalar>(n);
  Tensor<Scalar> y = Tensor<Scalar>::zeros(std::move(out_shape));
  for (Index o = 0; o < outer; ++o)
    for (Index a = 0; a < n; ++a)
      for (Index i = 0; i < inner; ++i) y[o * inner + i] += x[(o * n + a) * inner + i] * inv;
  if (track_grad(x)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("mean_pool_axis", [x, y, outer, inner, n, inv]() {
      if (!y.has_grad() || !x.requires_grad()) return;
      for (Index o = 0; o < outer; ++o)
        for (Index a = 0; a < n; ++a)
          for (Index i = 0; i < inner; ++i)
            x.grad()[(o * n + a) * inner + i] += y.grad()[o * inner + i] * inv;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Normalizes per channel (axis 1) over every other axis. In train mode batch
/// statistics are used and the running stats updated in place; in eval mode
/// the running stats are used. gamma/beta/running tensors have shape (C).
template <typename Scalar>
Tensor<Scalar> batch_norm1d(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                            const Tensor<Scalar>& beta, Tensor<Scalar>& running_mean,
                            Tensor<Scalar>& running_var, bool training, double momentum = 0.1,
                            double eps = 1e-5) {
  check(x.rank() >= 2, "batch_norm1d: rank must be >= 2, got ", x.rank());
  const Index batch = x.dim(0), channels = x.dim(1);
  const Index inner = x.size() / (batch * channels);
  check(gamma.size() == channels && beta.size() == channels, "batch_norm1d: gamma/beta size ",
        gamma.size(), "/", beta.size(), " != channel count ", channels);
  check(running_mean.size() == channels && running_var.size() == channels,
        "batch_norm1d: running stat size mismatch");
  if (training && batch == 1) warn("batch_norm1d: train-mode batch of size 1");

  using Storage = typename Tensor<Scalar>::Storage;
  const Index reduce_n = batch * inner;
  Storage mean_c(channels), inv_std(channels);
  if (training) {
    for (Index c = 0; c < channels; ++c) {
      Scalar m = 0;
      for (Index b = 0; b < batch; ++b)
        m += x.values().segment((b * channels + c) * inner, inner).sum();
      m /= static_cast<Scalar>(reduce_n);
      Scalar v = 0;
      for (Index b = 0; b < batch; ++b)
        v += (x.values().segment((b * channels + c) * inner, inner) - m).square().sum();
      v /= static_cast<Scalar>(reduce_n);
      mean_c[c] = m;
      inv_std[c] = Scalar(1) / std::sqrt(v + static_cast<Scalar>(eps));
      running_mean[c] = static_cast<Scalar>((1.0 - momentum) * running_mean[c] + momentum * m);
      running_var[c] = static_cast<Scalar>((1.0 - momentum) * running_var[c] + momentum * v);
    }
  } else {
    for (Index c = 0; c < channels; ++c) {
      mean_c[c] = running_mean[c];
      inv_std[c] = Scalar(1) / std::sqrt(running_var[c] + static_cast<Scalar>(eps));
    }
  }

  Tensor<Scalar> y = Tensor<Scalar>::empty(x.shape());
  auto xhat = std::make_shared<Storage>(x.size());
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c) {
      const Index base = (b * channels + c) * inner;
      xhat->segment(base, inner) = (x.values().segment(base, inner) - mean_c[c]) * inv_std[c];
      y.values().segment(base, inner) = xhat->segment(base, inner) * gamma[c] + beta[c];
    }

  if (track_grad(x, gamma, beta)) {
    y.set_requires_grad(true);
    auto istd = std::make_shared<Storage>(std::move(inv_std));
    Tape<Scalar>::active().record(
        "batch_norm1d", [x, gamma, beta, y, xhat, istd, batch, channels, inner, reduce_n,
                         training]() {
          if (!y.has_grad()) return;
          const Scalar inv_n = Scalar(1) / static_cast<Scalar>(reduce_n);
          for (Index c = 0; c < channels; ++c) {
            Scalar sum_g = 0, sum_gx = 0;
            for (Index b = 0; b < batch; ++b) {
              const Index base = (b * channels + c) * inner;
              sum_g += y.grad().segment(base, inner).sum();
              sum_gx += (y.grad().segment(base, inner) * xhat->segment(base, inner)).sum();
            }
            if (gamma.requires_grad()) gamma.grad()[c] += sum_gx;
            if (beta.requires_grad()) beta.grad()[c] += sum_g;
            if (x.requires_grad()) {
              const Scalar k = gamma[c] * (*istd)[c];
              for (Index b = 0; b < batch; ++b) {
                const Index base = (b * channels + c) * inner;
                if (training) {
                  x.grad().segment(base, inner) +=
                      k * (y.grad().segment(base, inner) - sum_g * inv_n -
                           xhat->segment(base, inner) * (sum_gx * inv_n));
                } else {
                  x.grad().segment(base, inner) += k * y.grad().segment(base, inner);
                }
              }
            }
          }
        });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Losses and normalization
// ---------------------------------------------------------------------------

/// Row-wise softmax of a (B,K) value array (no gradient tracking).
template <typename Scalar>
typename Tensor<Scalar>::Storage softmax_rows(const Tensor<Scalar>& logits) {
  check(logits.rank() == 2, "softmax_rows: expected (B,K)");
  const Index batch = logits.dim(0), classes = logits.dim(1);
  typename Tensor<Scalar>::Storage p(logits.size());
  for (Index b = 0; b < batch; ++b) {
    auto row = logits.values().segment(b * classes, classes);
    const Scalar m = row.maxCoeff();
    p.segment(b * classes, classes) = (row - m).exp();
    p.segment(b * classes, classes) /= p.segment(b * classes, classes).sum();
  }
  return p;
}

/// Mean over the batch of -log softmax(logits)[label], stabilized by
/// max-subtraction. Gradient is (softmax - onehot)/B.
template <typename Scalar>
Tensor<Scalar> softmax_cross_entropy(const Tensor<Scalar>& logits, std::span<const int> labels) {
  check(logits.rank() == 2, "softmax_cross_entropy: logits must be (B,K), got ",
        to_string(logits.shape()));
  const Index batch = logits.dim(0), classes = logits.dim(1);
  check(static_cast<Index>(labels.size()) == batch, "softmax_cross_entropy: ", labels.size(),
        " labels for batch of ", batch);
  using Storage = typename Tensor<Scalar>::Storage;
  auto probs = std::make_shared<Storage>(softmax_rows(logits));
  Scalar loss = 0;
  for (Index b = 0; b < batch; ++b) {
    const int label = labels[static_cast<std::size_t>(b)];
    check(label >= 0 && label < classes, "softmax_cross_entropy: label ", label,
          " out of range [0,", classes, ")");
    loss -= std::log((*probs)[b * classes + label]);
  }
  loss /= static_cast<Scalar>(batch);
  Tensor<Scalar> y = Tensor<Scalar>::scalar(loss);
  if (track_grad(logits)) {
    y.set_requires_grad(true);
    auto labels_copy = std::make_shared<std::vector<int>>(labels.begin(), labels.end());
    Tape<Scalar>::active().record("softmax_cross_entropy",
                                  [logits, y, probs, labels_copy, batch, classes]() {
                                    if (!y.has_grad() || !logits.requires_grad()) return;
                                    const Scalar g = y.grad()[0] / static_cast<Scalar>(batch);
                                    auto& gx = logits.grad();
                                    for (Index b = 0; b < batch; ++b) {
                                      gx.segment(b * classes, classes) +=
                                          g * probs->segment(b * classes, classes);
                                      gx[b * classes + (*labels_copy)[static_cast<std::size_t>(b)]] -= g;
                                    }
                                  });
  }
  return y;
}

/// Scales each row of a (B,D) tensor to unit Euclidean norm.
template <typename Scalar>
Tensor<Scalar> l2_normalize_rows(const Tensor<Scalar>& x) {
  check(x.rank() == 2, "l2_normalize_rows: expected (B,D), got ", to_string(x.shape()));
  const Index batch = x.dim(0), dim = x.dim(1);
  using Storage = typename Tensor<Scalar>::Storage;
  Tensor<Scalar> y = Tensor<Scalar>::empty(x.shape());
  auto norms = std::make_shared<Storage>(batch);
  for (Index b = 0; b < batch; ++b) {
    const Scalar r = std::max(std::sqrt(x.values().segment(b * dim, dim).square().sum()),
                              static_cast<Scalar>(1e-12));
    (*norms)[b] = r;
    y.values().segment(b * dim, dim) = x.values().segment(b * dim, dim) / r;
  }
  if (track_grad(x)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record("l2_normalize_rows", [x, y, norms, batch, dim]() {
      if (!y.has_grad() || !x.requires_grad()) return;
      for (Index b = 0; b < batch; ++b) {
        auto g = y.grad().segment(b * dim, dim);
        auto yv = y.values().segment(b * dim, dim);
        const Scalar dot = (g * yv).sum();
        x.grad().segment(b * dim, dim) += (g - dot * yv) / (*norms)[b];
      }
    });
  }
  return y;
}

}  // namespace stecnn
