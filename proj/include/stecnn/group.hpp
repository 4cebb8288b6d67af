#pragma once

#include "stecnn/ops.hpp"

#include <cstdint>
#include <functional>
#include <numeric>

namespace stecnn {

// ---------------------------------------------------------------------------
// Scale-translation group structure
// ---------------------------------------------------------------------------

/// Exact rational with normalized sign and gcd-reduced terms; keeps the group
/// law verifiable without floating-point slack.
struct Rational {
  std::int64_t num = 0;
  std::int64_t den = 1;

  Rational() = default;
  Rational(std::int64_t n) : num(n), den(1) {}  // NOLINT: implicit by design
  Rational(std::int64_t n, std::int64_t d) : num(n), den(d) {
    check(den != 0, "Rational: zero denominator");
    normalize();
  }

  void normalize() {
    if (den < 0) {
      num = -num;
      den = -den;
    }
    const std::int64_t g = std::gcd(num < 0 ? -num : num, den);
    if (g > 1) {
      num /= g;
      den /= g;
    }
    if (num == 0) den = 1;
  }

  friend Rational operator+(Rational a, Rational b) {
    return Rational(a.num * b.den + b.num * a.den, a.den * b.den);
  }
  friend Rational operator-(Rational a) { return Rational(-a.num, a.den); }
  friend Rational operator*(Rational a, Rational b) { return Rational(a.num * b.num, a.den * b.den); }
  friend Rational operator/(Rational a, Rational b) {
    check(b.num != 0, "Rational: division by zero");
    return Rational(a.num * b.den, a.den * b.num);
  }
  friend bool operator==(Rational a, Rational b) { return a.num == b.num && a.den == b.den; }
  double to_double() const { return static_cast<double>(num) / static_cast<double>(den); }
};

/// One scale-translation element g = (x, s) with s > 0, composed as
/// g . g' = (s x' + x, s s') and inverted as g^-1 = (-x/s, 1/s).
struct GroupElement {
  Rational translation{0};
  Rational scale{1};

  static GroupElement identity() { return {Rational(0), Rational(1)}; }

  /// Lattice element: integer position x at dyadic scale 2^j.
  static GroupElement from_lattice(std::int64_t position, int scale_index) {
    check(scale_index >= 0, "GroupElement: scale index must be >= 0");
    return {Rational(position), Rational(std::int64_t(1) << scale_index)};
  }
};

inline GroupElement compose(const GroupElement& g, const GroupElement& h) {
  return {g.scale * h.translation + g.translation, g.scale * h.scale};
}

inline GroupElement inverse(const GroupElement& g) {
  check(g.scale.num != 0, "GroupElement: zero scale has no inverse");
  return {-(g.translation / g.scale), Rational(1) / g.scale};
}

inline bool operator==(const GroupElement& a, const GroupElement& b) {
  return a.translation == b.translation && a.scale == b.scale;
}

/// Dyadic scale levels {2^0, ..., 2^(S-1)}; factor(0) = 1 and the factors are
/// strictly increasing by construction.
struct ScaleGrid {
  int num_scales = 3;

  ScaleGrid() = default;
  explicit ScaleGrid(int s) : num_scales(s) { check(s >= 1, "ScaleGrid: need at least 1 scale"); }

  Index factor(int j) const {
    check(j >= 0 && j < num_scales, "ScaleGrid: scale index ", j, " outside [0,", num_scales, ")");
    return Index(1) << j;
  }
};

// ---------------------------------------------------------------------------
// Kernel dilation and the lifting / group convolution / projection layers
// ---------------------------------------------------------------------------

/// Dilates the last axis by 2^j: tap m moves to tap m*2^j, zeros in between,
/// so the coefficient sum is preserved. [..., K] -> [..., (K-1)*2^j + 1].
template <typename Scalar>
Tensor<Scalar> scale_kernel(const Tensor<Scalar>& base, int scale_index) {
  check(scale_index >= 0, "scale_kernel: scale index must be >= 0");
  check(base.rank() >= 1, "scale_kernel: need at least one axis");
  const Index taps = base.dim(base.rank() - 1);
  const Index dilation = Index(1) << scale_index;
  const Index out_taps = (taps - 1) * dilation + 1;
  Shape out_shape = base.shape();
  out_shape.back() = out_taps;
  const Index rows = base.size() / taps;
  Tensor<Scalar> out = Tensor<Scalar>::zeros(std::move(out_shape));
  for (Index r = 0; r < rows; ++r)
    for (Index m = 0; m < taps; ++m) out[r * out_taps + m * dilation] = base[r * taps + m];
  if (track_grad(base)) {
    out.set_requires_grad(true);
    Tape<Scalar>::active().record("scale_kernel", [base, out, rows, taps, dilation, out_taps]() {
      if (!out.has_grad() || !base.requires_grad()) return;
      for (Index r = 0; r < rows; ++r)
        for (Index m = 0; m < taps; ++m)
          base.grad()[r * taps + m] += out.grad()[r * out_taps + m * dilation];
    });
  }
  return out;
}

namespace detail {

inline void check_scale_support(Index taps, Index length, int top_scale) {
  const Index support = (taps - 1) * (Index(1) << top_scale) + 1;
  check(support <= length,
        "kernel support ", support, " at top scale ", top_scale, " exceeds signal length ", length);
}

}  // namespace detail

/// Lifts a base-space signal to the scale-translation domain: slice j of the
/// output equals conv1d(x, scale_kernel(base, j)). x:(B,Cin,L),
/// base:(Cout,Cin,K) -> (B,Cout,S,L).
template <typename Scalar>
Tensor<Scalar> lift(const Tensor<Scalar>& x, const Tensor<Scalar>& base, const ScaleGrid& grid,
                    Padding padding) {
  check(x.rank() == 3, "lift: input must be (B,Cin,L), got ", to_string(x.shape()));
  check(base.rank() == 3, "lift: kernel must be (Cout,Cin,K), got ", to_string(base.shape()));
  const Index batch = x.dim(0), channels = x.dim(1), length = x.dim(2);
  const Index out_channels = base.dim(0), taps = base.dim(2);
  check(base.dim(1) == channels, "lift: input has ", channels, " channels but kernel expects ",
        base.dim(1));
  detail::check_scale_support(taps, length, grid.num_scales - 1);

  const bool circular = padding == Padding::Circular;
  const int scales = grid.num_scales;
  Tensor<Scalar> y = Tensor<Scalar>::empty({batch, out_channels, scales, length});
  // One dilated convolution per scale, written directly into slice j. The
  // dilation stride stands in for the zero-inserted kernel.
  typename Tensor<Scalar>::Storage slice(batch * out_channels * length);
  for (int j = 0; j < scales; ++j) {
    detail::conv_forward(x.data(), batch, channels, length, base.data(), out_channels, taps,
                         grid.factor(j), circular, slice.data());
    for (Index b = 0; b < batch; ++b)
      for (Index o = 0; o < out_channels; ++o)
        y.values().segment(((b * out_channels + o) * scales + j) * length, length) =
            slice.segment((b * out_channels + o) * length, length);
  }

  if (track_grad(x, base)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record(
        "lift", [x, base, y, batch, channels, length, out_channels, taps, scales, circular,
                 grid]() {
          if (!y.has_grad()) return;
          typename Tensor<Scalar>::Storage gslice(batch * out_channels * length);
          for (int j = 0; j < scales; ++j) {
            for (Index b = 0; b < batch; ++b)
              for (Index o = 0; o < out_channels; ++o)
                gslice.segment((b * out_channels + o) * length, length) =
                    y.grad().segment(((b * out_channels + o) * scales + j) * length, length);
            detail::conv_backward(x.data(), base.data(), gslice.data(), batch, channels, length,
                                  out_channels, taps, grid.factor(j), circular,
                                  x.requires_grad() ? x.grad().data() : nullptr,
                                  base.requires_grad() ? base.grad().data() : nullptr);
          }
        });
  }
  return y;
}

/// Group convolution on the lifted domain with a kernel over (scale-offset,
/// translation):
///   out[b,o,j,u] = sum_{s': j+s' < S} sum_c
///                  conv1d(f[b,c,j+s',.], scale_kernel(w[o,c,s',.], j))[u]
/// Scale offsets falling beyond the top scale contribute zero.
/// f:(B,C,S,L), w:(O,C,Sk,K) -> (B,O,S,L).
template <typename Scalar>
Tensor<Scalar> group_conv(const Tensor<Scalar>& f, const Tensor<Scalar>& w, const ScaleGrid& grid,
                          Padding padding) {
  check(f.rank() == 4, "group_conv: input must be (B,C,S,L), got ", to_string(f.shape()));
  check(w.rank() == 4, "group_conv: kernel must be (O,C,Sk,K), got ", to_string(w.shape()));
  const Index batch = f.dim(0), channels = f.dim(1), scales = f.dim(2), length = f.dim(3);
  const Index out_channels = w.dim(0), scale_taps = w.dim(2), taps = w.dim(3);
  check(w.dim(1) == channels, "group_conv: input has ", channels, " channels but kernel expects ",
        w.dim(1));
  check(scales == grid.num_scales, "group_conv: feature map has ", scales,
        " scales but grid expects ", grid.num_scales);
  check(scale_taps <= scales, "group_conv: kernel spans ", scale_taps,
        " scale offsets but the grid has only ", scales);
  detail::check_scale_support(taps, length, grid.num_scales - 1);

  const bool circular = padding == Padding::Circular;
  Tensor<Scalar> y = Tensor<Scalar>::empty({batch, out_channels, scales, length});

  // Per output scale j the reduction is an ordinary multi-channel convolution
  // over CxSk' stacked input slices with the kernel dilated by 2^j.
  using Storage = typename Tensor<Scalar>::Storage;
  Storage xj, wj, yj(batch * out_channels * length);
  for (int j = 0; j < scales; ++j) {
    const Index valid = std::min<Index>(scale_taps, scales - j);
    xj.resize(batch * channels * valid * length);
    wj.resize(out_channels * channels * valid * taps);
    for (Index b = 0; b < batch; ++b)
      for (Index c = 0; c < channels; ++c)
        for (Index sp = 0; sp < valid; ++sp)
          xj.segment(((b * channels + c) * valid + sp) * length, length) =
              f.values().segment(((b * channels + c) * scales + (j + sp)) * length, length);
    for (Index o = 0; o < out_channels; ++o)
      for (Index c = 0; c < channels; ++c)
        for (Index sp = 0; sp < valid; ++sp)
          wj.segment(((o * channels + c) * valid + sp) * taps, taps) =
              w.values().segment(((o * channels + c) * scale_taps + sp) * taps, taps);
    detail::conv_forward(xj.data(), batch, channels * valid, length, wj.data(), out_channels, taps,
                         grid.factor(j), circular, yj.data());
    for (Index b = 0; b < batch; ++b)
      for (Index o = 0; o < out_channels; ++o)
        y.values().segment(((b * out_channels + o) * scales + j) * length, length) =
            yj.segment((b * out_channels + o) * length, length);
  }

  if (track_grad(f, w)) {
    y.set_requires_grad(true);
    Tape<Scalar>::active().record(
        "group_conv", [f, w, y, batch, channels, scales, length, out_channels, scale_taps, taps,
                       circular, grid]() {
          if (!y.has_grad()) return;
          using Storage = typename Tensor<Scalar>::Storage;
          Storage xj, wj, gyj(batch * out_channels * length), dxj, dwj;
          for (int j = 0; j < scales; ++j) {
            const Index valid = std::min<Index>(scale_taps, scales - j);
            xj.resize(batch * channels * valid * length);
            wj.resize(out_channels * channels * valid * taps);
            for (Index b = 0; b < batch; ++b)
              for (Index c = 0; c < channels; ++c)
                for (Index sp = 0; sp < valid; ++sp)
                  xj.segment(((b * channels + c) * valid + sp) * length, length) =
                      f.values().segment(((b * channels + c) * scales + (j + sp)) * length, length);
            for (Index o = 0; o < out_channels; ++o)
              for (Index c = 0; c < channels; ++c)
                for (Index sp = 0; sp < valid; ++sp)
                  wj.segment(((o * channels + c) * valid + sp) * taps, taps) =
                      w.values().segment(((o * channels + c) * scale_taps + sp) * taps, taps);
            for (Index b = 0; b < batch; ++b)
              for (Index o = 0; o < out_channels; ++o)
                gyj.segment((b * out_channels + o) * length, length) =
                    y.grad().segment(((b * out_channels + o) * scales + j) * length, length);
            dxj.setZero(xj.size());
            dwj.setZero(wj.size());
            detail::conv_backward(xj.data(), wj.data(), gyj.data(), batch, channels * valid, length,
                                  out_channels, taps, grid.factor(j), circular,
                                  f.requires_grad() ? dxj.data() : nullptr,
                                  w.requires_grad() ? dwj.data() : nullptr);
            if (f.requires_grad())
              for (Index b = 0; b < batch; ++b)
                for (Index c = 0; c < channels; ++c)
                  for (Index sp = 0; sp < valid; ++sp)
                    f.grad().segment(((b * channels + c) * scales + (j + sp)) * length, length) +=
                        dxj.segment(((b * channels + c) * valid + sp) * length, length);
            if (w.requires_grad())
              for (Index o = 0; o < out_channels; ++o)
                for (Index c = 0; c < channels; ++c)
                  for (Index sp = 0; sp < valid; ++sp)
                    w.grad().segment(((o * channels + c) * scale_taps + sp) * taps, taps) +=
                        dwj.segment(((o * channels + c) * valid + sp) * taps, taps);
          }
        });
  }
  return y;
}

enum class ProjectionMode { Max, Mean };

/// Reduces a (B,C,S,L) group feature map over the scale axis only, keeping
/// the translation axis for localization.
template <typename Scalar>
Tensor<Scalar> project(const Tensor<Scalar>& f, ProjectionMode mode) {
  check(f.rank() == 4, "project: input must be (B,C,S,L), got ", to_string(f.shape()));
  return mode == ProjectionMode::Max ? max_pool_axis(f, 2) : mean_pool_axis(f, 2);
}

// ---------------------------------------------------------------------------
// Equivariance checks
// ---------------------------------------------------------------------------

/// Circular shift along the last axis: y[..., u] = x[..., (u - t) mod L].
template <typename Scalar>
Tensor<Scalar> circular_shift_last(const Tensor<Scalar>& x, Index t) {
  const Index length = x.dim(x.rank() - 1);
  const Index rows = x.size() / length;
  Tensor<Scalar> y = Tensor<Scalar>::empty(x.shape());
  const Index shift = ((t % length) + length) % length;
  for (Index r = 0; r < rows; ++r)
    for (Index u = 0; u < length; ++u)
      y[r * length + u] = x[r * length + (u - shift + length) % length];
  return y;
}

/// Nearest-neighbor upsampling by 2 along the last axis: y[..., v] = x[..., v/2].
template <typename Scalar>
Tensor<Scalar> upsample2_last(const Tensor<Scalar>& x) {
  const Index length = x.dim(x.rank() - 1);
  const Index rows = x.size() / length;
  Shape out_shape = x.shape();
  out_shape.back() = 2 * length;
  Tensor<Scalar> y = Tensor<Scalar>::empty(std::move(out_shape));
  for (Index r = 0; r < rows; ++r)
    for (Index v = 0; v < 2 * length; ++v) y[r * 2 * length + v] = x[r * length + v / 2];
  return y;
}

enum class GroupTransform { Shift, DyadicScale };

/// Measures how far a layer is from commuting with a group action.
///
/// Shift: max_u |layer(shift_t x)[..., u] - layer(x)[..., (u - t) mod L]| over
/// all output entries (or only interior positions when `interior_support` > 0,
/// for zero-padded layers whose boundary taps differ by construction).
///
/// DyadicScale: the layer must map (B,C,L) to (B,C',S,L); compares
/// layer(upsample2 x)[b,c,j+1,2u] against layer(x)[b,c,j,u] over interior
/// scale indices j in [0, S-1).
template <typename Scalar>
double check_equivariance(const std::function<Tensor<Scalar>(const Tensor<Scalar>&)>& layer,
                          const Tensor<Scalar>& x, GroupTransform transform, Index shift_t = 1,
                          Index interior_support = 0) {
  NoGrad no_grad;
  if (transform == GroupTransform::Shift) {
    Tensor<Scalar> base = layer(x);
    Tensor<Scalar> shifted = layer(circular_shift_last(x, shift_t));
    Tensor<Scalar> expected = circular_shift_last(base, shift_t);
    const Index length = base.dim(base.rank() - 1);
    const Index rows = base.size() / length;
    const Index t = ((shift_t % length) + length) % length;
    double worst = 0;
    for (Index r = 0; r < rows; ++r)
      for (Index u = 0; u < length; ++u) {
        if (interior_support > 0 && (u < t || u > length - interior_support)) continue;
        worst = std::max(worst, std::abs(static_cast<double>(shifted[r * length + u]) -
                                         static_cast<double>(expected[r * length + u])));
      }
    return worst;
  }

  check(x.rank() == 3, "check_equivariance: dyadic scale transform expects (B,C,L) input");
  Tensor<Scalar> base = layer(x);
  check(base.rank() == 4, "check_equivariance: dyadic scale transform expects a lifted output");
  Tensor<Scalar> up = layer(upsample2_last(x));
  const Index batch = base.dim(0), channels = base.dim(1), scales = base.dim(2),
              length = base.dim(3);
  double worst = 0;
  for (Index b = 0; b < batch; ++b)
    for (Index c = 0; c < channels; ++c)
      for (Index j = 0; j + 1 < scales; ++j)
        for (Index u = 0; u < length; ++u) {
          const double got = up(b, c, j + 1, 2 * u);
          const double want = base(b, c, j, u);
          worst = std::max(worst, std::abs(got - want));
        }
  return worst;
}

}  // namespace stecnn
