#pragma once

#include "stecnn/common.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <span>
#include <vector>

namespace stecnn {

struct MannWhitneyResult {
  double u = 0.0;       // U statistic of the first sample
  double p = 1.0;       // two-sided
  bool exact = false;   // enumeration (small n) vs normal approximation
  bool significant = false;  // p < 0.05
};

namespace detail {

inline double u_statistic(std::span<const double> a, std::span<const double> b) {
  double u = 0.0;
  for (double x : a)
    for (double y : b) {
      if (x > y) u += 1.0;
      else if (x == y) u += 0.5;
    }
  return u;
}

inline double normal_two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

}  // namespace detail

/// Exact two-sided p by full enumeration of the C(n, n_a) group assignments of
/// the pooled values: p = P(|U - mean| >= |u_observed - mean|).
inline MannWhitneyResult mann_whitney_exact(std::span<const double> a, std::span<const double> b) {
  check(!a.empty() && !b.empty(), "mann_whitney: empty sample");
  const std::size_t na = a.size(), nb = b.size(), n = na + nb;
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());

  const double u_obs = detail::u_statistic(a, b);
  const double mu = static_cast<double>(na) * static_cast<double>(nb) / 2.0;
  const double dev = std::abs(u_obs - mu);

  // Iterate subsets of size na in lexicographic order.
  std::vector<std::size_t> pick(na);
  for (std::size_t i = 0; i < na; ++i) pick[i] = i;
  std::uint64_t total = 0, extreme = 0;
  std::vector<double> ga(na), gb(nb);
  while (true) {
    std::size_t ai = 0, bi = 0;
    std::size_t next = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if (next < na && pick[next] == i) {
        ga[ai++] = pooled[i];
        ++next;
      } else {
        gb[bi++] = pooled[i];
      }
    }
    const double u = detail::u_statistic(ga, gb);
    ++total;
    if (std::abs(u - mu) >= dev - 1e-12) ++extreme;

    // next combination
    std::size_t k = na;
    while (k > 0 && pick[k - 1] == n - na + (k - 1)) --k;
    if (k == 0) break;
    ++pick[k - 1];
    for (std::size_t j = k; j < na; ++j) pick[j] = pick[j - 1] + 1;
  }

  MannWhitneyResult result;
  result.u = u_obs;
  result.p = static_cast<double>(extreme) / static_cast<double>(total);
  result.exact = true;
  result.significant = result.p < 0.05;
  return result;
}

/// Normal approximation with tie correction and a 0.5 continuity correction
/// toward the mean.
inline MannWhitneyResult mann_whitney_normal(std::span<const double> a, std::span<const double> b) {
  check(!a.empty() && !b.empty(), "mann_whitney: empty sample");
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double n = na + nb;
  const double u_obs = detail::u_statistic(a, b);
  const double mu = na * nb / 2.0;

  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  std::sort(pooled.begin(), pooled.end());
  double tie_term = 0.0;
  std::size_t i = 0;
  while (i < pooled.size()) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j] == pooled[i]) ++j;
    const double t = static_cast<double>(j - i);
    tie_term += t * t * t - t;
    i = j;
  }
  const double var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));

  MannWhitneyResult result;
  result.u = u_obs;
  if (var <= 0.0) {
    result.p = 1.0;
  } else {
    const double shift = std::min(std::abs(u_obs - mu), 0.5);
    const double z = (std::abs(u_obs - mu) - shift) / std::sqrt(var);
    result.p = detail::normal_two_sided_p(z);
  }
  result.exact = false;
  result.significant = result.p < 0.05;
  return result;
}

/// Rank-sum test with average ranks on ties; exact enumeration when the
/// pooled size is at most 12, normal approximation otherwise.
inline MannWhitneyResult mann_whitney_u(std::span<const double> a, std::span<const double> b) {
  check(!a.empty() && !b.empty(), "mann_whitney: empty sample");
  if (a.size() + b.size() <= 12) return mann_whitney_exact(a, b);
  return mann_whitney_normal(a, b);
}

/// Mean and sample standard deviation (n-1 denominator; 0 for n < 2).
inline std::pair<double, double> mean_std(std::span<const double> values) {
  check(!values.empty(), "mean_std: empty input");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  if (values.size() < 2) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size() - 1))};
}

}  // namespace stecnn
