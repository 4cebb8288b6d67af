#pragma once

#include "stecnn/common.hpp"
#include "stecnn/random.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace stecnn {

inline constexpr Index kNumFeatures = 6;
inline constexpr Index kWindowLength = 16;
inline constexpr int kNumClasses = 17;

inline const std::array<const char*, 6> kFeatureNames = {"sigma0", "mss",   "swh",
                                                         "sla",    "month", "wind"};

/// Along-track record: 6 feature rows (sigma0, mss, swh, sla, month, wind)
/// by N locations, plus a binary presence label per location.
struct AltimetryTrack {
  Eigen::Matrix<double, 6, Eigen::Dynamic> features;
  std::vector<int> labels;

  Index length() const { return features.cols(); }
};

struct StandardizationStats {
  Eigen::Vector<double, 6> mean;
  Eigen::Vector<double, 6> stddev;
};

/// One classified window: 6x16 features and a class in {0..16}, where 0 means
/// no event and k != 0 means an event at 1-based offset k.
struct WindowSample {
  Eigen::Matrix<double, 6, 16> x;
  int y = 0;
};

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace detail

inline const char* kCsvHeader = "sigma0,mss,swh,sla,month,wind,label";

/// Reads a track from CSV with the exact header
/// "sigma0,mss,swh,sla,month,wind,label", one row per along-track location.
inline AltimetryTrack load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail_runtime("load_csv: cannot open ", path);
  std::string line;
  if (!std::getline(in, line)) fail_runtime("load_csv: ", path, " is empty");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader)
    fail_runtime("load_csv: header mismatch in ", path, "; expected \"", kCsvHeader, "\", got \"",
                 line, "\"");

  std::vector<std::array<double, 6>> rows;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != 7)
      fail_runtime("load_csv: row ", line_no, " has ", cells.size(), " columns, expected 7");
    std::array<double, 6> row{};
    for (int c = 0; c < 6; ++c) {
      std::size_t consumed = 0;
      double v = 0;
      try {
        v = std::stod(cells[static_cast<std::size_t>(c)], &consumed);
      } catch (const std::exception&) {
        fail_runtime("load_csv: non-numeric ", kFeatureNames[static_cast<std::size_t>(c)],
                     " value at row ", line_no);
      }
      if (consumed != cells[static_cast<std::size_t>(c)].size() || !std::isfinite(v))
        fail_runtime("load_csv: bad ", kFeatureNames[static_cast<std::size_t>(c)],
                     " value at row ", line_no);
      row[static_cast<std::size_t>(c)] = v;
    }
    const std::string& lab = cells[6];
    if (lab != "0" && lab != "1")
      fail_runtime("load_csv: label must be 0 or 1 at row ", line_no, ", got \"", lab, "\"");
    rows.push_back(row);
    labels.push_back(lab == "1" ? 1 : 0);
  }
  if (static_cast<Index>(rows.size()) < kWindowLength)
    fail_runtime("load_csv: track has ", rows.size(), " locations, need at least ", kWindowLength);

  AltimetryTrack track;
  track.features.resize(6, static_cast<Index>(rows.size()));
  for (Index n = 0; n < track.features.cols(); ++n)
    for (Index f = 0; f < 6; ++f)
      track.features(f, n) = rows[static_cast<std::size_t>(n)][static_cast<std::size_t>(f)];
  track.labels = std::move(labels);
  return track;
}

inline void save_csv(const AltimetryTrack& track, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail_runtime("save_csv: cannot open ", path, " for writing");
  out << kCsvHeader << '\n';
  out.precision(17);
  for (Index n = 0; n < track.length(); ++n) {
    for (Index f = 0; f < 6; ++f) out << track.features(f, n) << ',';
    out << track.labels[static_cast<std::size_t>(n)] << '\n';
  }
  if (!out) fail_runtime("save_csv: write to ", path, " failed");
}

// ---------------------------------------------------------------------------
// Standardization and windowing
// ---------------------------------------------------------------------------

/// Feature-wise standardization x' = (x - mu) / sigma. When stats are given
/// (test folds) they are applied as-is; otherwise they are computed from the
/// data. Rows with sigma below 1e-12 map to zero with a warning.
inline std::pair<AltimetryTrack, StandardizationStats> standardize(
    const AltimetryTrack& track, const StandardizationStats* given = nullptr) {
  StandardizationStats stats;
  if (given != nullptr) {
    stats = *given;
  } else {
    for (Index f = 0; f < 6; ++f) {
      stats.mean[f] = track.features.row(f).mean();
      stats.stddev[f] =
          std::sqrt((track.features.row(f).array() - stats.mean[f]).square().mean());
    }
  }
  AltimetryTrack out;
  out.features.resize(6, track.length());
  out.labels = track.labels;
  for (Index f = 0; f < 6; ++f) {
    if (stats.stddev[f] < 1e-12) {
      warn("standardize: feature '", kFeatureNames[static_cast<std::size_t>(f)],
           "' is (near) constant; mapped to zeros");
      out.features.row(f).setZero();
    } else {
      out.features.row(f) = (track.features.row(f).array() - stats.mean[f]) / stats.stddev[f];
    }
  }
  return {std::move(out), stats};
}

/// Slices a track into floor(N/16) non-overlapping windows, dropping any
/// trailing remainder. A window's class is 0 when it holds no event and the
/// 1-based offset of its single event otherwise; two events in one window are
/// rejected.
inline std::vector<WindowSample> windowize(const AltimetryTrack& track) {
  check(track.length() >= kWindowLength, "windowize: track shorter than one window");
  check(static_cast<Index>(track.labels.size()) == track.length(),
        "windowize: label/feature length mismatch");
  const Index count = track.length() / kWindowLength;
  std::vector<WindowSample> samples(static_cast<std::size_t>(count));
  for (Index w = 0; w < count; ++w) {
    WindowSample& s = samples[static_cast<std::size_t>(w)];
    s.x = track.features.block(0, w * kWindowLength, 6, kWindowLength);
    s.y = 0;
    for (Index p = 0; p < kWindowLength; ++p) {
      if (track.labels[static_cast<std::size_t>(w * kWindowLength + p)] == 1) {
        if (s.y != 0)
          fail_runtime("windowize: window ", w, " holds more than one positive location");
        s.y = static_cast<int>(p) + 1;
      }
    }
  }
  return samples;
}

/// Row-major concatenation of the 6 feature rows into a 96-vector.
inline Eigen::VectorXd flatten(const WindowSample& sample) {
  Eigen::VectorXd v(kNumFeatures * kWindowLength);
  for (Index f = 0; f < kNumFeatures; ++f)
    for (Index p = 0; p < kWindowLength; ++p) v[f * kWindowLength + p] = sample.x(f, p);
  return v;
}

// ---------------------------------------------------------------------------
// Cross-validation splits
// ---------------------------------------------------------------------------

struct CrossValSplit {
  std::vector<Index> train;
  std::vector<Index> test;
};

/// 5x2-fold cross-validation: five independently seeded shuffles, each halved
/// into folds A/B used alternately for training and testing (ten splits).
inline std::vector<CrossValSplit> kfold_5x2(Index num_samples, std::uint64_t seed) {
  check(num_samples >= 2, "kfold_5x2: need at least 2 samples");
  std::vector<CrossValSplit> splits;
  splits.reserve(10);
  for (std::uint64_t rep = 0; rep < 5; ++rep) {
    std::vector<Index> order(static_cast<std::size_t>(num_samples));
    for (Index i = 0; i < num_samples; ++i) order[static_cast<std::size_t>(i)] = i;
    Rng rng(Rng::derive_seed(seed, rep));
    rng.shuffle(order);
    const Index half = (num_samples + 1) / 2;
    std::vector<Index> fold_a(order.begin(), order.begin() + half);
    std::vector<Index> fold_b(order.begin() + half, order.end());
    splits.push_back({fold_a, fold_b});  // train on A, test on B
    splits.push_back({fold_b, fold_a});  // train on B, test on A
  }
  return splits;
}

// ---------------------------------------------------------------------------
// Synthetic track generation
// ---------------------------------------------------------------------------

/// Generator settings for desk-scale experiments. Event signatures are
/// Gaussian-derivative bump/trough pairs injected into the four geophysical
/// rows over autocorrelated background noise.
struct SyntheticConfig {
  Index length = 32000;            // along-track locations (16 per window)
  double positive_fraction = 0.2155;
  double amp_min = 2.5;
  double amp_max = 5.0;
  double width_min = 0.8;
  double width_max = 1.6;
  int max_dyadic_exponent = 1;     // widths additionally scaled by 2^U{0..this}
  double width_multiplier = 1.0;   // global width factor (test-time perturbation knob)
  double noise_ar = 0.8;           // AR(1) coefficient of the background
  int month = 0;                   // 1..12 fixed, or 0 to draw once per track
  std::uint64_t seed = 0;
};

inline AltimetryTrack synthesize(const SyntheticConfig& cfg) {
  check(cfg.length >= kWindowLength, "synthesize: track length must be at least ", kWindowLength);
  check(cfg.positive_fraction > 0.0 && cfg.positive_fraction < 1.0,
        "synthesize: positive fraction must lie in (0,1)");
  check(cfg.amp_min > 0 && cfg.amp_max >= cfg.amp_min, "synthesize: bad amplitude range");
  check(cfg.width_min > 0 && cfg.width_max >= cfg.width_min, "synthesize: bad width range");
  check(cfg.max_dyadic_exponent >= 0, "synthesize: bad dyadic exponent");
  check(cfg.width_multiplier > 0, "synthesize: width multiplier must be positive");

  Rng rng(cfg.seed);
  const Index n = cfg.length;
  AltimetryTrack track;
  track.features.resize(6, n);
  track.labels.assign(static_cast<std::size_t>(n), 0);

  // Background: per-feature AR(1) with unit stationary variance.
  auto fill_ar1 = [&](Index row, double coeff) {
    const double innovation = std::sqrt(1.0 - coeff * coeff);
    double state = rng.normal();
    track.features(row, 0) = state;
    for (Index t = 1; t < n; ++t) {
      state = coeff * state + innovation * rng.normal();
      track.features(row, t) = state;
    }
  };
  for (Index f = 0; f < 4; ++f) fill_ar1(f, cfg.noise_ar);
  const int month = cfg.month > 0 ? cfg.month : 1 + static_cast<int>(rng.uniform_index(12));
  track.features.row(4).setConstant(static_cast<double>(month));
  fill_ar1(5, 0.95);  // wind: smoother noise

  // Event placement: at most one positive per 16-aligned window.
  const Index windows = n / kWindowLength;
  const Index n_pos = static_cast<Index>(std::llround(cfg.positive_fraction *
                                                      static_cast<double>(windows)));
  check(n_pos <= windows, "synthesize: infeasible placement density");
  std::vector<Index> window_ids(static_cast<std::size_t>(windows));
  for (Index w = 0; w < windows; ++w) window_ids[static_cast<std::size_t>(w)] = w;
  rng.shuffle(window_ids);

  for (Index i = 0; i < n_pos; ++i) {
    const Index w = window_ids[static_cast<std::size_t>(i)];
    const Index offset = rng.uniform_index(kWindowLength);
    const Index center = w * kWindowLength + offset;
    track.labels[static_cast<std::size_t>(center)] = 1;

    const double dyadic = static_cast<double>(
        Index(1) << rng.uniform_index(static_cast<Index>(cfg.max_dyadic_exponent) + 1));
    const double width = rng.uniform(cfg.width_min, cfg.width_max) * dyadic * cfg.width_multiplier;
    const Index reach = static_cast<Index>(std::ceil(4.0 * width));
    // Normalized first-derivative-of-Gaussian profile: |peak| = 1 at d = +-width.
    for (Index f = 0; f < 4; ++f) {
      const double amp = rng.uniform(cfg.amp_min, cfg.amp_max) * (rng.bernoulli(0.5) ? 1.0 : -1.0);
      for (Index d = -reach; d <= reach; ++d) {
        const Index t = center + d;
        if (t < 0 || t >= n) continue;
        const double z = static_cast<double>(d) / width;
        track.features(f, t) += amp * z * std::exp(0.5 - 0.5 * z * z);
      }
    }
  }
  return track;
}

}  // namespace stecnn
