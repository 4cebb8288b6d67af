#pragma once

#include "stecnn/checkpoint.hpp"
#include "stecnn/config.hpp"
#include "stecnn/contrastive.hpp"
#include "stecnn/metrics.hpp"
#include "stecnn/stats.hpp"

#include <json.hpp>

#include <cstdlib>
#include <iomanip>
#include <sstream>
#include <thread>

namespace stecnn {

using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Window-level standardization (per-fold statistics)
// ---------------------------------------------------------------------------

/// Feature-wise statistics over a set of windows (all positions pooled).
inline StandardizationStats window_stats(std::span<const WindowSample> samples,
                                         std::span<const Index> indices = {}) {
  check(!samples.empty(), "window_stats: no samples");
  const Index count =
      indices.empty() ? static_cast<Index>(samples.size()) : static_cast<Index>(indices.size());
  StandardizationStats stats;
  for (Index f = 0; f < kNumFeatures; ++f) {
    double sum = 0;
    for (Index i = 0; i < count; ++i) {
      const auto& s = samples[static_cast<std::size_t>(
          indices.empty() ? i : indices[static_cast<std::size_t>(i)])];
      sum += s.x.row(f).sum();
    }
    const double n = static_cast<double>(count * kWindowLength);
    stats.mean[f] = sum / n;
    double ss = 0;
    for (Index i = 0; i < count; ++i) {
      const auto& s = samples[static_cast<std::size_t>(
          indices.empty() ? i : indices[static_cast<std::size_t>(i)])];
      ss += (s.x.row(f).array() - stats.mean[f]).square().sum();
    }
    stats.stddev[f] = std::sqrt(ss / n);
  }
  return stats;
}

/// Applies feature-wise statistics to every window; rows with degenerate
/// deviation map to zero (warned once per call). Labels are untouched.
inline std::vector<WindowSample> standardize_windows(std::span<const WindowSample> samples,
                                                     const StandardizationStats& stats) {
  for (Index f = 0; f < kNumFeatures; ++f)
    if (stats.stddev[f] < 1e-12)
      warn("standardize: feature '", kFeatureNames[static_cast<std::size_t>(f)],
           "' is (near) constant; mapped to zeros");
  std::vector<WindowSample> out(samples.begin(), samples.end());
  for (auto& s : out) {
    for (Index f = 0; f < kNumFeatures; ++f) {
      if (stats.stddev[f] < 1e-12) {
        s.x.row(f).setZero();
      } else {
        s.x.row(f) = (s.x.row(f).array() - stats.mean[f]) / stats.stddev[f];
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Supervised training and evaluation
// ---------------------------------------------------------------------------

struct TrainOptions {
  Index batch_size = 1024;  // clamped to the training-set size
  int epochs = 100;
  double lr = 3e-4;
  std::uint64_t seed = 0;
};

/// Minimizes softmax cross-entropy with Adam over shuffled mini-batches.
/// Returns the per-epoch mean loss. Deterministic for a fixed seed.
template <typename Scalar>
std::vector<double> train_supervised(Model<Scalar>& model, std::span<const WindowSample> train,
                                     const TrainOptions& opt) {
  check(!train.empty(), "train_supervised: empty training set");
  check(opt.epochs >= 0 && opt.batch_size >= 1, "train_supervised: bad options");
  const Index n = static_cast<Index>(train.size());
  const Index batch = std::min(opt.batch_size, n);
  Adam<Scalar> adam(model.parameters(), {.lr = opt.lr});
  auto& tape = Tape<Scalar>::active();
  model.train();

  std::vector<double> epoch_losses;
  epoch_losses.reserve(static_cast<std::size_t>(opt.epochs));
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng rng(Rng::derive_seed(opt.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);
    double total_loss = 0;
    Index seen = 0;
    for (Index begin = 0; begin < n; begin += batch) {
      const Index size = std::min(batch, n - begin);
      std::span<const Index> ids(order.data() + begin, static_cast<std::size_t>(size));
      auto x = make_batch<Scalar>(train, ids);
      const auto labels = batch_labels(train, ids);
      tape.reset();
      adam.zero_grad();
      auto loss = softmax_cross_entropy(model.forward(x), labels);
      const double value = static_cast<double>(loss.value());
      if (!std::isfinite(value))
        fail_runtime("train_supervised: non-finite loss at epoch ", epoch, ", batch ",
                     begin / batch);
      backward(loss);
      adam.step();
      tape.reset();
      total_loss += value * static_cast<double>(size);
      seen += size;
    }
    epoch_losses.push_back(total_loss / static_cast<double>(seen));
  }
  return epoch_losses;
}

/// Scores a frozen model on a sample set and computes all metrics.
template <typename Scalar>
EvalReport evaluate(Model<Scalar>& model, std::span<const WindowSample> test,
                    const std::vector<int>& ks = {1, 3, 5}) {
  check(!test.empty(), "evaluate: empty test set");
  NoGrad no_grad;
  const bool was_training = model.training();
  model.eval();
  const Index n = static_cast<Index>(test.size());
  ScoreMatrix sm;
  sm.scores.resize(n, kNumClasses);
  sm.labels = batch_labels(test);
  const Index chunk = 1024;
  for (Index begin = 0; begin < n; begin += chunk) {
    const Index size = std::min(chunk, n - begin);
    std::vector<Index> ids(static_cast<std::size_t>(size));
    for (Index i = 0; i < size; ++i) ids[static_cast<std::size_t>(i)] = begin + i;
    auto logits = model.forward(make_batch<Scalar>(test, ids));
    const auto probs = softmax_rows(logits);
    for (Index b = 0; b < size; ++b)
      for (Index k = 0; k < kNumClasses; ++k)
        sm.scores(begin + b, k) = static_cast<double>(probs[b * kNumClasses + k]);
  }
  if (was_training) model.train();
  return eval_report(sm, argmax_predictions(sm.scores), ks);
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

struct CrossValReport {
  std::string model;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  std::vector<EvalReport> splits;
};

inline const std::vector<std::string>& crossval_metric_names() {
  static const std::vector<std::string> names = {"g_mean", "mauc", "mmcc",
                                                 "acc_0", "acc_1", "acc_3", "acc_5"};
  return names;
}

inline double metric_value(const EvalReport& report, const std::string& name) {
  if (name == "g_mean") return report.g_mean;
  if (name == "mauc") return report.mauc;
  if (name == "mmcc") return report.mmcc;
  if (name.rfind("acc_", 0) == 0) {
    const int k = std::stoi(name.substr(4));
    const auto it = report.acc.find(k);
    check(it != report.acc.end(), "metric_value: report lacks ", name);
    return it->second;
  }
  fail("metric_value: unknown metric '", name, "'");
}

inline std::vector<double> metric_column(const CrossValReport& report, const std::string& name) {
  std::vector<double> values;
  values.reserve(report.splits.size());
  for (const auto& split : report.splits) values.push_back(metric_value(split, name));
  return values;
}

inline int worker_threads() {
  if (const char* env = std::getenv("STECNN_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return 1;
}

/// Materializes the configured data source as raw (unstandardized) windows.
inline std::vector<WindowSample> load_windows(const RunConfig& cfg) {
  AltimetryTrack track;
  if (cfg.data.source == DataConfig::Source::Csv) {
    check(!cfg.data.path.empty(), "config: csv source requires a path");
    track = load_csv(cfg.data.path);
  } else {
    SyntheticConfig synth = cfg.data.synthetic;
    if (cfg.data.seed_from_run) synth.seed = Rng::derive_seed(cfg.seed, 0xDA7AULL);
    track = synthesize(synth);
  }
  if (cfg.data.global_standardization) track = standardize(track).first;
  return windowize(track);
}

/// Runs the full 5x2 cross-validation protocol: per split, standardize with
/// training-fold statistics (unless globally standardized upstream), build a
/// model from the split seed, optionally transplant a pre-trained trunk,
/// train, and evaluate on the held-out fold. Splits may run on parallel
/// workers (STECNN_THREADS); results are ordered and deterministic either way.
template <typename Scalar = float>
CrossValReport crossval(const RunConfig& cfg) {
  cfg.validate();
  const std::vector<WindowSample> samples = load_windows(cfg);
  const auto splits = kfold_5x2(static_cast<Index>(samples.size()), cfg.seed);

  std::map<std::string, Tensor<Scalar>> pretrained;
  if (!cfg.pretrain_checkpoint.empty())
    pretrained = load_checkpoint<Scalar>(cfg.pretrain_checkpoint).tensor_map();

  CrossValReport report;
  report.model = to_string(cfg.model.kind);
  report.seed = cfg.seed;
  report.config_hash = fnv1a_hash(config_fingerprint(cfg));
  report.splits.resize(splits.size());

  auto run_split = [&](std::size_t s) {
    const auto& split = splits[s];
    std::vector<WindowSample> train_set, test_set;
    {
      std::vector<WindowSample> train_raw, test_raw;
      for (Index i : split.train) train_raw.push_back(samples[static_cast<std::size_t>(i)]);
      for (Index i : split.test) test_raw.push_back(samples[static_cast<std::size_t>(i)]);
      if (cfg.data.global_standardization) {
        train_set = std::move(train_raw);
        test_set = std::move(test_raw);
      } else {
        const auto stats = window_stats(train_raw);
        train_set = standardize_windows(train_raw, stats);
        test_set = standardize_windows(test_raw, stats);
      }
    }
    const std::uint64_t split_seed = Rng::derive_seed(cfg.seed, 0x5B17 + s);
    auto model = build_model<Scalar>(cfg.model, split_seed);
    if (!pretrained.empty()) transfer(pretrained, *model);
    TrainOptions opt{cfg.batch_size, cfg.resolved_epochs(), cfg.lr,
                     Rng::derive_seed(split_seed, 0x7121ULL)};
    train_supervised(*model, train_set, opt);
    report.splits[s] = evaluate(*model, test_set, cfg.eval_ks);
  };

  const int threads = worker_threads();
  if (threads <= 1) {
    for (std::size_t s = 0; s < splits.size(); ++s) run_split(s);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&]() {
        for (std::size_t s = next.fetch_add(1); s < splits.size(); s = next.fetch_add(1))
          run_split(s);
      });
    for (auto& t : pool) t.join();
  }
  return report;
}

// ---------------------------------------------------------------------------
// Report serialization and model comparison
// ---------------------------------------------------------------------------

inline std::string format_mean_std(double mean, double std) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << mean << "±" << std;
  return os.str();
}

inline json to_json(const EvalReport& report) {
  json j;
  j["num_samples"] = report.num_samples;
  j["g_mean"] = report.g_mean;
  j["mauc"] = report.mauc;
  j["mmcc"] = report.mmcc;
  for (const auto& [k, v] : report.acc) j["acc_" + std::to_string(k)] = v;
  return j;
}

inline json to_json(const CrossValReport& report) {
  json j;
  j["model"] = report.model;
  j["seed"] = report.seed;
  j["config_hash"] = report.config_hash;
  j["splits"] = json::array();
  for (const auto& split : report.splits) j["splits"].push_back(to_json(split));
  json aggregate;
  for (const auto& name : crossval_metric_names()) {
    const auto values = metric_column(report, name);
    const auto [mean, std] = mean_std(values);
    json entry;
    entry["mean"] = mean;
    entry["std"] = std;
    entry["display"] = format_mean_std(mean, std);
    aggregate[name] = entry;
  }
  j["aggregate"] = aggregate;
  return j;
}

/// Parses the per-split metric columns back out of a serialized report.
inline std::map<std::string, std::vector<double>> report_metric_columns(const json& j) {
  std::map<std::string, std::vector<double>> columns;
  check(j.contains("splits") && j["splits"].is_array(), "report: missing splits array");
  for (const auto& split : j["splits"]) {
    for (const auto& [key, value] : split.items()) {
      if (key == "num_samples") continue;
      columns[key].push_back(value.get<double>());
    }
  }
  return columns;
}

struct MetricComparison {
  std::string metric;
  double mean_a = 0, mean_b = 0;
  MannWhitneyResult test;
};

/// Per-metric Mann-Whitney U over the per-split scores of two reports.
inline std::vector<MetricComparison> compare_reports(const json& a, const json& b) {
  const auto cols_a = report_metric_columns(a);
  const auto cols_b = report_metric_columns(b);
  std::vector<MetricComparison> out;
  for (const auto& [metric, values_a] : cols_a) {
    const auto it = cols_b.find(metric);
    if (it == cols_b.end()) continue;
    MetricComparison cmp;
    cmp.metric = metric;
    cmp.mean_a = mean_std(values_a).first;
    cmp.mean_b = mean_std(it->second).first;
    cmp.test = mann_whitney_u(values_a, it->second);
    out.push_back(cmp);
  }
  return out;
}

}  // namespace stecnn
