#pragma once

#include "stecnn/common.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace stecnn {

/// Square count matrix with rows = true class, columns = predicted class.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int num_classes = 17)
      : k_(num_classes), counts_(Eigen::MatrixX<std::int64_t>::Zero(num_classes, num_classes)) {
    check(num_classes >= 1, "ConfusionMatrix: need at least one class");
  }

  static ConfusionMatrix from_predictions(std::span<const int> labels, std::span<const int> preds,
                                          int num_classes) {
    check(labels.size() == preds.size(), "ConfusionMatrix: ", labels.size(), " labels vs ",
          preds.size(), " predictions");
    ConfusionMatrix cm(num_classes);
    for (std::size_t i = 0; i < labels.size(); ++i) cm.add(labels[i], preds[i]);
    return cm;
  }

  void add(int truth, int predicted, std::int64_t count = 1) {
    check(truth >= 0 && truth < k_ && predicted >= 0 && predicted < k_,
          "ConfusionMatrix: class out of range");
    counts_(truth, predicted) += count;
  }

  int num_classes() const { return k_; }
  std::int64_t operator()(int truth, int predicted) const { return counts_(truth, predicted); }

  std::int64_t true_count(int c) const { return counts_.row(c).sum(); }   // samples of class c
  std::int64_t pred_count(int c) const { return counts_.col(c).sum(); }   // predicted as class c
  std::int64_t correct() const { return counts_.diagonal().sum(); }
  std::int64_t total() const { return counts_.sum(); }

  const Eigen::MatrixX<std::int64_t>& counts() const { return counts_; }

 private:
  int k_;
  Eigen::MatrixX<std::int64_t> counts_;
};

/// Geometric mean of per-class recall. Classes absent from the evaluated set
/// are excluded; any present class with zero recall pins the result to 0.
inline double g_mean(const ConfusionMatrix& cm) {
  check(cm.total() > 0, "g_mean: empty confusion matrix");
  double log_sum = 0.0;
  int present = 0;
  for (int c = 0; c < cm.num_classes(); ++c) {
    const std::int64_t support = cm.true_count(c);
    if (support == 0) continue;
    ++present;
    const double recall = static_cast<double>(cm(c, c)) / static_cast<double>(support);
    if (recall == 0.0) return 0.0;
    log_sum += std::log(recall);
  }
  check(present > 0, "g_mean: no class present");
  return std::exp(log_sum / present);
}

/// Multi-class Matthews correlation from confusion-matrix marginals:
///   (c*s - sum_k p_k t_k) / sqrt((s^2 - sum p_k^2)(s^2 - sum t_k^2))
/// with 0 returned on a degenerate (zero) denominator.
inline double mmcc(const ConfusionMatrix& cm) {
  const double s = static_cast<double>(cm.total());
  const double c = static_cast<double>(cm.correct());
  double sum_pt = 0.0, sum_p2 = 0.0, sum_t2 = 0.0;
  for (int k = 0; k < cm.num_classes(); ++k) {
    const double t_k = static_cast<double>(cm.pred_count(k));
    const double p_k = static_cast<double>(cm.true_count(k));
    sum_pt += p_k * t_k;
    sum_p2 += p_k * p_k;
    sum_t2 += t_k * t_k;
  }
  const double denom = std::sqrt((s * s - sum_p2) * (s * s - sum_t2));
  if (denom == 0.0 || !std::isfinite(denom)) return 0.0;
  return (c * s - sum_pt) / denom;
}

/// Per-sample class scores (rows sum to 1) with true labels.
struct ScoreMatrix {
  Eigen::MatrixXd scores;  // N x K
  std::vector<int> labels;

  int num_classes() const { return static_cast<int>(scores.cols()); }
  Index num_samples() const { return scores.rows(); }
};

/// Hand-and-Till symmetric one-vs-one AUC between classes i and j:
/// A(i,j) = (A(i|j) + A(j|i)) / 2, where A(i|j) ranks class-i scores of the
/// class-i samples against those of the class-j samples, ties credited 0.5.
/// Empty when either class has no samples.
inline std::optional<double> pairwise_auc(const ScoreMatrix& sm, int i, int j) {
  check(i >= 0 && i < sm.num_classes() && j >= 0 && j < sm.num_classes(),
        "pairwise_auc: class index out of range");
  check(i != j, "pairwise_auc: classes must differ");
  auto one_sided = [&](int pos, int neg, int score_col) -> std::optional<double> {
    std::vector<std::pair<double, bool>> pool;  // (score, is_positive)
    for (Index n = 0; n < sm.num_samples(); ++n) {
      const int y = sm.labels[static_cast<std::size_t>(n)];
      if (y == pos) pool.emplace_back(sm.scores(n, score_col), true);
      if (y == neg) pool.emplace_back(sm.scores(n, score_col), false);
    }
    std::size_t n_pos = 0;
    for (const auto& [s, p] : pool) n_pos += p ? 1 : 0;
    const std::size_t n_neg = pool.size() - n_pos;
    if (n_pos == 0 || n_neg == 0) return std::nullopt;
    std::sort(pool.begin(), pool.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    // Rank-sum with average ranks on ties.
    double rank_sum_pos = 0.0;
    std::size_t idx = 0;
    while (idx < pool.size()) {
      std::size_t end = idx;
      while (end < pool.size() && pool[end].first == pool[idx].first) ++end;
      const double avg_rank = 0.5 * static_cast<double>(idx + 1 + end);  // 1-based
      for (std::size_t q = idx; q < end; ++q)
        if (pool[q].second) rank_sum_pos += avg_rank;
      idx = end;
    }
    const double u = rank_sum_pos - static_cast<double>(n_pos) * (n_pos + 1) / 2.0;
    return u / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
  };
  const auto a_ij = one_sided(i, j, i);
  const auto a_ji = one_sided(j, i, j);
  if (!a_ij || !a_ji) return std::nullopt;
  return 0.5 * (*a_ij + *a_ji);
}

/// Mean pairwise AUC, 2/(C(C-1)) sum_{i<j} A(i,j), over class pairs present
/// in the sample; pairs with a missing class are skipped and the divisor
/// reduced accordingly.
inline double mauc(const ScoreMatrix& sm) {
  double total = 0.0;
  int pairs = 0;
  for (int i = 0; i < sm.num_classes(); ++i)
    for (int j = i + 1; j < sm.num_classes(); ++j) {
      const auto a = pairwise_auc(sm, i, j);
      if (a) {
        total += *a;
        ++pairs;
      }
    }
  check(pairs > 0, "mauc: fewer than 2 classes present");
  return total / pairs;
}

/// Accuracy with location tolerance k. Class 0 encodes absence: a nonzero
/// prediction is correct iff the true class is nonzero and within k
/// positions; class 0 is only correct against class 0.
inline double acc_k(std::span<const int> predictions, std::span<const int> labels, int k) {
  check(predictions.size() == labels.size(), "acc_k: ", predictions.size(), " predictions vs ",
        labels.size(), " labels");
  check(!labels.empty(), "acc_k: empty input");
  check(k >= 0, "acc_k: tolerance must be >= 0");
  std::size_t correct = 0;
  for (std::size_t n = 0; n < labels.size(); ++n) {
    const int y = labels[n], yhat = predictions[n];
    if (y == 0) {
      correct += (yhat == 0) ? 1 : 0;
    } else {
      correct += (yhat != 0 && std::abs(yhat - y) <= k) ? 1 : 0;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(labels.size());
}

/// All evaluation metrics computed on one sample set. acc.at(0) is exact
/// accuracy, kept for diagnostics.
struct EvalReport {
  double g_mean = 0.0;
  double mauc = 0.0;
  double mmcc = 0.0;
  std::map<int, double> acc;  // tolerance k -> accuracy
  ConfusionMatrix confusion{17};
  Index num_samples = 0;
};

inline EvalReport eval_report(const ScoreMatrix& sm, std::span<const int> predictions,
                              const std::vector<int>& ks = {1, 3, 5}) {
  check(sm.num_samples() > 0, "eval_report: empty input");
  check(static_cast<Index>(predictions.size()) == sm.num_samples(),
        "eval_report: prediction count mismatch");
  EvalReport report;
  report.num_samples = sm.num_samples();
  report.confusion =
      ConfusionMatrix::from_predictions(sm.labels, predictions, sm.num_classes());
  report.g_mean = g_mean(report.confusion);
  report.mauc = mauc(sm);
  report.mmcc = mmcc(report.confusion);
  report.acc[0] = acc_k(predictions, sm.labels, 0);
  for (int k : ks) report.acc[k] = acc_k(predictions, sm.labels, k);
  return report;
}

/// Argmax predictions with ties broken toward the smallest class index.
inline std::vector<int> argmax_predictions(const Eigen::MatrixXd& scores) {
  std::vector<int> preds(static_cast<std::size_t>(scores.rows()));
  for (Index n = 0; n < scores.rows(); ++n) {
    int best = 0;
    for (int k = 1; k < scores.cols(); ++k)
      if (scores(n, k) > scores(n, best)) best = k;
    preds[static_cast<std::size_t>(n)] = best;
  }
  return preds;
}

}  // namespace stecnn
