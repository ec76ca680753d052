#pragma once

#include <algorithm>
#include <numeric>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dvad/error.hpp"

namespace dvad {

struct Confusion {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

inline Confusion confusion(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) {
    throw DimensionError(detail::concat("confusion: ", predictions.size(), " predictions vs ", labels.size(), " labels"));
  }
  if (labels.empty()) throw std::invalid_argument("confusion: empty input");
  Confusion c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = predictions[i] != 0, y = labels[i] != 0;
    if (p && y) ++c.tp;
    else if (p) ++c.fp;
    else if (y) ++c.fn;
    else ++c.tn;
  }
  return c;
}

/// 2TP / (2TP + FP + FN), 0 when nothing is predicted or present.
inline double f1_score(std::span<const int> predictions, std::span<const int> labels) {
  const auto c = confusion(predictions, labels);
  const std::size_t den = 2 * c.tp + c.fp + c.fn;
  return den == 0 ? 0.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(den);
}

inline std::vector<int> threshold_scores(std::span<const double> scores, double threshold) {
  std::vector<int> out(scores.size());
  for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] >= threshold ? 1 : 0;
  return out;
}

namespace detail {

inline std::pair<std::size_t, std::size_t> class_counts(std::span<const double> scores, std::span<const int> labels,
                                                        const char* who) {
  if (scores.size() != labels.size()) {
    throw DimensionError(concat(who, ": ", scores.size(), " scores vs ", labels.size(), " labels"));
  }
  const std::size_t pos = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](int y) { return y != 0; }));
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) throw std::invalid_argument(std::string(who) + ": both classes must be present");
  return {pos, neg};
}

}  // namespace detail

/// Mann-Whitney statistic with average ranks for ties, i.e.
/// P(s+ > s-) + P(s+ == s-) / 2.
inline double auc_score(std::span<const double> scores, std::span<const int> labels) {
  const auto [pos, neg] = detail::class_counts(scores, labels, "auc_score");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;  // over positives, 1-based ranks
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] != 0) rank_sum += avg_rank;
    i = j;
  }
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

struct RocPoint {
  double fpr, tpr;
};

/// ROC vertices from (0,0) to (1,1), one vertex per distinct score.
inline std::vector<RocPoint> roc_curve(std::span<const double> scores, std::span<const int> labels) {
  const auto [pos, neg] = detail::class_counts(scores, labels, "roc_curve");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::vector<RocPoint> pts{{0.0, 0.0}};
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    for (; j < order.size() && scores[order[j]] == scores[order[i]]; ++j) (labels[order[j]] != 0 ? tp : fp) += 1;
    pts.push_back({static_cast<double>(fp) / neg, static_cast<double>(tp) / pos});
    i = j;
  }
  return pts;
}

inline double trapezoid_auc(const std::vector<RocPoint>& roc) {
  double a = 0.0;
  for (std::size_t i = 1; i < roc.size(); ++i) a += (roc[i].fpr - roc[i - 1].fpr) * (roc[i].tpr + roc[i - 1].tpr) / 2.0;
  return a;
}

}  // namespace dvad
