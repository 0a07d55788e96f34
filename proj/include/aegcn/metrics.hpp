#pragma once

// Nodule-level evaluation: confusion counts, the derived rates, and ROC AUC.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aegcn/error.hpp"
#include "json.hpp"

namespace aegcn {

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t positives() const { return tp + fn; }
  std::size_t negatives() const { return tn + fp; }
  std::size_t total() const { return tp + fp + tn + fn; }
  friend bool operator==(const ConfusionCounts&, const ConfusionCounts&) = default;
};

// A metric that may be undefined; `reason` says why when it is.
struct Metric {
  std::optional<double> value;
  std::string reason;

  static Metric of(double v) { return {v, {}}; }
  static Metric undefined(std::string why) { return {std::nullopt, std::move(why)}; }
  bool defined() const { return value.has_value(); }
};

struct MetricsReport {
  Metric auc = Metric::undefined("not computed");
  Metric acc, sen, spe, ppv, npv, f1;
};

namespace detail {
inline void check_binary(std::span<const int> labels, std::size_t n, const char* op) {
  if (labels.size() != n) {
    throw ValidationError(std::string(op) + ": " + std::to_string(labels.size()) + " labels for " +
                          std::to_string(n) + " scores");
  }
  for (int l : labels)
    if (l != 0 && l != 1) throw ValidationError(std::string(op) + ": labels must be 0 or 1");
}

inline Metric ratio(std::size_t num, std::size_t den, const char* why) {
  if (den == 0) return Metric::undefined(why);
  return Metric::of(static_cast<double>(num) / static_cast<double>(den));
}
}  // namespace detail

// Predicts 1 iff prob >= threshold.
inline ConfusionCounts confusion(std::span<const int> labels, std::span<const double> probs,
                                 double threshold = 0.5) {
  detail::check_binary(labels, probs.size(), "confusion");
  if (labels.empty()) throw ValidationError("confusion: empty input");
  ConfusionCounts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool pred = probs[i] >= threshold;
    if (labels[i] == 1) {
      pred ? ++c.tp : ++c.fn;
    } else {
      pred ? ++c.fp : ++c.tn;
    }
  }
  return c;
}

inline MetricsReport metric_suite(const ConfusionCounts& c) {
  MetricsReport r;
  r.acc = detail::ratio(c.tp + c.tn, c.total(), "no samples");
  r.sen = detail::ratio(c.tp, c.tp + c.fn, "no positive samples");
  r.spe = detail::ratio(c.tn, c.tn + c.fp, "no negative samples");
  r.ppv = detail::ratio(c.tp, c.tp + c.fp, "no positive predictions");
  r.npv = detail::ratio(c.tn, c.tn + c.fn, "no negative predictions");
  if (!r.ppv.defined() || !r.sen.defined()) {
    r.f1 = Metric::undefined(!r.ppv.defined() ? r.ppv.reason : r.sen.reason);
  } else if (*r.ppv.value + *r.sen.value == 0.0) {
    r.f1 = Metric::undefined("precision and sensitivity are both zero");
  } else {
    r.f1 = Metric::of(2.0 * *r.ppv.value * *r.sen.value / (*r.ppv.value + *r.sen.value));
  }
  return r;
}

// Mann-Whitney statistic from midranks: ties between a positive and a
// negative count one half.
inline Metric roc_auc(std::span<const int> labels, std::span<const double> scores) {
  detail::check_binary(labels, scores.size(), "roc_auc");
  const std::size_t n = scores.size();
  const auto pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) {
    return Metric::undefined("AUC needs both classes; got " + std::to_string(pos) + " positive and " +
                             std::to_string(neg) + " negative samples");
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels[order[k]] == 1) rank_sum += midrank;
    i = j + 1;
  }
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return Metric::of((rank_sum - p * (p + 1.0) / 2.0) / (p * q));
}

struct RocPoint {
  double threshold;
  double fpr;
  double tpr;
};

// Full threshold sweep from (0,0) to (1,1), one point per distinct score.
inline std::vector<RocPoint> roc_points(std::span<const int> labels, std::span<const double> scores) {
  detail::check_binary(labels, scores.size(), "roc_points");
  const auto pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
  const auto neg = static_cast<double>(labels.size()) - pos;
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  auto rate = [](double k, double total) { return total > 0 ? k / total : 0.0; };
  std::vector<RocPoint> out{{HUGE_VAL, 0.0, 0.0}};
  double tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    (labels[order[i]] == 1 ? tp : fp) += 1;
    if (i + 1 == order.size() || scores[order[i + 1]] != scores[order[i]]) {
      out.push_back({scores[order[i]], rate(fp, neg), rate(tp, pos)});
    }
  }
  return out;
}

// Trapezoidal area under a ROC sweep.
inline double trapezoid_area(const std::vector<RocPoint>& pts) {
  double area = 0.0;
  for (std::size_t i = 1; i < pts.size(); ++i)
    area += (pts[i].fpr - pts[i - 1].fpr) * (pts[i].tpr + pts[i - 1].tpr) / 2.0;
  return area;
}

inline double round4(double v) { return std::round(v * 1e4) / 1e4; }

// Defined values rounded to 4 decimals; undefined ones become null plus a
// "<name>_reason" string.
inline nlohmann::ordered_json to_json(const MetricsReport& r) {
  nlohmann::ordered_json j;
  auto put = [&](const char* name, const Metric& m) {
    if (m.defined()) {
      j[name] = round4(*m.value);
    } else {
      j[name] = nullptr;
      j[std::string(name) + "_reason"] = m.reason;
    }
  };
  put("auc", r.auc);
  put("acc", r.acc);
  put("sen", r.sen);
  put("spe", r.spe);
  put("ppv", r.ppv);
  put("npv", r.npv);
  put("f1", r.f1);
  return j;
}

inline nlohmann::ordered_json to_json(const ConfusionCounts& c) {
  return {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}

// Confusion-based metrics plus AUC for one set of nodule predictions.
inline MetricsReport evaluate_predictions(std::span<const int> labels, std::span<const double> probs,
                                          ConfusionCounts* counts = nullptr) {
  const auto c = confusion(labels, probs);
  if (counts) *counts = c;
  auto r = metric_suite(c);
  r.auc = roc_auc(labels, probs);
  return r;
}

}  // namespace aegcn
