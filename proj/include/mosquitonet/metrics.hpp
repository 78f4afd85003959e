#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mosquitonet/tensor.hpp"

namespace mqnet {

/// Binary confusion counts; positive class = parasitized = 1.
struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  std::size_t fn = 0;

  std::size_t total() const noexcept { return tp + tn + fp + fn; }
  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline ConfusionMatrix confusion(std::span<const int> predictions, std::span<const int> truths) {
  if (predictions.size() != truths.size()) {
    throw ShapeError("confusion: " + std::to_string(predictions.size()) + " predictions vs " +
                     std::to_string(truths.size()) + " truths");
  }
  if (predictions.empty()) throw DomainError("confusion: no samples");
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const int p = predictions[i], t = truths[i];
    if ((p != 0 && p != 1) || (t != 0 && t != 1)) throw DomainError("confusion: class indices must be 0 or 1");
    if (p == 1 && t == 1) ++cm.tp;
    else if (p == 0 && t == 0) ++cm.tn;
    else if (p == 1) ++cm.fp;
    else ++cm.fn;
  }
  return cm;
}

struct MetricsReport {
  double accuracy = 0.0;
  double precision = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double f1 = 0.0;
  double mcc = 0.0;
  std::optional<double> auc;

  // Set when a zero denominator forced the value to 0.
  struct Undefined {
    bool precision = false;
    bool sensitivity = false;
    bool specificity = false;
    bool f1 = false;
    bool mcc = false;
  } undefined;
};

/// Everything except AUC from a confusion matrix. Zero denominators give 0
/// with the matching `undefined` flag set.
inline MetricsReport compute_metrics(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw DomainError("compute_metrics: empty confusion matrix");
  const double tp = static_cast<double>(cm.tp), tn = static_cast<double>(cm.tn);
  const double fp = static_cast<double>(cm.fp), fn = static_cast<double>(cm.fn);
  MetricsReport r;
  r.accuracy = (tp + tn) / static_cast<double>(cm.total());

  auto ratio = [](double num, double den, bool& undefined) {
    if (den == 0.0) {
      undefined = true;
      return 0.0;
    }
    return num / den;
  };
  r.precision = ratio(tp, tp + fp, r.undefined.precision);
  r.sensitivity = ratio(tp, fn + tp, r.undefined.sensitivity);
  r.specificity = ratio(tn, tn + fp, r.undefined.specificity);

  if (r.precision > 0.0 && r.sensitivity > 0.0) {
    r.f1 = 2.0 * (1.0 / (1.0 / r.precision + 1.0 / r.sensitivity));
  } else {
    r.f1 = 0.0;
    r.undefined.f1 = r.undefined.precision || r.undefined.sensitivity;
  }

  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (den == 0.0) {
    r.mcc = 0.0;
    r.undefined.mcc = true;
  } else {
    r.mcc = (tp * tn - fp * fn) / std::sqrt(den);
  }
  return r;
}

struct ScoredSample {
  double score = 0.0;  // probability of the positive class
  int truth = 0;
};

struct RocPoint {
  double fpr = 0.0;
  double tpr = 0.0;
};

struct RocCurve {
  std::vector<RocPoint> points;
  double auc = 0.0;
};

/// Threshold sweep over every distinct score (descending), trapezoidal area.
/// Tied scores move along a diagonal, which credits ties with one half.
inline RocCurve roc_auc(std::span<const ScoredSample> samples) {
  std::size_t pos = 0, neg = 0;
  for (const auto& s : samples) {
    if (!std::isfinite(s.score)) throw DomainError("roc_auc: non-finite score");
    if (s.truth == 1) ++pos;
    else if (s.truth == 0) ++neg;
    else throw DomainError("roc_auc: truth must be 0 or 1");
  }
  if (pos == 0 || neg == 0) throw DomainError("roc_auc: AUC undefined without both positive and negative samples");

  std::vector<std::size_t> order(samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return samples[a].score > samples[b].score; });

  RocCurve curve;
  curve.points.push_back({0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  double area2 = 0.0;  // twice the area in (fp, tp) count units
  for (std::size_t i = 0; i < order.size();) {
    const double threshold = samples[order[i]].score;
    const std::size_t tp0 = tp, fp0 = fp;
    for (; i < order.size() && samples[order[i]].score == threshold; ++i) {
      if (samples[order[i]].truth == 1) ++tp;
      else ++fp;
    }
    area2 += static_cast<double>(fp - fp0) * static_cast<double>(tp + tp0);
    curve.points.push_back({static_cast<double>(fp) / static_cast<double>(neg),
                            static_cast<double>(tp) / static_cast<double>(pos)});
  }
  curve.auc = area2 / (2.0 * static_cast<double>(pos) * static_cast<double>(neg));
  return curve;
}

/// Full report from hard predictions plus positive-class scores.
inline MetricsReport evaluate_predictions(std::span<const int> predictions, std::span<const int> truths,
                                          std::span<const double> scores) {
  MetricsReport r = compute_metrics(confusion(predictions, truths));
  if (scores.size() != truths.size()) throw ShapeError("evaluate_predictions: score count mismatch");
  std::vector<ScoredSample> scored(scores.size());
  bool has_pos = false, has_neg = false;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scored[i] = {scores[i], truths[i]};
    (truths[i] == 1 ? has_pos : has_neg) = true;
  }
  if (has_pos && has_neg) r.auc = roc_auc(scored).auc;
  return r;
}

// ---------------------------------------------------------------------------
// Rendering

inline constexpr const char* kSpecificityNote =
    "note: specificity = TN / (TN + FP); MCC and F1 of degenerate matrices are reported as 0";

namespace detail {
inline std::string fixed(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}
}  // namespace detail

/// Aligned table in the column order Accuracy, AUC, Sensitivity,
/// Specificity, F1-score, MCC, Precision.
inline std::string render_metrics_table(const std::vector<std::pair<std::string, MetricsReport>>& rows) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %9s %9s %11s %11s %9s %9s %9s\n", "Model", "Accuracy", "AUC",
                "Sensitivity", "Specificity", "F1-score", "MCC", "Precision");
  out += line;
  for (const auto& [name, r] : rows) {
    const std::string auc = r.auc ? detail::fixed(*r.auc) : "n/a";
    std::snprintf(line, sizeof line, "%-16s %9s %9s %11s %11s %9s %9s %9s\n", name.c_str(),
                  detail::fixed(r.accuracy).c_str(), auc.c_str(), detail::fixed(r.sensitivity).c_str(),
                  detail::fixed(r.specificity).c_str(), detail::fixed(r.f1).c_str(), detail::fixed(r.mcc).c_str(),
                  detail::fixed(r.precision).c_str());
    out += line;
  }
  out += kSpecificityNote;
  out += "\n";
  return out;
}

/// Machine-readable `key=value` lines; undefined metrics are listed.
inline std::string render_metrics_kv(const MetricsReport& r, const std::string& prefix = "") {
  std::string out;
  auto put = [&](const char* key, double v) { out += prefix + key + "=" + detail::fixed(v, 6) + "\n"; };
  put("accuracy", r.accuracy);
  if (r.auc) put("auc", *r.auc);
  else out += prefix + "auc=undefined\n";
  put("sensitivity", r.sensitivity);
  put("specificity", r.specificity);
  put("f1", r.f1);
  put("mcc", r.mcc);
  put("precision", r.precision);
  std::string undefined;
  auto flag = [&](bool f, const char* name) {
    if (f) undefined += (undefined.empty() ? "" : ",") + std::string(name);
  };
  flag(r.undefined.precision, "precision");
  flag(r.undefined.sensitivity, "sensitivity");
  flag(r.undefined.specificity, "specificity");
  flag(r.undefined.f1, "f1");
  flag(r.undefined.mcc, "mcc");
  if (!undefined.empty()) out += prefix + "undefined=" + undefined + "\n";
  return out;
}

}  // namespace mqnet
