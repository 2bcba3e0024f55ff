#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajfx/common.hpp"
#include "trajfx/error.hpp"

namespace trajfx {

/// Empirical ROC. Point k predicts positive for score >= thresholds[k];
/// point 0 is (0, 0) with threshold +inf. Counts are kept so areas are exact.
struct RocCurve {
  Vec fpr;
  Vec tpr;
  Vec thresholds;
  std::vector<std::int64_t> fp;
  std::vector<std::int64_t> tp;
  std::int64_t positives = 0;
  std::int64_t negatives = 0;
};

namespace detail {

inline void count_classes(std::span<const double> scores, std::span<const int> labels,
                          std::int64_t& pos, std::int64_t& neg) {
  if (scores.size() != labels.size()) throw ParameterError("scores and labels differ in length");
  pos = neg = 0;
  for (int y : labels) {
    if (y == 1) ++pos;
    else if (y == 0) ++neg;
    else throw ParameterError("binary labels must be 0 or 1");
  }
  if (pos == 0 || neg == 0) throw UndefinedMetricError("ROC metrics need both classes present");
  for (double s : scores)
    if (std::isnan(s)) throw ParameterError("NaN score");
}

inline std::vector<std::size_t> order_by_score_desc(std::span<const double> scores) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  return idx;
}

}  // namespace detail

inline RocCurve roc_curve(std::span<const double> scores, std::span<const int> labels) {
  RocCurve c;
  detail::count_classes(scores, labels, c.positives, c.negatives);
  const auto idx = detail::order_by_score_desc(scores);
  auto push = [&](std::int64_t fp, std::int64_t tp, double thr) {
    c.fp.push_back(fp);
    c.tp.push_back(tp);
    c.fpr.push_back(static_cast<double>(fp) / static_cast<double>(c.negatives));
    c.tpr.push_back(static_cast<double>(tp) / static_cast<double>(c.positives));
    c.thresholds.push_back(thr);
  };
  push(0, 0, std::numeric_limits<double>::infinity());
  std::int64_t fp = 0, tp = 0;
  for (std::size_t k = 0; k < idx.size();) {
    const double s = scores[idx[k]];
    while (k < idx.size() && scores[idx[k]] == s) {
      (labels[idx[k]] == 1 ? tp : fp) += 1;
      ++k;
    }
    push(fp, tp, s);
  }
  return c;
}

/// Trapezoidal area under a curve, computed from integer counts.
inline double auc_trapezoid(const RocCurve& c) {
  long double twice = 0;
  for (std::size_t k = 1; k < c.fp.size(); ++k)
    twice += static_cast<long double>(c.fp[k] - c.fp[k - 1]) * static_cast<long double>(c.tp[k] + c.tp[k - 1]);
  return static_cast<double>(twice / (2.0L * c.positives * c.negatives));
}

/// P(score_pos > score_neg) + 0.5 P(equal), via ranks.
inline double roc_auc(std::span<const double> scores, std::span<const int> labels) {
  std::int64_t pos = 0, neg = 0;
  detail::count_classes(scores, labels, pos, neg);
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  long double twice = 0;  // 2 * (concordant pairs) + tied pairs
  std::int64_t neg_below = 0;
  for (std::size_t k = 0; k < idx.size();) {
    const double s = scores[idx[k]];
    std::int64_t p_g = 0, n_g = 0;
    while (k < idx.size() && scores[idx[k]] == s) {
      (labels[idx[k]] == 1 ? p_g : n_g) += 1;
      ++k;
    }
    twice += 2.0L * p_g * neg_below + static_cast<long double>(p_g) * n_g;
    neg_below += n_g;
  }
  return static_cast<double>(twice / (2.0L * pos * neg));
}

/// Largest TPR over operating points whose FPR does not exceed `level`.
inline double tpr_at_fpr(const RocCurve& c, double level) {
  if (!(level >= 0.0 && level <= 1.0)) throw ParameterError("fpr level must be in [0, 1]");
  double best = 0.0;
  for (std::size_t k = 0; k < c.fpr.size(); ++k)
    if (c.fpr[k] <= level) best = std::max(best, c.tpr[k]);
  return best;
}

inline double tpr_at_fpr(std::span<const double> scores, std::span<const int> labels, double level) {
  return tpr_at_fpr(roc_curve(scores, labels), level);
}

using Confusion = std::vector<std::vector<std::int64_t>>;  // [true][predicted]

inline Confusion confusion_matrix(std::span<const int> predicted, std::span<const int> labels,
                                  int num_classes) {
  if (predicted.size() != labels.size()) throw ParameterError("predictions and labels differ in length");
  Confusion m(num_classes, std::vector<std::int64_t>(num_classes, 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes || predicted[i] < 0 || predicted[i] >= num_classes)
      throw ParameterError("class index out of range");
    ++m[labels[i]][predicted[i]];
  }
  return m;
}

/// Balanced accuracy: mean recall over the classes present in `labels`.
inline double asr(std::span<const int> predicted, std::span<const int> labels) {
  if (labels.empty()) throw ParameterError("asr needs at least one sample");
  if (predicted.size() != labels.size()) throw ParameterError("predictions and labels differ in length");
  const int k = 1 + *std::max_element(labels.begin(), labels.end());
  std::vector<std::int64_t> hit(k, 0), total(k, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0) throw ParameterError("negative class label");
    ++total[labels[i]];
    if (predicted[i] == labels[i]) ++hit[labels[i]];
  }
  double sum = 0.0;
  int present = 0;
  for (int c = 0; c < k; ++c)
    if (total[c] > 0) {
      sum += static_cast<double>(hit[c]) / static_cast<double>(total[c]);
      ++present;
    }
  return sum / present;
}

inline Vec softmax(std::span<const double> logits) {
  if (logits.empty()) return {};
  const double m = *std::max_element(logits.begin(), logits.end());
  Vec p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += p[i] = std::exp(logits[i] - m);
  for (double& v : p) v /= z;
  return p;
}

inline int argmax(std::span<const double> v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct AttackReport {
  std::string task;
  std::string method;
  double auc = 0.5;
  double tpr_at_1pct_fpr = 0.0;
  double asr = 0.5;
  Confusion confusion;
  std::vector<std::int64_t> n_per_class;
  nlohmann::ordered_json config = nlohmann::ordered_json::object();
};

inline nlohmann::ordered_json to_json(const AttackReport& r) {
  nlohmann::ordered_json j;
  j["task"] = r.task;
  j["method"] = r.method;
  j["auc"] = r.auc;
  j["tpr_at_1pct_fpr"] = r.tpr_at_1pct_fpr;
  j["asr"] = r.asr;
  j["confusion"] = r.confusion;
  j["n_per_class"] = r.n_per_class;
  j["config"] = r.config;
  return j;
}

inline std::vector<std::int64_t> class_counts(std::span<const int> labels, int num_classes) {
  std::vector<std::int64_t> n(num_classes, 0);
  for (int y : labels) ++n.at(y);
  return n;
}

/// Binary report; higher score means "positive" (label 1).
inline AttackReport binary_report(std::span<const double> scores, std::span<const int> predicted,
                                  std::span<const int> labels, std::string task, std::string method) {
  AttackReport r;
  r.task = std::move(task);
  r.method = std::move(method);
  const RocCurve c = roc_curve(scores, labels);
  r.auc = roc_auc(scores, labels);
  r.tpr_at_1pct_fpr = tpr_at_fpr(c, 0.01);
  r.asr = asr(predicted, labels);
  r.confusion = confusion_matrix(predicted, labels, 2);
  r.n_per_class = class_counts(labels, 2);
  return r;
}

inline void write_roc_csv(std::ostream& os, const RocCurve& c) {
  os << "fpr,tpr,threshold\n";
  for (std::size_t k = 0; k < c.fpr.size(); ++k)
    os << format_double(c.fpr[k]) << ',' << format_double(c.tpr[k]) << ',' << format_double(c.thresholds[k])
       << '\n';
}

struct OneVsRestReport {
  std::vector<RocCurve> curves;
  Vec per_class_auc;
  Vec per_class_tpr;
  AttackReport averaged;
};

/// Per class c: score = softmax probability of c against 1[label == c].
/// AUC and TPR@1%FPR are averaged over all classes; ASR uses argmax.
inline OneVsRestReport one_vs_rest_report(std::span<const Vec> logits, std::span<const int> labels,
                                          int num_classes, std::string task, std::string method) {
  if (logits.size() != labels.size()) throw ParameterError("logits and labels differ in length");
  const auto counts = class_counts(labels, num_classes);
  for (auto n : counts)
    if (n == 0) throw UndefinedMetricError("one-vs-rest needs every class present");
  std::vector<Vec> probs(logits.size());
  std::vector<int> pred(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i].size() != static_cast<std::size_t>(num_classes))
      throw ParameterError("logit row has wrong width");
    probs[i] = softmax(logits[i]);
    pred[i] = argmax(logits[i]);
  }
  OneVsRestReport out;
  for (int c = 0; c < num_classes; ++c) {
    Vec s(logits.size());
    std::vector<int> y(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      s[i] = probs[i][c];
      y[i] = labels[i] == c ? 1 : 0;
    }
    out.curves.push_back(roc_curve(s, y));
    out.per_class_auc.push_back(roc_auc(s, y));
    out.per_class_tpr.push_back(tpr_at_fpr(out.curves.back(), 0.01));
  }
  AttackReport& r = out.averaged;
  r.task = std::move(task);
  r.method = std::move(method);
  r.auc = std::accumulate(out.per_class_auc.begin(), out.per_class_auc.end(), 0.0) / num_classes;
  r.tpr_at_1pct_fpr = std::accumulate(out.per_class_tpr.begin(), out.per_class_tpr.end(), 0.0) / num_classes;
  r.asr = asr(pred, labels);
  r.confusion = confusion_matrix(pred, labels, num_classes);
  r.n_per_class = counts;
  return out;
}

struct SourceAccuracy {
  std::string name;
  bool belonging = false;  // ground truth for every sample of this source
  double accuracy = 0.0;
  std::size_t n = 0;
};

struct BalancedAccuracyReport {
  std::vector<SourceAccuracy> sources;
  double overall = 0.0;
};

/// Accuracy of a belonging/non-belonging decision for one source.
inline SourceAccuracy source_accuracy(std::string name, bool belonging, std::span<const int> predicted_belonging) {
  if (predicted_belonging.empty()) throw ParameterError("source has no predictions");
  std::size_t hit = 0;
  for (int p : predicted_belonging) hit += (p != 0) == belonging;
  return {std::move(name), belonging, static_cast<double>(hit) / predicted_belonging.size(),
          predicted_belonging.size()};
}

/// Overall = mean over the two ground-truth classes of the per-source mean
/// within that class, so each source counts equally inside its class. With
/// all sources in one class this is the plain mean.
inline BalancedAccuracyReport class_balanced_accuracy(std::span<const SourceAccuracy> sources) {
  if (sources.empty()) throw ParameterError("class_balanced_accuracy needs at least one source");
  double sum[2] = {0.0, 0.0};
  int n[2] = {0, 0};
  for (const auto& s : sources) {
    sum[s.belonging] += s.accuracy;
    ++n[s.belonging];
  }
  BalancedAccuracyReport r;
  r.sources.assign(sources.begin(), sources.end());
  double total = 0.0;
  int classes = 0;
  for (int c = 0; c < 2; ++c)
    if (n[c] > 0) {
      total += sum[c] / n[c];
      ++classes;
    }
  r.overall = total / classes;
  return r;
}

}  // namespace trajfx
