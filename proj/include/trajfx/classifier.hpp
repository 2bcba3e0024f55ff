#pragma once

// Linear origin classifier l = W normalize(f) + b, trained with AdamW on
// softmax cross-entropy over class-balanced batches.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajfx/common.hpp"
#include "trajfx/error.hpp"
#include "trajfx/features.hpp"
#include "trajfx/metrics.hpp"
#include "trajfx/optim.hpp"
#include "trajfx/rng.hpp"

namespace trajfx {

enum class Origin : int { kMember = 0, kBelonging = 1, kExternal = 2 };

inline const char* origin_name(Origin o) {
  switch (o) {
    case Origin::kMember:
      return "member";
    case Origin::kBelonging:
      return "belonging";
    case Origin::kExternal:
      return "external";
  }
  return "?";
}

struct LinearClassifier {
  int num_classes = 0;
  int dim = 0;
  Vec W;  // num_classes x dim, row-major
  Vec b;
  NormStats norm;
  std::uint64_t spec_hash = 0;
  std::string task;
  TrainConfig cfg;
  std::vector<std::int64_t> class_counts;

  void validate() const {
    if (num_classes < 2 || dim < 1) throw ContractError("classifier has invalid shape");
    if (W.size() != static_cast<std::size_t>(num_classes) * dim || b.size() != static_cast<std::size_t>(num_classes))
      throw ContractError("classifier W/b sizes do not match its shape");
    if (norm.mean.size() != static_cast<std::size_t>(dim) || norm.std.size() != static_cast<std::size_t>(dim))
      throw ContractError("classifier normalization has wrong length");
    if (!all_finite(W) || !all_finite(b)) throw NumericError("non-finite classifier weights");
  }
};

/// Logits for an already-normalized feature vector.
inline Vec logits_normalized(const LinearClassifier& clf, std::span<const double> z) {
  Vec l(clf.b);
  for (int c = 0; c < clf.num_classes; ++c)
    l[c] += dot(std::span<const double>(clf.W).subspan(static_cast<std::size_t>(c) * clf.dim, clf.dim), z);
  return l;
}

inline Vec predict_logits(const LinearClassifier& clf, const TrajectoryFeatureVector& f) {
  if (f.spec_hash != clf.spec_hash)
    throw ContractError("feature spec_hash " + hex64(f.spec_hash) + " does not match classifier " +
                        hex64(clf.spec_hash));
  if (f.values.size() != static_cast<std::size_t>(clf.dim))
    throw ContractError("feature length does not match classifier");
  return logits_normalized(clf, normalize_values(clf.norm, f.values));
}

inline int predict_class(const LinearClassifier& clf, const TrajectoryFeatureVector& f) {
  return argmax(predict_logits(clf, f));
}

struct XentResult {
  double loss = 0.0;
  Vec grad;  // d loss / d logits
};

inline XentResult softmax_xent(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size())
    throw ParameterError("label outside logit range");
  const double m = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - m);
  XentResult r;
  r.loss = std::log(z) + m - logits[label];
  r.grad.resize(logits.size());
  for (std::size_t c = 0; c < logits.size(); ++c) r.grad[c] = std::exp(logits[c] - m) / z;
  r.grad[label] -= 1.0;
  return r;
}

struct ClassifierEpoch {
  int epoch = 0;
  double mean_loss = 0.0;
  double lr = 0.0;
};

struct ClassifierTrainResult {
  LinearClassifier clf;
  std::vector<ClassifierEpoch> history;
};

/// Order of training examples for one epoch: classes take turns, each
/// cycling through its own shuffled index list, for `n` draws in total.
inline std::vector<std::size_t> balanced_epoch_order(const std::vector<std::vector<std::size_t>>& by_class,
                                                     std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::vector<std::size_t>> perm(by_class.size());
  for (std::size_t c = 0; c < by_class.size(); ++c) {
    const auto p = CounterRng(seed, StreamDomain::kClassifier, 1 + static_cast<std::uint64_t>(epoch), c)
                       .permutation(by_class[c].size());
    for (std::size_t i : p) perm[c].push_back(by_class[c][i]);
  }
  std::vector<std::size_t> cursor(by_class.size(), 0);
  std::vector<std::size_t> order;
  order.reserve(n);
  for (std::size_t k = 0; order.size() < n; ++k) {
    const std::size_t c = k % by_class.size();
    order.push_back(perm[c][cursor[c]++ % perm[c].size()]);
  }
  return order;
}

/// Fits normalization on the training features, then minimizes mean
/// cross-entropy with AdamW and a step learning-rate schedule.
inline ClassifierTrainResult train_linear(std::span<const TrajectoryFeatureVector> features,
                                          std::span<const int> labels, int num_classes,
                                          const TrainConfig& cfg, std::string task = "") {
  cfg.validate();
  if (features.size() != labels.size()) throw ParameterError("features and labels differ in length");
  if (num_classes < 2) throw ContractError("classifier needs at least two classes");
  std::vector<std::vector<std::size_t>> by_class(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) throw ParameterError("label outside [0, num_classes)");
    by_class[labels[i]].push_back(i);
  }
  int present = 0;
  for (const auto& v : by_class) present += !v.empty();
  if (present < 2) throw ContractError("training data must contain at least two classes");
  std::erase_if(by_class, [](const auto& v) { return v.empty(); });

  ClassifierTrainResult res;
  LinearClassifier& clf = res.clf;
  clf.num_classes = num_classes;
  clf.norm = normalize_fit(features);
  clf.spec_hash = clf.norm.spec_hash;
  clf.dim = static_cast<int>(clf.norm.mean.size());
  clf.task = std::move(task);
  clf.cfg = cfg;
  clf.class_counts = class_counts(labels, num_classes);
  const std::size_t d = clf.dim;
  const std::size_t k = num_classes;

  std::vector<Vec> z(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) z[i] = normalize_values(clf.norm, features[i].values);

  // theta = [W ; b]
  Vec theta(k * d + k, 0.0);
  {
    CounterRng rng(cfg.seed, StreamDomain::kClassifier, 0);
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t j = 0; j < k * d; ++j) theta[j] = (2.0 * rng.uniform() - 1.0) * bound;
  }
  AdamWState opt(theta.size(), AdamWHyper{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  Vec grad(theta.size());
  const std::size_t n = features.size();
  const std::size_t batch = std::min<std::size_t>(cfg.batch_size, n);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    opt.hyper.lr = step_lr(cfg.lr, epoch, cfg.sched_step_epochs, cfg.sched_gamma);
    const auto order = balanced_epoch_order(by_class, n, cfg.seed, epoch);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += batch) {
      const std::size_t len = std::min(batch, n - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t q = 0; q < len; ++q) {
        const std::size_t i = order[start + q];
        Vec l(theta.begin() + k * d, theta.end());
        for (std::size_t c = 0; c < k; ++c)
          l[c] += dot(std::span<const double>(theta).subspan(c * d, d), z[i]);
        const XentResult xr = softmax_xent(l, labels[i]);
        epoch_loss += xr.loss;
        for (std::size_t c = 0; c < k; ++c) {
          const double g = xr.grad[c];
          double* row = grad.data() + c * d;
          for (std::size_t j = 0; j < d; ++j) row[j] += g * z[i][j];
          grad[k * d + c] += g;
        }
      }
      const double inv = 1.0 / static_cast<double>(len);
      for (double& g : grad) g *= inv;
      adamw_step(theta, grad, opt);
    }
    if (!std::isfinite(epoch_loss)) throw NumericError("non-finite classifier loss").at_epoch(epoch);
    res.history.push_back({epoch, epoch_loss / static_cast<double>(n), opt.hyper.lr});
  }
  clf.W.assign(theta.begin(), theta.begin() + k * d);
  clf.b.assign(theta.begin() + k * d, theta.end());
  clf.validate();
  return res;
}

/// Raw data coordinates wrapped as feature vectors, for the model-blind baseline.
inline std::vector<TrajectoryFeatureVector> raw_features(std::span<const Vec> xs,
                                                         std::span<const std::uint64_t> ids,
                                                         std::span<const int> labels) {
  if (xs.empty()) return {};
  const std::uint64_t h = fnv1a("raw:d" + std::to_string(xs.front().size()));
  std::vector<TrajectoryFeatureVector> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = {ids[i], labels[i], xs[i], h};
  return out;
}

/// The classifier recipe applied to raw data vectors (no model access).
inline ClassifierTrainResult model_blind_baseline(std::span<const Vec> xs, std::span<const std::uint64_t> ids,
                                                  std::span<const int> labels, int num_classes,
                                                  const TrainConfig& cfg, std::string task = "") {
  const auto fs = raw_features(xs, ids, labels);
  return train_linear(fs, labels, num_classes, cfg, std::move(task));
}

inline nlohmann::ordered_json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},         {"batch_size", c.batch_size},
          {"lr", c.lr},                 {"weight_decay", c.weight_decay},
          {"sched_step_epochs", c.sched_step_epochs}, {"sched_gamma", c.sched_gamma},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  static const char* kKeys[] = {"epochs", "batch_size", "lr", "weight_decay", "sched_step_epochs",
                                "sched_gamma", "seed"};
  for (const auto& [key, _] : j.items())
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys))
      throw ConfigError("unknown train config key '" + key + "'");
  try {
    if (j.contains("epochs")) base.epochs = j["epochs"].get<int>();
    if (j.contains("batch_size")) base.batch_size = j["batch_size"].get<int>();
    if (j.contains("lr")) base.lr = j["lr"].get<double>();
    if (j.contains("weight_decay")) base.weight_decay = j["weight_decay"].get<double>();
    if (j.contains("sched_step_epochs")) base.sched_step_epochs = j["sched_step_epochs"].get<int>();
    if (j.contains("sched_gamma")) base.sched_gamma = j["sched_gamma"].get<double>();
    if (j.contains("seed")) base.seed = j["seed"].get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad train config: ") + e.what());
  }
  return base;
}

inline nlohmann::ordered_json to_json(const LinearClassifier& clf) {
  nlohmann::ordered_json j;
  j["format"] = "trajfx-linear-classifier/1";
  j["task"] = clf.task;
  j["num_classes"] = clf.num_classes;
  j["dim"] = clf.dim;
  j["spec_hash"] = hex64(clf.spec_hash);
  j["W"] = clf.W;
  j["b"] = clf.b;
  j["norm_stats"] = {{"mean", clf.norm.mean}, {"std", clf.norm.std}};
  j["class_counts"] = clf.class_counts;
  j["config"] = to_json(clf.cfg);
  return j;
}

inline LinearClassifier classifier_from_json(const nlohmann::json& j) {
  LinearClassifier clf;
  try {
    if (j.at("format").get<std::string>() != "trajfx-linear-classifier/1")
      throw FormatError("unknown classifier format");
    clf.task = j.at("task").get<std::string>();
    clf.num_classes = j.at("num_classes").get<int>();
    clf.dim = j.at("dim").get<int>();
    clf.spec_hash = std::stoull(j.at("spec_hash").get<std::string>(), nullptr, 16);
    clf.W = j.at("W").get<Vec>();
    clf.b = j.at("b").get<Vec>();
    clf.norm.mean = j.at("norm_stats").at("mean").get<Vec>();
    clf.norm.std = j.at("norm_stats").at("std").get<Vec>();
    clf.norm.spec_hash = clf.spec_hash;
    clf.class_counts = j.at("class_counts").get<std::vector<std::int64_t>>();
    clf.cfg = train_config_from_json(j.at("config"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed classifier checkpoint: ") + e.what());
  } catch (const std::logic_error& e) {
    throw FormatError(std::string("malformed classifier checkpoint: ") + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(std::string("malformed classifier checkpoint: ") + e.what());
  }
  try {
    clf.validate();
  } catch (const Error& e) {
    throw FormatError(std::string("invalid classifier checkpoint: ") + e.what());
  }
  return clf;
}

}  // namespace trajfx
