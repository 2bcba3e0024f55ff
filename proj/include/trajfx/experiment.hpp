#pragma once

// End-to-end pipelines over one ExperimentConfig. Stages are memoized on the
// Experiment object, so later pipelines reuse data, checkpoints, samples and
// features produced by earlier ones.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "trajfx/checkpoint.hpp"
#include "trajfx/classifier.hpp"
#include "trajfx/common.hpp"
#include "trajfx/config.hpp"
#include "trajfx/data.hpp"
#include "trajfx/denoiser.hpp"
#include "trajfx/error.hpp"
#include "trajfx/features.hpp"
#include "trajfx/metrics.hpp"
#include "trajfx/sampler.hpp"
#include "trajfx/threshold.hpp"
#include "trajfx/trainer.hpp"

#ifndef TRAJFX_VERSION
#define TRAJFX_VERSION "unversioned"
#endif

namespace trajfx {

inline const char* version_string() { return TRAJFX_VERSION; }

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view tag) {
  return Fnv1a{}.update(hex64(base)).update(":").update(tag).digest();
}

/// Feature-vector label codes used in caches.
inline int split_label(std::string_view split) {
  if (split.starts_with("member")) return 0;
  if (split.starts_with("belonging")) return 1;
  if (split.starts_with("external")) return 2;
  if (split == "holdout") return 3;
  if (split == "foreign_ddim") return 4;
  if (split == "foreign_net") return 5;
  return -1;
}

inline const std::vector<std::string>& split_names() {
  static const std::vector<std::string> names = {"member_train",   "member_eval",     "holdout",
                                                 "external_train", "external_eval",   "belonging_train",
                                                 "belonging_eval", "foreign_ddim",    "foreign_net"};
  return names;
}

/// Features of every split under one (plan, spec).
struct FeatureSet {
  TimestepPlan plan;
  FeatureSpec spec;
  std::vector<int> steps;
  std::uint64_t hash = 0;
  std::map<std::string, std::vector<TrajectoryFeatureVector>> by_split;

  const std::vector<TrajectoryFeatureVector>& at(const std::string& split) const {
    const auto it = by_split.find(split);
    if (it == by_split.end()) throw PipelineError("no features for split '" + split + "'");
    return it->second;
  }
};

/// Output files keyed by relative path.
using Artifacts = std::map<std::string, std::string>;

class Experiment {
 public:
  explicit Experiment(ExperimentConfig cfg, unsigned workers = 1)
      : cfg_(std::move(cfg)), schedule_(cfg_.schedule()), workers_(workers) {
    cfg_.validate();
  }

  const ExperimentConfig& config() const noexcept { return cfg_; }
  const NoiseSchedule& schedule() const noexcept { return schedule_; }
  unsigned workers() const noexcept { return workers_; }

  DatasetBundle& data() {
    if (!data_) data_ = gen_data(cfg_.mixture, cfg_.counts, cfg_.seeds.data);
    return *data_;
  }
  void set_data(DatasetBundle b) {
    b.assert_disjoint();
    data_ = std::move(b);
    clear_features();
  }

  const DenoiserParams& net() {
    if (!net_) {
      const LabeledSet m = data().members();
      auto res = train_ddpm(m.xs, schedule_, cfg_.arch, cfg_.ddpm_cfg(), workers_);
      history_ = std::move(res.history);
      net_ = std::move(res.params);
    }
    return *net_;
  }
  void set_net(DenoiserParams p) {
    check_net(p);
    net_ = std::move(p);
    clear_features();
  }
  const std::vector<EpochRecord>& ddpm_history() const noexcept { return history_; }

  /// Independently trained second DDPM (different width and seed).
  const DenoiserParams& foreign_net() {
    if (!foreign_) {
      const LabeledSet m = data().members();
      auto res = train_ddpm(m.xs, schedule_, cfg_.foreign_arch, cfg_.foreign_cfg(), workers_);
      foreign_history_ = std::move(res.history);
      foreign_ = std::move(res.params);
    }
    return *foreign_;
  }
  void set_foreign_net(DenoiserParams p) {
    check_net(p);
    foreign_ = std::move(p);
  }
  const std::vector<EpochRecord>& foreign_history() const noexcept { return foreign_history_; }

  bool has_samples() {
    const DatasetBundle& b = data();
    return b.belonging_train.size() > 0 && b.foreign_ddim.size() > 0 && b.foreign_net.size() > 0;
  }

  /// Belonging sets from this run's checkpoint; foreign sets from DDIM on the
  /// same weights and from the second network.
  void ensure_samples() {
    if (has_samples()) return;
    const auto& c = cfg_.counts;
    const int dim = cfg_.mixture.dim;
    const std::size_t nb = c.belonging_train + c.belonging_eval;
    auto bel = sample_dataset(net(), schedule_, dim, nb, SamplerKind::ancestral(cfg_.sampler.variance),
                              cfg_.seeds.sampling, workers_);
    LabeledSet all = make_generated_set(std::move(bel), Split::kBelonging, "belonging");
    DatasetBundle& b = data();
    b.belonging_train = all.slice(0, c.belonging_train, "belonging_train");
    b.belonging_eval = all.slice(c.belonging_train, nb, "belonging_eval");
    b.foreign_ddim = make_generated_set(
        sample_dataset(net(), schedule_, dim, c.foreign, SamplerKind::ddim(cfg_.sampler.ddim_substeps),
                       derive_seed(cfg_.seeds.sampling, "foreign_ddim"), workers_),
        Split::kForeignDdim, "foreign_ddim");
    b.foreign_net = make_generated_set(
        sample_dataset(foreign_net(), schedule_, dim, c.foreign, SamplerKind::ancestral(cfg_.sampler.variance),
                       derive_seed(cfg_.seeds.sampling, "foreign_net"), workers_),
        Split::kForeignNet, "foreign_net");
    b.assert_disjoint();
    clear_features();
  }

  const LabeledSet& split(const std::string& name) {
    if (name.starts_with("belonging") || name.starts_with("foreign")) ensure_samples();
    DatasetBundle& b = data();
    if (name == "member_train") return b.member_train;
    if (name == "member_eval") return b.member_eval;
    if (name == "holdout") return b.holdout;
    if (name == "external_train") return b.external_train;
    if (name == "external_eval") return b.external_eval;
    if (name == "belonging_train") return b.belonging_train;
    if (name == "belonging_eval") return b.belonging_eval;
    if (name == "foreign_ddim") return b.foreign_ddim;
    if (name == "foreign_net") return b.foreign_net;
    throw PipelineError("unknown split '" + name + "'");
  }

  /// Extracts (plan, spec) features for every split.
  FeatureSet extract(const TimestepPlan& plan, const FeatureSpec& spec) {
    ensure_samples();
    FeatureSet fs;
    fs.plan = plan;
    fs.spec = spec;
    fs.steps = plan.resolve(schedule_.T);
    fs.hash = feature_spec_hash(plan, spec, schedule_, net());
    for (const std::string& name : split_names()) {
      const LabeledSet& s = split(name);
      std::vector<int> labels(s.size(), split_label(name));
      fs.by_split[name] = extract_all(net(), schedule_, s.xs, s.ids, labels, plan, spec, cfg_.seeds.features, workers_);
    }
    return fs;
  }

  /// Full plan with all three per-step families (drawn noise).
  const FeatureSet& base_features() {
    if (!base_) base_ = extract(TimestepPlan::full(), base_spec(false));
    return *base_;
  }
  void set_base_features(FeatureSet fs) { base_ = std::move(fs); }

  /// Full plan with all three per-step families in PIA mode.
  const FeatureSet& pia_features() {
    if (!pia_) pia_ = extract(TimestepPlan::full(), base_spec(true));
    return *pia_;
  }
  void set_pia_features(FeatureSet fs) { pia_ = std::move(fs); }

  FeatureSpec base_spec(bool pia) const {
    FeatureSpec s;
    s.pia_mode = pia;
    s.pia_norm_p = cfg_.features.pia_norm_p;
    s.repeats = cfg_.features.repeats;
    return s;
  }

  /// Features under (plan, spec), sliced from a cached full extraction when possible.
  FeatureSet features_for(const TimestepPlan& plan, const FeatureSpec& spec) {
    spec.validate();
    if (spec.gsa || spec.repeats != cfg_.features.repeats || spec.pia_norm_p != cfg_.features.pia_norm_p)
      return extract(plan, spec);
    const FeatureSet& full = spec.pia_mode ? pia_features() : base_features();
    FeatureSet fs;
    fs.plan = plan;
    fs.spec = spec;
    fs.steps = plan.resolve(schedule_.T);
    fs.hash = feature_spec_hash(plan, spec, schedule_, net());
    const auto cols = feature_columns(full.steps, full.spec, fs.steps, spec);
    for (const auto& [name, vs] : full.by_split) fs.by_split[name] = select_columns(vs, cols, fs.hash);
    return fs;
  }

  /// Features of the configured method.
  FeatureSet method_features() { return features_for(cfg_.plan, cfg_.features); }

 private:
  void check_net(const DenoiserParams& p) const {
    p.validate();
    if (p.data_dim != cfg_.mixture.dim) throw ConfigError("checkpoint data_dim does not match the config");
    if (p.num_steps != cfg_.T) throw ConfigError("checkpoint T does not match the config");
  }
  void clear_features() {
    base_.reset();
    pia_.reset();
  }

  ExperimentConfig cfg_;
  NoiseSchedule schedule_;
  unsigned workers_;
  std::optional<DatasetBundle> data_;
  std::optional<DenoiserParams> net_;
  std::optional<DenoiserParams> foreign_;
  std::vector<EpochRecord> history_;
  std::vector<EpochRecord> foreign_history_;
  std::optional<FeatureSet> base_;
  std::optional<FeatureSet> pia_;
};

// ---------------------------------------------------------------------------
// Shared helpers

namespace detail {

template <class T>
void append(std::vector<T>& dst, const std::vector<T>& src) {
  dst.insert(dst.end(), src.begin(), src.end());
}

/// Feature vectors and labels for a labeled union of splits.
struct LabeledFeatures {
  std::vector<TrajectoryFeatureVector> fs;
  std::vector<int> labels;

  void add(const std::vector<TrajectoryFeatureVector>& v, int label) {
    append(fs, v);
    labels.insert(labels.end(), v.size(), label);
  }
};

inline double median(Vec v) {
  if (v.empty()) return NAN;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Column k of every vector.
inline Vec column(const std::vector<TrajectoryFeatureVector>& fs, std::size_t k) {
  Vec out(fs.size());
  for (std::size_t i = 0; i < fs.size(); ++i) out[i] = fs[i].values.at(k);
  return out;
}

/// Per-step loss scalars (one row per sample) from a full-plan feature set.
inline std::vector<Vec> loss_rows(const FeatureSet& full, const std::string& split) {
  const std::size_t width = full.spec.per_step_families();
  std::vector<Vec> rows;
  for (const auto& f : full.at(split)) {
    Vec r(full.steps.size());
    for (std::size_t k = 0; k < r.size(); ++k) r[k] = f.values.at(k * width);
    rows.push_back(std::move(r));
  }
  return rows;
}

inline nlohmann::ordered_json method_echo(const FeatureSet& fs) {
  return {{"plan", fs.plan.describe()}, {"features", fs.spec.describe()}, {"spec_hash", hex64(fs.hash)}};
}

}  // namespace detail

/// Trains on (pos_train, neg_train) and reports on (pos_eval, neg_eval);
/// label 1 is the positive class and the score is logit_1 - logit_0.
struct BinaryRun {
  LinearClassifier clf;
  AttackReport report;
  RocCurve roc;
};

inline BinaryRun train_eval_binary(const std::vector<TrajectoryFeatureVector>& pos_train,
                                   const std::vector<TrajectoryFeatureVector>& neg_train,
                                   const std::vector<TrajectoryFeatureVector>& pos_eval,
                                   const std::vector<TrajectoryFeatureVector>& neg_eval, const TrainConfig& cfg,
                                   const std::string& task, const std::string& method) {
  detail::LabeledFeatures tr, ev;
  tr.add(pos_train, 1);
  tr.add(neg_train, 0);
  ev.add(pos_eval, 1);
  ev.add(neg_eval, 0);
  BinaryRun run;
  run.clf = train_linear(tr.fs, tr.labels, 2, cfg, task).clf;
  Vec scores;
  std::vector<int> pred;
  for (const auto& f : ev.fs) {
    const Vec l = predict_logits(run.clf, f);
    scores.push_back(l[1] - l[0]);
    pred.push_back(argmax(l));
  }
  run.report = binary_report(scores, pred, ev.labels, task, method);
  run.roc = roc_curve(scores, ev.labels);
  return run;
}

/// Single-step threshold attack on drawn-noise (or PIA) per-step losses, calibrated on
/// member_train vs external_train over every step.
inline ThresholdAttack calibrate_loss_threshold(Experiment& exp, bool pia) {
  const FeatureSet& full = pia ? exp.pia_features() : exp.base_features();
  return calibrate_threshold_attack(detail::loss_rows(full, "member_train"), detail::loss_rows(full, "external_train"),
                                    full.steps, pia);
}

/// Eval-split report of a threshold attack: score -L_{t*}, decision 1[L_{t*} < tau].
inline BinaryRun threshold_eval(Experiment& exp, const ThresholdAttack& atk, const std::string& method) {
  const FeatureSet& full = atk.uses_pia ? exp.pia_features() : exp.base_features();
  BinaryRun run;
  Vec scores;
  std::vector<int> pred, labels;
  for (const auto& [split, label] : {std::pair{"member_eval", 1}, std::pair{"external_eval", 0}})
    for (const Vec& row : detail::loss_rows(full, split)) {
      scores.push_back(-row.at(atk.t_star));
      pred.push_back(threshold_decide(atk, full.steps, row));
      labels.push_back(label);
    }
  run.report = binary_report(scores, pred, labels, "mia", method);
  run.report.config = to_json(atk);
  run.roc = roc_curve(scores, labels);
  return run;
}

// ---------------------------------------------------------------------------
// MIA

inline nlohmann::ordered_json run_mia(Experiment& exp, Artifacts& out) {
  const TrainConfig cfg = exp.config().clf_cfg();
  nlohmann::ordered_json methods = nlohmann::ordered_json::array();
  auto add = [&](BinaryRun run, const nlohmann::ordered_json& echo) {
    if (!echo.is_null()) run.report.config = echo;
    std::ostringstream roc;
    write_roc_csv(roc, run.roc);
    out["roc_mia_" + run.report.method + ".csv"] = roc.str();
    methods.push_back(to_json(run.report));
    return run.report;
  };
  auto mia = [&](const FeatureSet& fs, const std::string& method) {
    return add(train_eval_binary(fs.at("member_train"), fs.at("external_train"), fs.at("member_eval"),
                                 fs.at("external_eval"), cfg, "mia", method),
               detail::method_echo(fs));
  };

  const FeatureSet ours = exp.method_features();
  const AttackReport full_rep = mia(ours, "trajectory");
  FeatureSpec loss_spec = exp.config().features;
  loss_spec.use_grad_x = loss_spec.use_grad_theta = false;
  loss_spec.use_loss = true;
  loss_spec.gsa.reset();
  const AttackReport loss_rep = mia(exp.features_for(exp.config().plan, loss_spec), "trajectory_loss");

  const ThresholdAttack atk = calibrate_loss_threshold(exp, false);
  const AttackReport thr_rep = add(threshold_eval(exp, atk, "threshold"), nullptr);
  const ThresholdAttack pia = calibrate_loss_threshold(exp, true);
  add(threshold_eval(exp, pia, "pia"), nullptr);

  for (GsaMode mode : {GsaMode::kGsa1, GsaMode::kGsa2}) {
    FeatureSpec g;
    g.use_loss = g.use_grad_x = g.use_grad_theta = false;
    g.gsa = GsaConfig{mode, {}, {}};
    mia(exp.features_for(TimestepPlan::full(), g), mode == GsaMode::kGsa1 ? "gsa1" : "gsa2");
  }

  {
    const DatasetBundle& b = exp.data();
    std::vector<Vec> xs;
    std::vector<std::uint64_t> ids;
    std::vector<int> labels;
    auto put = [&](const LabeledSet& s, int y) {
      detail::append(xs, s.xs);
      detail::append(ids, s.ids);
      labels.insert(labels.end(), s.size(), y);
    };
    put(b.member_train, 1);
    put(b.external_train, 0);
    const auto raw_tr = raw_features(xs, ids, labels);
    xs.clear(), ids.clear(), labels.clear();
    put(b.member_eval, 1);
    put(b.external_eval, 0);
    const auto raw_ev = raw_features(xs, ids, labels);
    std::vector<TrajectoryFeatureVector> ptr, ntr, pev, nev;
    for (const auto& f : raw_tr) (f.label == 1 ? ptr : ntr).push_back(f);
    for (const auto& f : raw_ev) (f.label == 1 ? pev : nev).push_back(f);
    add(train_eval_binary(ptr, ntr, pev, nev, cfg, "mia", "model_blind"), {{"features", "raw data"}});
  }

  // Step chosen by evaluation AUC of -L_t. This peeks at evaluation labels, so
  // it is a diagnostic only; the threshold row is the calibrated comparison.
  const FeatureSet& base = exp.base_features();
  const auto mem = detail::loss_rows(base, "member_eval");
  const auto ext = detail::loss_rows(base, "external_eval");
  int best_t = 0;
  double best_auc = -1.0;
  for (std::size_t k = 0; k < base.steps.size(); ++k) {
    Vec s;
    std::vector<int> y;
    for (const Vec& r : mem) s.push_back(-r[k]), y.push_back(1);
    for (const Vec& r : ext) s.push_back(-r[k]), y.push_back(0);
    const double auc = roc_auc(s, y);
    if (auc > best_auc) best_auc = auc, best_t = base.steps[k];
  }

  nlohmann::ordered_json j;
  j["methods"] = methods;
  j["trajectory_loss_minus_threshold_auc"] = loss_rep.auc - thr_rep.auc;
  j["eval_selected_single_step"] = {{"t", best_t}, {"auc", best_auc}};
  j["gradient_features_auc_gain"] = full_rep.auc - loss_rep.auc;

  std::string csv = "method,auc,tpr_at_1pct_fpr,asr\n";
  for (const auto& m : methods)
    csv += m["method"].get<std::string>() + ',' + format_double(m["auc"].get<double>()) + ',' +
           format_double(m["tpr_at_1pct_fpr"].get<double>()) + ',' + format_double(m["asr"].get<double>()) + '\n';
  out["mia.csv"] = csv;
  return j;
}

// ---------------------------------------------------------------------------
// Threshold attack on belonging data and per-step loss curves

struct LossCurves {
  std::vector<int> steps;
  std::map<std::string, Vec> mean;  // group -> per-step mean
  std::map<std::string, Vec> se;    // group -> per-step standard error
};

/// Mean and standard error of L_t (averaged over `repeats` draws per sample)
/// for members, belonging, external and holdout samples.
inline LossCurves loss_curves(Experiment& exp) {
  FeatureSpec spec = FeatureSpec::loss_only();
  spec.repeats = exp.config().loss_curve_repeats;
  const FeatureSet fs = exp.extract(TimestepPlan::full(), spec);
  const std::map<std::string, std::vector<std::string>> groups = {
      {"member", {"member_train", "member_eval"}},
      {"belonging", {"belonging_train", "belonging_eval"}},
      {"external", {"external_train", "external_eval"}},
      {"holdout", {"holdout"}}};
  LossCurves lc;
  lc.steps = fs.steps;
  for (const auto& [g, splits] : groups) {
    std::vector<TrajectoryFeatureVector> all;
    for (const auto& s : splits) detail::append(all, fs.at(s));
    const double n = static_cast<double>(all.size());
    Vec m(fs.steps.size(), 0.0), se(fs.steps.size(), 0.0);
    for (std::size_t k = 0; k < fs.steps.size(); ++k) {
      double sum = 0.0;
      for (const auto& f : all) sum += f.values[k];
      m[k] = sum / n;
      double ss = 0.0;
      for (const auto& f : all) ss += (f.values[k] - m[k]) * (f.values[k] - m[k]);
      se[k] = n > 1 ? std::sqrt(ss / (n - 1) / n) : 0.0;
    }
    lc.mean[g] = std::move(m);
    lc.se[g] = std::move(se);
  }
  return lc;
}

/// Longest contiguous run of steps where belonging < member < external with
/// both gaps above `z` standard errors of the difference.
struct OrderingRun {
  int start = -1;
  int length = 0;
  double fraction = 0.0;
  int steps_ok = 0;
};

inline OrderingRun ordering_run(const LossCurves& lc, double z = 2.0) {
  OrderingRun best;
  int run = 0;
  const Vec& m = lc.mean.at("member");
  const Vec& b = lc.mean.at("belonging");
  const Vec& e = lc.mean.at("external");
  const Vec& sm = lc.se.at("member");
  const Vec& sb = lc.se.at("belonging");
  const Vec& se = lc.se.at("external");
  for (std::size_t k = 0; k < lc.steps.size(); ++k) {
    const bool ok = (m[k] - b[k]) > z * std::hypot(sm[k], sb[k]) && (e[k] - m[k]) > z * std::hypot(se[k], sm[k]);
    best.steps_ok += ok;
    run = ok ? run + 1 : 0;
    if (run > best.length) {
      best.length = run;
      best.start = lc.steps[k + 1 - run];
    }
  }
  best.fraction = static_cast<double>(best.length) / static_cast<double>(lc.steps.size());
  return best;
}

inline nlohmann::ordered_json run_threshold_on_belonging(Experiment& exp, Artifacts& out) {
  const ThresholdAttack atk = calibrate_loss_threshold(exp, false);
  const FeatureSet& base = exp.base_features();
  auto rate = [&](const std::string& split) {
    const auto rows = detail::loss_rows(base, split);
    std::size_t hit = 0;
    for (const Vec& r : rows) hit += threshold_decide(atk, base.steps, r);
    return static_cast<double>(hit) / static_cast<double>(rows.size());
  };
  const LossCurves lc = loss_curves(exp);
  const OrderingRun ord = ordering_run(lc);

  std::string csv = "t";
  const std::vector<std::string> groups = {"member", "belonging", "external", "holdout"};
  for (const auto& g : groups) csv += "," + g + "_mean," + g + "_se";
  csv += '\n';
  for (std::size_t k = 0; k < lc.steps.size(); ++k) {
    csv += std::to_string(lc.steps[k]);
    for (const auto& g : groups) csv += ',' + format_double(lc.mean.at(g)[k]) + ',' + format_double(lc.se.at(g)[k]);
    csv += '\n';
  }
  out["losses_per_t.csv"] = csv;

  nlohmann::ordered_json j;
  j["attack"] = to_json(atk);
  j["tpr_member_eval"] = rate("member_eval");
  j["fpr_external_eval"] = rate("external_eval");
  j["fpr_belonging_eval"] = rate("belonging_eval");
  j["fpr_gap"] = j["fpr_belonging_eval"].get<double>() - j["fpr_external_eval"].get<double>();
  j["loss_ordering"] = {{"rule", "belonging < member < external, gaps > 2 SE"},
                        {"longest_run_start", ord.start},
                        {"longest_run_length", ord.length},
                        {"longest_run_fraction", ord.fraction},
                        {"steps_satisfying", ord.steps_ok},
                        {"repeats_per_sample", exp.config().loss_curve_repeats}};
  return j;
}

// ---------------------------------------------------------------------------
// Model attribution

inline nlohmann::ordered_json run_ma(Experiment& exp, Artifacts& out) {
  const TrainConfig cfg = exp.config().clf_cfg();
  const FeatureSet fs = exp.method_features();
  std::vector<TrajectoryFeatureVector> real_train = fs.at("member_train");
  detail::append(real_train, fs.at("external_train"));
  std::vector<TrajectoryFeatureVector> real_eval = fs.at("member_eval");
  detail::append(real_eval, fs.at("external_eval"));
  const DatasetBundle& b = exp.data();

  struct Source {
    std::string name;
    std::string split;
    bool belonging;
  };
  const std::vector<Source> sources = {
      {"own_ddpm", "belonging_eval", true}, {"same_net_ddim", "foreign_ddim", false}, {"second_net", "foreign_net", false}};

  auto evaluate = [&](auto&& predict, auto&& feats_of) {
    std::vector<SourceAccuracy> accs;
    for (const auto& s : sources) {
      std::vector<int> p;
      for (const auto& f : feats_of(s.split)) p.push_back(predict(f));
      accs.push_back(source_accuracy(s.name, s.belonging, p));
    }
    std::vector<int> p;
    for (const auto& f : feats_of("real_eval")) p.push_back(predict(f));
    return std::pair{class_balanced_accuracy(accs), source_accuracy("real_eval", false, p)};
  };
  auto report_json = [](const std::pair<BalancedAccuracyReport, SourceAccuracy>& r) {
    nlohmann::ordered_json per = nlohmann::ordered_json::array();
    for (const auto& s : r.first.sources)
      per.push_back({{"source", s.name}, {"belonging", s.belonging}, {"accuracy", s.accuracy}, {"n", s.n}});
    return nlohmann::ordered_json{{"per_source", per},
                                  {"overall", r.first.overall},
                                  {"real_eval_accuracy", r.second.accuracy}};
  };

  const LinearClassifier clf = train_linear(
      [&] {
        auto v = fs.at("belonging_train");
        detail::append(v, real_train);
        return v;
      }(),
      [&] {
        std::vector<int> y(fs.at("belonging_train").size(), 1);
        y.insert(y.end(), real_train.size(), 0);
        return y;
      }(),
      2, cfg, "ma").clf;
  const auto ours = evaluate([&](const TrajectoryFeatureVector& f) { return predict_class(clf, f); },
                             [&](const std::string& split) -> const std::vector<TrajectoryFeatureVector>& {
                               return split == "real_eval" ? real_eval : fs.at(split);
                             });

  // Model-blind: the same recipe on raw coordinates.
  std::map<std::string, std::vector<TrajectoryFeatureVector>> raw;
  auto raw_of = [&](const std::vector<const LabeledSet*>& sets) {
    std::vector<Vec> xs;
    std::vector<std::uint64_t> ids;
    for (const LabeledSet* s : sets) detail::append(xs, s->xs), detail::append(ids, s->ids);
    return raw_features(xs, ids, std::vector<int>(xs.size(), -1));
  };
  raw["belonging_train"] = raw_of({&b.belonging_train});
  raw["real_train"] = raw_of({&b.member_train, &b.external_train});
  raw["belonging_eval"] = raw_of({&b.belonging_eval});
  raw["foreign_ddim"] = raw_of({&b.foreign_ddim});
  raw["foreign_net"] = raw_of({&b.foreign_net});
  raw["real_eval"] = raw_of({&b.member_eval, &b.external_eval});
  std::vector<TrajectoryFeatureVector> raw_tr = raw["belonging_train"];
  detail::append(raw_tr, raw["real_train"]);
  std::vector<int> raw_y(raw["belonging_train"].size(), 1);
  raw_y.insert(raw_y.end(), raw["real_train"].size(), 0);
  const LinearClassifier blind = train_linear(raw_tr, raw_y, 2, cfg, "ma").clf;
  const auto blind_rep = evaluate([&](const TrajectoryFeatureVector& f) { return predict_class(blind, f); },
                                  [&](const std::string& split) -> const std::vector<TrajectoryFeatureVector>& {
                                    return raw.at(split);
                                  });

  out["classifier_ma.json"] = to_json(clf).dump(2) + "\n";
  std::string csv = "method,source,belonging,accuracy\n";
  for (const auto& [name, rep] : {std::pair{std::string("trajectory"), &ours}, std::pair{std::string("model_blind"), &blind_rep}}) {
    for (const auto& s : rep->first.sources)
      csv += name + ',' + s.name + ',' + (s.belonging ? "1" : "0") + ',' + format_double(s.accuracy) + '\n';
    csv += name + ",overall,," + format_double(rep->first.overall) + '\n';
  }
  out["ma.csv"] = csv;

  nlohmann::ordered_json j;
  j["trajectory"] = report_json(ours);
  j["trajectory"]["config"] = detail::method_echo(fs);
  j["model_blind"] = report_json(blind_rep);
  return j;
}

// ---------------------------------------------------------------------------
// Origin attribution and the extraction filter

struct FilterReport {
  std::vector<std::uint64_t> flagged_ids;
  Vec flagged_distances;
  Vec unflagged_distances;
  double flagged_median = NAN;
  double unflagged_median = NAN;
};

/// Flags belonging samples the OA classifier labels Member and records each
/// sample's nearest-neighbour distance to the reference members.
inline FilterReport filter_suspicious(const LinearClassifier& clf,
                                      const std::vector<TrajectoryFeatureVector>& belonging_feats,
                                      const LabeledSet& belonging, const LabeledSet& reference) {
  if (reference.size() == 0) throw ContractError("filter needs a nonempty member reference set");
  if (belonging_feats.size() != belonging.size()) throw ContractError("belonging features and samples differ");
  FilterReport r;
  for (std::size_t i = 0; i < belonging.size(); ++i) {
    if (belonging_feats[i].sample_id != belonging.ids[i]) throw ContractError("belonging features out of order");
    const double d = nearest_distance(belonging.xs[i], reference.xs);
    if (predict_class(clf, belonging_feats[i]) == static_cast<int>(Origin::kMember)) {
      r.flagged_ids.push_back(belonging.ids[i]);
      r.flagged_distances.push_back(d);
    } else {
      r.unflagged_distances.push_back(d);
    }
  }
  r.flagged_median = detail::median(r.flagged_distances);
  r.unflagged_median = detail::median(r.unflagged_distances);
  return r;
}

inline nlohmann::ordered_json histogram_json(const Vec& values, double hi, int bins) {
  std::vector<std::int64_t> counts(bins, 0);
  for (double v : values) {
    const int b = hi > 0 ? std::min(bins - 1, static_cast<int>(v / hi * bins)) : 0;
    ++counts[b];
  }
  return counts;
}

inline nlohmann::ordered_json to_json(const FilterReport& r) {
  double hi = 0.0;
  for (double v : r.flagged_distances) hi = std::max(hi, v);
  for (double v : r.unflagged_distances) hi = std::max(hi, v);
  nlohmann::ordered_json j;
  j["flagged"] = r.flagged_ids.size();
  j["unflagged"] = r.unflagged_distances.size();
  j["flagged_median_nn_distance"] = std::isnan(r.flagged_median) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(r.flagged_median);
  j["unflagged_median_nn_distance"] =
      std::isnan(r.unflagged_median) ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(r.unflagged_median);
  j["histogram_upper_edge"] = hi;
  j["flagged_histogram"] = histogram_json(r.flagged_distances, hi, 20);
  j["unflagged_histogram"] = histogram_json(r.unflagged_distances, hi, 20);
  return j;
}

/// Uniform noise in place of features, for a chance-level control.
inline std::vector<TrajectoryFeatureVector> uniform_features(const std::vector<TrajectoryFeatureVector>& like,
                                                             std::uint64_t seed) {
  std::vector<TrajectoryFeatureVector> out = like;
  for (auto& f : out) {
    CounterRng rng(seed, StreamDomain::kControl, f.sample_id);
    for (double& v : f.values) v = rng.uniform();
    f.spec_hash = fnv1a("uniform-control");
  }
  return out;
}

inline nlohmann::ordered_json run_oa(Experiment& exp, Artifacts& out) {
  const TrainConfig cfg = exp.config().clf_cfg();
  const FeatureSet fs = exp.method_features();
  const std::vector<std::pair<std::string, Origin>> classes = {
      {"member", Origin::kMember}, {"belonging", Origin::kBelonging}, {"external", Origin::kExternal}};

  auto gather = [&](const std::string& suffix, auto&& transform) {
    detail::LabeledFeatures lf;
    for (const auto& [name, o] : classes) lf.add(transform(fs.at(name + suffix)), static_cast<int>(o));
    return lf;
  };
  auto identity = [](const std::vector<TrajectoryFeatureVector>& v) { return v; };
  const auto tr = gather("_train", identity);
  const auto ev = gather("_eval", identity);
  const LinearClassifier clf = train_linear(tr.fs, tr.labels, 3, cfg, "oa").clf;
  std::vector<Vec> logits;
  for (const auto& f : ev.fs) logits.push_back(predict_logits(clf, f));
  OneVsRestReport ovr = one_vs_rest_report(logits, ev.labels, 3, "oa", "trajectory");
  ovr.averaged.config = detail::method_echo(fs);
  for (std::size_t c = 0; c < classes.size(); ++c) {
    std::ostringstream roc;
    write_roc_csv(roc, ovr.curves[c]);
    out["roc_oa_" + classes[c].first + ".csv"] = roc.str();
  }
  out["classifier_oa.json"] = to_json(clf).dump(2) + "\n";

  const std::uint64_t control_seed = derive_seed(exp.config().seeds.classifier, "uniform-control");
  auto uniform = [&](const std::vector<TrajectoryFeatureVector>& v) { return uniform_features(v, control_seed); };
  const auto utr = gather("_train", uniform);
  const auto uev = gather("_eval", uniform);
  const LinearClassifier uclf = train_linear(utr.fs, utr.labels, 3, cfg, "oa").clf;
  std::vector<int> upred;
  for (const auto& f : uev.fs) upred.push_back(predict_class(uclf, f));
  const double uniform_asr = asr(upred, uev.labels);

  const FilterReport filt =
      filter_suspicious(clf, fs.at("belonging_eval"), exp.split("belonging_eval"), exp.split("member_eval"));

  nlohmann::ordered_json j;
  j["report"] = to_json(ovr.averaged);
  nlohmann::ordered_json per = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < classes.size(); ++c)
    per.push_back({{"class", classes[c].first}, {"auc", ovr.per_class_auc[c]}, {"tpr_at_1pct_fpr", ovr.per_class_tpr[c]}});
  j["per_class"] = per;
  j["uniform_feature_control_asr"] = uniform_asr;
  j["filter"] = to_json(filt);
  return j;
}

// ---------------------------------------------------------------------------
// Class probe

namespace detail {

/// Random labels with the same marginals as `y` whose empirical joint with
/// `y` factorises: within each true class, new labels appear in proportion to
/// their overall frequency (largest-remainder rounding).
inline std::vector<int> stratified_relabel(const std::vector<int>& y, int k, std::uint64_t seed) {
  std::vector<std::size_t> total(k, 0);
  for (int v : y) total.at(v) += 1;
  std::vector<int> out(y.size());
  for (int c = 0; c < k; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == c) idx.push_back(i);
    if (idx.empty()) continue;
    std::vector<std::size_t> quota(k);
    std::vector<std::pair<double, int>> rem;
    std::size_t used = 0;
    for (int l = 0; l < k; ++l) {
      const double exact = static_cast<double>(idx.size()) * static_cast<double>(total[l]) / static_cast<double>(y.size());
      quota[l] = static_cast<std::size_t>(exact);
      used += quota[l];
      rem.emplace_back(-(exact - static_cast<double>(quota[l])), l);
    }
    std::sort(rem.begin(), rem.end());
    for (std::size_t r = 0; used < idx.size(); ++r, ++used) quota[rem[r].second] += 1;
    const auto perm = CounterRng(seed, StreamDomain::kControl, static_cast<std::uint64_t>(c)).permutation(idx.size());
    std::size_t pos = 0;
    for (int l = 0; l < k; ++l)
      for (std::size_t q = 0; q < quota[l]; ++q) out[idx[perm[pos++]]] = l;
  }
  return out;
}

}  // namespace detail

inline constexpr int kProbeShuffles = 8;

inline nlohmann::ordered_json run_class_probe(Experiment& exp, Artifacts& out) {
  const ExperimentConfig& c = exp.config();
  if (c.mixture.components.size() < 2) throw ContractError("class probe needs at least two mixture components");
  const int k = static_cast<int>(c.mixture.components.size());
  const TrainConfig cfg = c.clf_cfg();
  const LabeledSet& mtr = exp.split("member_train");
  const LabeledSet& mev = exp.split("member_eval");

  auto probe = [&](const FeatureSet& fs, int shuffle) {
    std::vector<int> ytr = mtr.components;
    if (shuffle >= 0)
      ytr = detail::stratified_relabel(ytr, k, derive_seed(c.seeds.classifier, "probe-shuffle-" + std::to_string(shuffle)));
    const LinearClassifier clf = train_linear(fs.at("member_train"), ytr, k, cfg, "class_probe").clf;
    std::vector<int> pred;
    for (const auto& f : fs.at("member_eval")) pred.push_back(predict_class(clf, f));
    return asr(pred, mev.components);
  };

  const FeatureSet all = exp.method_features();
  FeatureSpec loss_spec = c.features;
  loss_spec.use_grad_x = loss_spec.use_grad_theta = false;
  loss_spec.use_loss = true;
  loss_spec.gsa.reset();
  const FeatureSet loss = exp.features_for(c.plan, loss_spec);

  nlohmann::ordered_json j;
  j["num_classes"] = k;
  j["chance"] = 1.0 / k;
  j["train_count"] = mtr.size();
  j["eval_count"] = mev.size();
  j["all_features_accuracy"] = probe(all, -1);
  j["loss_only_accuracy"] = probe(loss, -1);
  Vec shuffled;
  for (int r = 0; r < kProbeShuffles; ++r) shuffled.push_back(probe(all, r));
  j["shuffled_label_accuracy"] = std::accumulate(shuffled.begin(), shuffled.end(), 0.0) / kProbeShuffles;
  j["shuffled_label_runs"] = shuffled;
  j["metric"] = "balanced accuracy on member_eval";
  out["class_probe.csv"] = "variant,accuracy\nall_features," + format_double(j["all_features_accuracy"].get<double>()) +
                           "\nloss_only," + format_double(j["loss_only_accuracy"].get<double>()) + "\nshuffled_labels," +
                           format_double(j["shuffled_label_accuracy"].get<double>()) + "\n";
  return j;
}

// ---------------------------------------------------------------------------
// Feature ablation and sampling-plan study

struct AblationRow {
  bool pia = false;
  bool loss = false;
  bool grad_x = false;
  bool grad_theta = false;
  AttackReport report;
};

/// The 14 combinations: {drawn, PIA} x nonempty subsets of {L, grad_x, grad_theta}.
inline std::vector<FeatureSpec> ablation_grid(const FeatureSpec& base) {
  std::vector<FeatureSpec> grid;
  for (bool pia : {false, true})
    for (int mask = 1; mask < 8; ++mask) {
      FeatureSpec s;
      s.use_loss = mask & 1;
      s.use_grad_x = mask & 2;
      s.use_grad_theta = mask & 4;
      s.pia_mode = pia;
      s.pia_norm_p = base.pia_norm_p;
      s.repeats = base.repeats;
      grid.push_back(s);
    }
  return grid;
}

inline std::vector<AblationRow> run_ablation_rows(Experiment& exp, const std::vector<FeatureSpec>& grid) {
  if (grid.empty()) throw ParameterError("ablation grid is empty");
  const TrainConfig cfg = exp.config().clf_cfg();
  std::vector<AblationRow> rows;
  for (const FeatureSpec& s : grid) {
    s.validate();
    if (s.per_step_families() == 0) throw ParameterError("ablation row enables no feature family");
    const FeatureSet fs = exp.features_for(exp.config().plan, s);
    BinaryRun run = train_eval_binary(fs.at("member_train"), fs.at("external_train"), fs.at("member_eval"),
                                      fs.at("external_eval"), cfg, "mia", s.describe());
    run.report.config = detail::method_echo(fs);
    rows.push_back({s.pia_mode, s.use_loss, s.use_grad_x, s.use_grad_theta, run.report});
  }
  return rows;
}

inline nlohmann::ordered_json run_ablation(Experiment& exp, Artifacts& out) {
  const auto rows = run_ablation_rows(exp, ablation_grid(exp.config().features));
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  std::string csv = "pia,loss,grad_x,grad_theta,auc,tpr_at_1pct_fpr,asr\n";
  for (const auto& r : rows) {
    j.push_back({{"pia", r.pia},
                 {"loss", r.loss},
                 {"grad_x", r.grad_x},
                 {"grad_theta", r.grad_theta},
                 {"auc", r.report.auc},
                 {"tpr_at_1pct_fpr", r.report.tpr_at_1pct_fpr},
                 {"asr", r.report.asr}});
    csv += std::string(r.pia ? "1" : "0") + ',' + (r.loss ? "1" : "0") + ',' + (r.grad_x ? "1" : "0") + ',' +
           (r.grad_theta ? "1" : "0") + ',' + format_double(r.report.auc) + ',' +
           format_double(r.report.tpr_at_1pct_fpr) + ',' + format_double(r.report.asr) + '\n';
  }
  out["ablation.csv"] = csv;
  return j;
}

inline constexpr int kPlanStride = 4;

/// Plans compared at a fixed query budget Q over the first kPlanStride * Q
/// steps: every step k * j for j < Q, against each contiguous window of Q.
inline std::vector<std::pair<std::string, TimestepPlan>> budget_plans(int T, int Q) {
  if (Q < 1 || kPlanStride * Q > T) throw ParameterError("query budget must be in [1, T/4]");
  std::vector<int> spread;
  for (int j = 0; j < Q; ++j) spread.push_back(kPlanStride * j);
  std::vector<std::pair<std::string, TimestepPlan>> plans;
  plans.emplace_back("strided", kPlanStride * Q == T ? TimestepPlan::strided(kPlanStride, 0)
                                                       : TimestepPlan::explicit_steps(spread));
  for (int w = 0; w < kPlanStride; ++w) plans.emplace_back("window", TimestepPlan::window(w * Q, (w + 1) * Q));
  return plans;
}

/// Strided-vs-window comparison under one feature spec.
inline nlohmann::ordered_json plan_study_for(Experiment& exp, const FeatureSpec& spec, std::string& csv) {
  const ExperimentConfig& c = exp.config();
  const TrainConfig cfg = c.clf_cfg();
  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  double strided_auc = NAN, best_window = -1.0;
  for (const auto& [kind, plan] : budget_plans(c.T, c.query_budget)) {
    const FeatureSet fs = exp.features_for(plan, spec);
    const BinaryRun run = train_eval_binary(fs.at("member_train"), fs.at("external_train"), fs.at("member_eval"),
                                            fs.at("external_eval"), cfg, "mia", plan.describe());
    if (kind == "strided") strided_auc = run.report.auc;
    else best_window = std::max(best_window, run.report.auc);
    rows.push_back({{"kind", kind},
                    {"plan", plan.describe()},
                    {"steps", fs.steps.size()},
                    {"auc", run.report.auc},
                    {"tpr_at_1pct_fpr", run.report.tpr_at_1pct_fpr},
                    {"asr", run.report.asr}});
    csv += spec.describe() + ',' + kind + ",\"" + plan.describe() + "\"," + std::to_string(fs.steps.size()) + ',' +
           format_double(run.report.auc) + ',' + format_double(run.report.tpr_at_1pct_fpr) + ',' +
           format_double(run.report.asr) + '\n';
  }
  return {{"features", spec.describe()},
          {"plans", rows},
          {"strided_auc", strided_auc},
          {"best_window_auc", best_window},
          {"strided_minus_best_window", strided_auc - best_window}};
}

/// Configured features first, then loss features alone.
inline nlohmann::ordered_json run_plan_study(Experiment& exp, Artifacts& out) {
  FeatureSpec spec = exp.config().features;
  spec.gsa.reset();
  FeatureSpec loss = spec;
  loss.use_loss = true;
  loss.use_grad_x = loss.use_grad_theta = false;
  std::string csv = "features,kind,plan,steps,auc,tpr_at_1pct_fpr,asr\n";
  nlohmann::ordered_json j;
  j["query_budget"] = exp.config().query_budget;
  j["stride"] = kPlanStride;
  j["method"] = plan_study_for(exp, spec, csv);
  if (!(loss == spec)) j["loss_only"] = plan_study_for(exp, loss, csv);
  out["plan_study.csv"] = csv;
  return j;
}

// ---------------------------------------------------------------------------
// Reports

inline nlohmann::ordered_json report_header(const Experiment& exp) {
  return {{"version", version_string()}, {"config", to_json(exp.config())}};
}

inline nlohmann::ordered_json ddpm_summary(Experiment& exp) {
  const auto& h = exp.ddpm_history();
  nlohmann::ordered_json j = checkpoint_sidecar(exp.net());
  if (!h.empty()) j["final_train_loss"] = h.back().mean_loss;
  return j;
}

}  // namespace trajfx
