#pragma once

// Trajectory features: per-step {L_t, ||grad_x L_t||^2, ||grad_theta L_t||^2}
// over a timestep plan, optional GSA aggregates, and feature normalization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "trajfx/common.hpp"
#include "trajfx/denoiser.hpp"
#include "trajfx/error.hpp"
#include "trajfx/rng.hpp"
#include "trajfx/schedule.hpp"

namespace trajfx {

enum class PlanVariant { kFull, kStrided, kWindow, kExplicit };

struct TimestepPlan {
  PlanVariant variant = PlanVariant::kFull;
  int stride = 1;
  int offset = 0;
  int start = 0;
  int end = 0;  // exclusive
  std::vector<int> steps;

  static TimestepPlan full() { return {}; }
  static TimestepPlan strided(int stride, int offset = 0) {
    TimestepPlan p;
    p.variant = PlanVariant::kStrided;
    p.stride = stride;
    p.offset = offset;
    return p;
  }
  static TimestepPlan window(int start, int end) {
    TimestepPlan p;
    p.variant = PlanVariant::kWindow;
    p.start = start;
    p.end = end;
    return p;
  }
  static TimestepPlan explicit_steps(std::vector<int> steps) {
    TimestepPlan p;
    p.variant = PlanVariant::kExplicit;
    p.steps = std::move(steps);
    return p;
  }

  /// Sorted, strictly increasing steps in [0, T).
  std::vector<int> resolve(int T) const {
    std::vector<int> out;
    switch (variant) {
      case PlanVariant::kFull:
        for (int t = 0; t < T; ++t) out.push_back(t);
        break;
      case PlanVariant::kStrided:
        if (stride < 1) throw ParameterError("stride must be >= 1");
        if (offset < 0 || offset >= T) throw IndexError("stride offset outside [0, T)");
        for (int t = offset; t < T; t += stride) out.push_back(t);
        break;
      case PlanVariant::kWindow:
        if (start < 0 || end > T || start >= end)
          throw IndexError("window must satisfy 0 <= start < end <= T");
        for (int t = start; t < end; ++t) out.push_back(t);
        break;
      case PlanVariant::kExplicit:
        out = steps;
        std::sort(out.begin(), out.end());
        if (std::adjacent_find(out.begin(), out.end()) != out.end())
          throw ParameterError("explicit plan has duplicate steps");
        for (int t : out)
          if (t < 0 || t >= T) throw IndexError("explicit step " + std::to_string(t) + " outside [0, T)");
        break;
    }
    if (out.empty()) throw ParameterError("timestep plan resolves to no steps");
    return out;
  }

  std::string describe() const {
    switch (variant) {
      case PlanVariant::kFull:
        return "full";
      case PlanVariant::kStrided:
        return "strided(" + std::to_string(stride) + "," + std::to_string(offset) + ")";
      case PlanVariant::kWindow:
        return "window(" + std::to_string(start) + "," + std::to_string(end) + ")";
      case PlanVariant::kExplicit: {
        std::string s = "explicit(";
        std::vector<int> sorted = steps;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i) s += (i ? "," : "") + std::to_string(sorted[i]);
        return s + ")";
      }
    }
    return "?";
  }
};

enum class GsaMode { kGsa1, kGsa2 };

/// GSA1: ||mean_t g_i||^2 per group. GSA2: mean_t ||g_i||^2 per group.
struct GsaConfig {
  GsaMode mode = GsaMode::kGsa2;
  std::vector<std::vector<int>> groups;  // layer indices; empty = one group per layer
  std::vector<int> subsample;            // empty = 10 evenly spaced steps

  std::vector<std::vector<int>> resolved_groups(std::size_t num_layers) const {
    if (groups.empty()) {
      std::vector<std::vector<int>> g(num_layers);
      for (std::size_t l = 0; l < num_layers; ++l) g[l] = {static_cast<int>(l)};
      return g;
    }
    std::vector<int> seen(num_layers, 0);
    for (const auto& grp : groups) {
      if (grp.empty()) throw ParameterError("GSA group is empty");
      for (int l : grp) {
        if (l < 0 || static_cast<std::size_t>(l) >= num_layers)
          throw ParameterError("GSA group names layer " + std::to_string(l));
        ++seen[l];
      }
    }
    for (int c : seen)
      if (c != 1) throw ParameterError("GSA groups must partition the layers");
    return groups;
  }

  std::vector<int> resolved_subsample(int T) const {
    if (!subsample.empty()) return TimestepPlan::explicit_steps(subsample).resolve(T);
    std::vector<int> out;
    const int n = std::min(10, T);
    for (int i = 0; i < n; ++i)
      out.push_back(static_cast<int>(std::lround(static_cast<double>(i) * (T - 1) / (n - 1))));
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  std::string describe() const {
    std::string s = mode == GsaMode::kGsa1 ? "gsa1[" : "gsa2[";
    for (const auto& g : groups) {
      s += "{";
      for (int l : g) s += std::to_string(l) + ",";
      s += "}";
    }
    s += "][";
    for (int t : subsample) s += std::to_string(t) + ",";
    return s + "]";
  }
};

struct FeatureSpec {
  bool use_loss = true;
  bool use_grad_x = true;
  bool use_grad_theta = true;
  bool pia_mode = false;  // eps := eps_theta(x, 0) at every step
  double pia_norm_p = 2.0;
  int repeats = 1;  // noise draws averaged per step (ignored in pia_mode)
  std::optional<GsaConfig> gsa;

  static FeatureSpec loss_only() {
    FeatureSpec s;
    s.use_grad_x = s.use_grad_theta = false;
    return s;
  }

  int per_step_families() const {
    return static_cast<int>(use_loss) + static_cast<int>(use_grad_x) +
           static_cast<int>(use_grad_theta);
  }

  void validate() const {
    if (per_step_families() == 0 && !gsa) throw ParameterError("feature spec enables no family");
    if (!(pia_norm_p > 0.0)) throw ParameterError("pia_norm_p must be positive");
    if (repeats < 1) throw ParameterError("repeats must be >= 1");
  }

  std::string describe() const {
    std::string s;
    s += use_loss ? "L" : "-";
    s += use_grad_x ? "X" : "-";
    s += use_grad_theta ? "W" : "-";
    if (pia_mode) s += ":pia(p=" + format_double(pia_norm_p) + ")";
    if (!pia_mode && repeats != 1) s += ":r" + std::to_string(repeats);
    if (gsa) s += ":" + gsa->describe();
    return s;
  }
};

/// Digest binding a feature vector to (plan, spec, schedule, arch).
inline std::uint64_t feature_spec_hash(const TimestepPlan& plan, const FeatureSpec& spec,
                                       const NoiseSchedule& schedule, const DenoiserParams& params) {
  return Fnv1a{}
      .update(plan.describe())
      .update("|")
      .update(spec.describe())
      .update("|")
      .update(hex64(schedule.digest()))
      .update("|")
      .update(hex64(params.arch_hash()))
      .digest();
}

struct TrajectoryFeatureVector {
  std::uint64_t sample_id = 0;
  int label = -1;
  Vec values;
  std::uint64_t spec_hash = 0;

  friend bool operator==(const TrajectoryFeatureVector&, const TrajectoryFeatureVector&) = default;
};

/// Column names in extraction order, e.g. "L@3", "gx@3", "gw@3", "gsa@0".
inline std::vector<std::string> feature_layout(std::span<const int> steps, const FeatureSpec& spec,
                                               std::size_t gsa_groups = 0) {
  std::vector<std::string> names;
  for (int t : steps) {
    const std::string at = "@" + std::to_string(t);
    if (spec.use_loss) names.push_back((spec.pia_mode ? "pia" : "L") + at);
    if (spec.use_grad_x) names.push_back("gx" + at);
    if (spec.use_grad_theta) names.push_back("gw" + at);
  }
  for (std::size_t g = 0; g < gsa_groups; ++g) names.push_back("gsa@" + std::to_string(g));
  return names;
}

/// The PIA noise estimate eps_theta(x, 0).
inline Vec pia_noise(const DenoiserParams& params, std::span<const double> x) {
  return predict_eps(params, x, 0);
}

inline double pow_norm(std::span<const double> r, double p) {
  double s = 0.0;
  if (p == 2.0) return squared_norm(r);
  for (double v : r) s += std::pow(std::abs(v), p);
  return s;
}

/// Per-group GSA aggregates.
inline Vec extract_gsa(const DenoiserParams& params, const NoiseSchedule& schedule,
                       std::span<const double> x, const GsaConfig& gsa, std::uint64_t seed,
                       std::uint64_t sample_id) {
  const auto groups = gsa.resolved_groups(params.num_layers());
  const auto ts = gsa.resolved_subsample(schedule.T);
  if (ts.empty()) throw ParameterError("GSA subsample is empty");
  const double inv = 1.0 / static_cast<double>(ts.size());
  Vec out(groups.size(), 0.0);
  Vec mean_grad;
  if (gsa.mode == GsaMode::kGsa1) mean_grad.assign(params.param_count(), 0.0);
  for (int t : ts) {
    const Vec eps = CounterRng(seed, StreamDomain::kForwardNoise, sample_id, t).normal_vector(x.size());
    GradBundle g;
    try {
      g = loss_and_grads(params, x, t, eps, schedule, false, true);
    } catch (const NumericError& e) {
      throw e.at_sample(static_cast<std::int64_t>(sample_id), t);
    }
    if (gsa.mode == GsaMode::kGsa2) {
      for (std::size_t i = 0; i < groups.size(); ++i)
        for (int l : groups[i]) out[i] += inv * (*g.per_group_sq_norms)[l];
    } else {
      const Vec& gt = *g.grad_theta;
      for (std::size_t j = 0; j < gt.size(); ++j) mean_grad[j] += inv * gt[j];
    }
  }
  if (gsa.mode == GsaMode::kGsa1) {
    for (std::size_t i = 0; i < groups.size(); ++i)
      for (int l : groups[i]) {
        const LayerShape& sh = params.layers[l];
        out[i] += squared_norm(std::span<const double>(mean_grad).subspan(sh.offset, sh.size()));
      }
  }
  return out;
}

/// Trajectory features of one sample. Noise for step t (repeat r) comes from
/// the stream keyed (seed, sample_id, t + r*T); in pia_mode every step uses
/// eps_theta(x, 0) instead and the result does not depend on `seed`.
inline TrajectoryFeatureVector extract_features(const DenoiserParams& params,
                                                const NoiseSchedule& schedule,
                                                std::span<const double> x, const TimestepPlan& plan,
                                                const FeatureSpec& spec, std::uint64_t seed,
                                                std::uint64_t sample_id, int label = -1) {
  spec.validate();
  if (x.size() != static_cast<std::size_t>(params.data_dim))
    throw ParameterError("sample dimension does not match the network");
  if (params.num_steps != schedule.T) throw ContractError("network T differs from schedule T");
  const std::vector<int> steps = plan.resolve(schedule.T);

  TrajectoryFeatureVector f;
  f.sample_id = sample_id;
  f.label = label;
  f.spec_hash = feature_spec_hash(plan, spec, schedule, params);
  f.values.reserve(steps.size() * spec.per_step_families());

  const bool want_gx = spec.use_grad_x;
  const bool want_gw = spec.use_grad_theta;
  Vec pia_eps;
  if (spec.pia_mode) pia_eps = pia_noise(params, x);
  const int repeats = spec.pia_mode ? 1 : spec.repeats;
  const double inv = 1.0 / repeats;

  for (int t : steps) {
    double loss = 0.0, gx = 0.0, gw = 0.0;
    try {
      for (int r = 0; r < repeats; ++r) {
        Vec drawn;
        if (!spec.pia_mode)
          drawn = CounterRng(seed, StreamDomain::kForwardNoise, sample_id,
                             static_cast<std::uint64_t>(t) + static_cast<std::uint64_t>(r) * schedule.T)
                      .normal_vector(x.size());
        const Vec& eps = spec.pia_mode ? pia_eps : drawn;
        GradBundle g = loss_and_grads(params, x, t, eps, schedule, want_gx, want_gw);
        if (spec.pia_mode && spec.pia_norm_p != 2.0) {
          const Vec x_t = forward_diffuse(schedule, x, t, eps);
          Vec res = predict_eps(params, x_t, t);
          for (std::size_t i = 0; i < res.size(); ++i) res[i] -= eps[i];
          loss += pow_norm(res, spec.pia_norm_p);
        } else {
          loss += g.loss;
        }
        if (want_gx) gx += squared_norm(*g.grad_x);
        if (want_gw) gw += squared_norm(*g.grad_theta);
      }
    } catch (const NumericError& e) {
      throw e.at_sample(static_cast<std::int64_t>(sample_id), t);
    }
    if (spec.use_loss) f.values.push_back(loss * inv);
    if (want_gx) f.values.push_back(gx * inv);
    if (want_gw) f.values.push_back(gw * inv);
  }
  if (spec.gsa) {
    const Vec agg = extract_gsa(params, schedule, x, *spec.gsa, seed, sample_id);
    f.values.insert(f.values.end(), agg.begin(), agg.end());
  }
  if (!all_finite(f.values))
    throw NumericError("non-finite trajectory feature").at_sample(static_cast<std::int64_t>(sample_id), -1);
  return f;
}

/// Extraction over a collection; sample i gets ids[i] and labels[i].
inline std::vector<TrajectoryFeatureVector> extract_all(
    const DenoiserParams& params, const NoiseSchedule& schedule, std::span<const Vec> xs,
    std::span<const std::uint64_t> ids, std::span<const int> labels, const TimestepPlan& plan,
    const FeatureSpec& spec, std::uint64_t seed, unsigned workers = 1) {
  if (ids.size() != xs.size() || labels.size() != xs.size())
    throw ParameterError("extract_all: xs, ids and labels differ in length");
  std::vector<TrajectoryFeatureVector> out(xs.size());
  parallel_for(xs.size(), workers, [&](std::size_t i) {
    out[i] = extract_features(params, schedule, xs[i], plan, spec, seed, ids[i], labels[i]);
  });
  return out;
}

/// Column indices that turn features extracted under (full_steps, full_spec)
/// into those of (sub_steps, sub_spec). Neither spec may use GSA, and the
/// sub-spec must agree with the full spec on pia_mode, p and repeats.
inline std::vector<std::size_t> feature_columns(std::span<const int> full_steps,
                                                const FeatureSpec& full_spec,
                                                std::span<const int> sub_steps,
                                                const FeatureSpec& sub_spec) {
  if (full_spec.gsa || sub_spec.gsa) throw ContractError("column selection does not cover GSA");
  if (full_spec.pia_mode != sub_spec.pia_mode || full_spec.pia_norm_p != sub_spec.pia_norm_p ||
      (!full_spec.pia_mode && full_spec.repeats != sub_spec.repeats))
    throw ContractError("sub-spec draws noise differently from the full spec");
  if ((sub_spec.use_loss && !full_spec.use_loss) || (sub_spec.use_grad_x && !full_spec.use_grad_x) ||
      (sub_spec.use_grad_theta && !full_spec.use_grad_theta))
    throw ContractError("sub-spec enables a family the full spec lacks");
  const std::size_t width = full_spec.per_step_families();
  std::vector<std::size_t> cols;
  for (int t : sub_steps) {
    const auto it = std::lower_bound(full_steps.begin(), full_steps.end(), t);
    if (it == full_steps.end() || *it != t)
      throw ContractError("step " + std::to_string(t) + " missing from the full plan");
    const std::size_t base = static_cast<std::size_t>(it - full_steps.begin()) * width;
    std::size_t k = 0;
    if (full_spec.use_loss) {
      if (sub_spec.use_loss) cols.push_back(base + k);
      ++k;
    }
    if (full_spec.use_grad_x) {
      if (sub_spec.use_grad_x) cols.push_back(base + k);
      ++k;
    }
    if (full_spec.use_grad_theta && sub_spec.use_grad_theta) cols.push_back(base + k);
  }
  return cols;
}

inline std::vector<TrajectoryFeatureVector> select_columns(
    std::span<const TrajectoryFeatureVector> fs, std::span<const std::size_t> cols,
    std::uint64_t new_hash) {
  std::vector<TrajectoryFeatureVector> out(fs.size());
  for (std::size_t i = 0; i < fs.size(); ++i) {
    out[i].sample_id = fs[i].sample_id;
    out[i].label = fs[i].label;
    out[i].spec_hash = new_hash;
    out[i].values.reserve(cols.size());
    for (std::size_t c : cols) {
      if (c >= fs[i].values.size()) throw ContractError("column index out of range");
      out[i].values.push_back(fs[i].values[c]);
    }
  }
  return out;
}

struct NormStats {
  Vec mean;
  Vec std;
  std::uint64_t spec_hash = 0;

  static constexpr double kStdFloor = 1e-8;

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

/// Per-coordinate mean and population standard deviation (floored).
inline NormStats normalize_fit(std::span<const TrajectoryFeatureVector> train) {
  if (train.empty()) throw ContractError("normalize_fit needs at least one vector");
  const std::size_t d = train.front().values.size();
  NormStats s;
  s.spec_hash = train.front().spec_hash;
  s.mean.assign(d, 0.0);
  s.std.assign(d, 0.0);
  for (const auto& f : train) {
    if (f.spec_hash != s.spec_hash) throw ContractError("normalize_fit: mixed spec_hash");
    if (f.values.size() != d) throw ContractError("normalize_fit: ragged feature vectors");
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += f.values[j];
  }
  const double n = static_cast<double>(train.size());
  for (double& m : s.mean) m /= n;
  for (const auto& f : train)
    for (std::size_t j = 0; j < d; ++j) {
      const double c = f.values[j] - s.mean[j];
      s.std[j] += c * c;
    }
  for (double& v : s.std) v = std::max(std::sqrt(v / n), NormStats::kStdFloor);
  return s;
}

inline Vec normalize_values(const NormStats& stats, std::span<const double> v) {
  if (v.size() != stats.mean.size())
    throw ContractError("feature length " + std::to_string(v.size()) + " does not match stats length " +
                        std::to_string(stats.mean.size()));
  Vec out(v.size());
  for (std::size_t j = 0; j < v.size(); ++j) out[j] = (v[j] - stats.mean[j]) / stats.std[j];
  return out;
}

inline TrajectoryFeatureVector normalize_apply(const NormStats& stats, const TrajectoryFeatureVector& f) {
  TrajectoryFeatureVector out = f;
  out.values = normalize_values(stats, f.values);
  return out;
}

}  // namespace trajfx
