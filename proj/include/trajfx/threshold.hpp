#pragma once

// Single-step loss-threshold attacks: y = 1[L_t < tau] with (t, tau) chosen
// on a labeled calibration split.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajfx/common.hpp"
#include "trajfx/error.hpp"
#include "trajfx/metrics.hpp"

namespace trajfx {

enum class CalibrationObjective { kBalancedAccuracy, kAuc };

struct ThresholdAttack {
  int t_star = 0;
  double tau = 0.0;
  bool uses_pia = false;
  double calibration_score = 0.0;  // balanced accuracy on the calibration split
};

namespace detail {

struct TauChoice {
  double tau = 0.0;
  std::int64_t score = 0;  // hits_member * N + hits_nonmember * P, i.e. 2PN * balanced accuracy
};

/// Best tau over midpoints of consecutive distinct observed values for the
/// rule value < tau; ties go to the smaller tau.
inline TauChoice best_tau(std::span<const double> members, std::span<const double> nonmembers) {
  const auto P = static_cast<std::int64_t>(members.size());
  const auto N = static_cast<std::int64_t>(nonmembers.size());
  std::vector<std::pair<double, int>> all;
  all.reserve(members.size() + nonmembers.size());
  for (double v : members) all.emplace_back(v, 1);
  for (double v : nonmembers) all.emplace_back(v, 0);
  std::sort(all.begin(), all.end());
  // With no midpoint available, tau = the single value flags nothing.
  TauChoice best{all.front().first, N * P};
  bool have = false;
  std::int64_t mem_below = 0, non_below = 0;
  for (std::size_t k = 0; k < all.size();) {
    const double v = all[k].first;
    while (k < all.size() && all[k].first == v) {
      (all[k].second ? mem_below : non_below) += 1;
      ++k;
    }
    if (k == all.size()) break;
    const double tau = v + (all[k].first - v) / 2.0;
    const std::int64_t score = mem_below * N + (N - non_below) * P;
    if (!have || score > best.score) {
      best = {tau, score};
      have = true;
    }
  }
  return best;
}

}  // namespace detail

/// `member_feats[i][k]` is sample i's per-step scalar at candidate_ts[k].
/// Searches t in ascending order; ties go to the smaller t, then smaller tau.
inline ThresholdAttack calibrate_threshold_attack(
    std::span<const Vec> member_feats, std::span<const Vec> nonmember_feats,
    std::span<const int> candidate_ts, bool uses_pia,
    CalibrationObjective objective = CalibrationObjective::kBalancedAccuracy) {
  if (member_feats.empty() || nonmember_feats.empty())
    throw ParameterError("calibration needs members and non-members");
  if (candidate_ts.empty()) throw ParameterError("no candidate steps");
  for (const auto* set : {&member_feats, &nonmember_feats})
    for (const Vec& v : *set)
      if (v.size() != candidate_ts.size()) throw ParameterError("per-step feature length mismatch");

  std::vector<std::size_t> order(candidate_ts.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return candidate_ts[a] < candidate_ts[b]; });

  const auto P = static_cast<std::int64_t>(member_feats.size());
  const auto N = static_cast<std::int64_t>(nonmember_feats.size());
  ThresholdAttack best;
  best.uses_pia = uses_pia;
  bool have = false;
  std::int64_t best_score = 0;
  double best_auc = -1.0;
  Vec m(P), n(N);
  for (std::size_t k : order) {
    for (std::int64_t i = 0; i < P; ++i) m[i] = member_feats[i][k];
    for (std::int64_t i = 0; i < N; ++i) n[i] = nonmember_feats[i][k];
    const detail::TauChoice c = detail::best_tau(m, n);
    bool better;
    if (objective == CalibrationObjective::kAuc) {
      Vec s;
      std::vector<int> y;
      for (double v : m) s.push_back(-v), y.push_back(1);
      for (double v : n) s.push_back(-v), y.push_back(0);
      const double auc = roc_auc(s, y);
      better = !have || auc > best_auc;
      if (better) best_auc = auc;
    } else {
      better = !have || c.score > best_score;
    }
    if (better) {
      have = true;
      best_score = c.score;
      best.t_star = candidate_ts[k];
      best.tau = c.tau;
      best.calibration_score = static_cast<double>(c.score) / static_cast<double>(2 * P * N);
    }
  }
  return best;
}

/// 1 iff the scalar at t_star is strictly below tau.
inline int threshold_decide(const ThresholdAttack& attack, std::span<const int> ts,
                            std::span<const double> per_t_values) {
  if (ts.size() != per_t_values.size()) throw ParameterError("steps and values differ in length");
  for (std::size_t k = 0; k < ts.size(); ++k)
    if (ts[k] == attack.t_star) return per_t_values[k] < attack.tau ? 1 : 0;
  throw ContractError("step " + std::to_string(attack.t_star) + " missing from per-step values");
}

inline nlohmann::ordered_json to_json(const ThresholdAttack& a) {
  return {{"t_star", a.t_star},
          {"tau", a.tau},
          {"uses_pia", a.uses_pia},
          {"calibration_balanced_accuracy", a.calibration_score}};
}

}  // namespace trajfx
