#pragma once

#include <cmath>
#include <span>
#include <string>

#include "trajfx/common.hpp"
#include "trajfx/error.hpp"

namespace trajfx {

/// Discrete DDPM noise schedule. Index t runs over [0, T).
struct NoiseSchedule {
  int T = 0;
  double beta_start = 0.0;
  double beta_end = 0.0;
  std::string kind = "linear";
  Vec betas;
  Vec alphas;
  Vec alpha_bars;

  void check_step(int t) const {
    if (t < 0 || t >= T)
      throw IndexError("step " + std::to_string(t) + " outside [0, " + std::to_string(T) + ")");
  }

  /// Digest over the schedule definition.
  std::uint64_t digest() const {
    return fnv1a(kind + ":" + std::to_string(T) + ":" + format_double(beta_start) + ":" +
                 format_double(beta_end));
  }
};

/// Linear betas from beta_start to beta_end inclusive.
inline NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw ParameterError("schedule needs T >= 2");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ParameterError("schedule needs 0 < beta_start <= beta_end < 1");
  NoiseSchedule s;
  s.T = T;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.betas.resize(T);
  s.alphas.resize(T);
  s.alpha_bars.resize(T);
  double prod = 1.0;
  for (int t = 0; t < T; ++t) {
    s.betas[t] = beta_start + (beta_end - beta_start) * static_cast<double>(t) / (T - 1);
    s.alphas[t] = 1.0 - s.betas[t];
    prod *= s.alphas[t];
    s.alpha_bars[t] = prod;
  }
  return s;
}

/// Desk-scale default: T=100 with the canonical (1e-4, 0.02, T=1000) betas
/// rescaled by 1000/T.
inline NoiseSchedule default_schedule() { return make_linear_schedule(100, 1e-3, 0.2); }

/// x_t = sqrt(abar_t) x + sqrt(1 - abar_t) eps.
inline Vec forward_diffuse(const NoiseSchedule& schedule, std::span<const double> x, int t,
                           std::span<const double> eps) {
  schedule.check_step(t);
  if (eps.size() != x.size()) throw ParameterError("forward_diffuse: eps and x differ in size");
  const double a = std::sqrt(schedule.alpha_bars[t]);
  const double s = std::sqrt(1.0 - schedule.alpha_bars[t]);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = a * x[i] + s * eps[i];
  return out;
}

}  // namespace trajfx
