#pragma once

#include <cmath>
#include <concepts>
#include <cstdint>
#include <span>
#include <vector>

#include "trajfx/common.hpp"
#include "trajfx/denoiser.hpp"
#include "trajfx/error.hpp"
#include "trajfx/rng.hpp"
#include "trajfx/schedule.hpp"

namespace trajfx {

/// Anything that predicts noise through an ADL-visible predict_eps(model, x_t, t).
template <class M>
concept EpsModel = requires(const M& m, std::span<const double> x, int t) {
  { predict_eps(m, x, t) } -> std::convertible_to<Vec>;
};

enum class SamplerVariant { kAncestral, kDDIM };

/// Reverse-step variance of the ancestral sampler: beta_t, or the posterior
/// variance beta_t (1 - abar_{t-1}) / (1 - abar_t).
enum class ReverseVariance { kBeta, kPosterior };

struct SamplerKind {
  SamplerVariant variant = SamplerVariant::kAncestral;
  int ddim_substeps = 0;  // DDIM only; eta is fixed at 0
  ReverseVariance variance = ReverseVariance::kBeta;

  static SamplerKind ancestral(ReverseVariance v = ReverseVariance::kBeta) {
    return {SamplerVariant::kAncestral, 0, v};
  }
  static SamplerKind ddim(int substeps) { return {SamplerVariant::kDDIM, substeps}; }
};

inline double reverse_sigma(const NoiseSchedule& s, int t, ReverseVariance v) {
  if (t == 0) return 0.0;
  if (v == ReverseVariance::kBeta) return std::sqrt(s.betas[t]);
  return std::sqrt(s.betas[t] * (1.0 - s.alpha_bars[t - 1]) / (1.0 - s.alpha_bars[t]));
}

/// Evenly spaced, strictly decreasing DDIM grid from T-1 to 0.
inline std::vector<int> ddim_timesteps(int T, int substeps) {
  if (substeps < 2 || substeps > T)
    throw ParameterError("DDIM substeps must be in [2, T]");
  std::vector<int> ts(substeps);
  for (int i = 0; i < substeps; ++i) {
    const double frac = static_cast<double>(i) / (substeps - 1);
    ts[i] = static_cast<int>(std::lround((T - 1) * (1.0 - frac)));
  }
  return ts;
}

/// Ancestral update; by default sigma_t^2 = beta_t for t >= 1 and sigma_0 = 0.
inline Vec ancestral_update(const NoiseSchedule& s, std::span<const double> x_t, int t,
                            std::span<const double> eps_pred, std::span<const double> z,
                            ReverseVariance v = ReverseVariance::kBeta) {
  s.check_step(t);
  const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alphas[t]);
  const double coef = s.betas[t] / std::sqrt(1.0 - s.alpha_bars[t]);
  const double sigma = reverse_sigma(s, t, v);
  Vec out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    out[i] = inv_sqrt_alpha * (x_t[i] - coef * eps_pred[i]);
    if (sigma != 0.0) out[i] += sigma * z[i];
  }
  return out;
}

template <EpsModel M>
Vec ancestral_sample_step(const M& net, const NoiseSchedule& s, std::span<const double> x_t, int t,
                          std::span<const double> z, ReverseVariance v = ReverseVariance::kBeta) {
  s.check_step(t);
  if (t >= 1 && z.size() != x_t.size()) throw ParameterError("z has wrong dimension");
  const Vec eps = predict_eps(net, x_t, t);
  return ancestral_update(s, x_t, t, eps, z, v);
}

/// Deterministic DDIM (eta = 0) move between cumulative signal levels.
inline Vec ddim_update(std::span<const double> x_t, std::span<const double> eps_pred,
                       double alpha_bar_t, double alpha_bar_prev) {
  const double sa = std::sqrt(alpha_bar_t);
  const double sn = std::sqrt(1.0 - alpha_bar_t);
  const double pa = std::sqrt(alpha_bar_prev);
  const double pn = std::sqrt(1.0 - alpha_bar_prev);
  Vec out(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    const double x0 = (x_t[i] - sn * eps_pred[i]) / sa;
    out[i] = pa * x0 + pn * eps_pred[i];
  }
  return out;
}

/// x_{t_prev} from x_t. t_prev = -1 denotes the clean endpoint (abar = 1).
template <EpsModel M>
Vec ddim_sample_step(const M& net, const NoiseSchedule& s, std::span<const double> x_t, int t,
                     int t_prev) {
  s.check_step(t);
  if (t_prev >= t) throw ParameterError("ddim_sample_step requires t_prev < t");
  if (t_prev < -1) throw IndexError("t_prev below -1");
  const Vec eps = predict_eps(net, x_t, t);
  const double prev = t_prev >= 0 ? s.alpha_bars[t_prev] : 1.0;
  return ddim_update(x_t, eps, s.alpha_bars[t], prev);
}

/// Draws one sample. Initial noise and per-step z come from the stream keyed
/// by (seed, sample index, step).
template <EpsModel M>
Vec sample_one(const M& net, const NoiseSchedule& s, int dim, const SamplerKind& kind,
               std::uint64_t seed, std::uint64_t index) {
  Vec x = CounterRng(seed, StreamDomain::kSampling, index, static_cast<std::uint64_t>(s.T))
              .normal_vector(dim);
  if (kind.variant == SamplerVariant::kAncestral) {
    Vec z(dim, 0.0);
    for (int t = s.T - 1; t >= 0; --t) {
      if (t >= 1) CounterRng(seed, StreamDomain::kSampling, index, t).fill_normal(z);
      x = ancestral_sample_step(net, s, x, t, z, kind.variance);
    }
  } else {
    const std::vector<int> ts = ddim_timesteps(s.T, kind.ddim_substeps);
    for (std::size_t i = 0; i < ts.size(); ++i) {
      const int prev = i + 1 < ts.size() ? ts[i + 1] : -1;
      x = ddim_sample_step(net, s, x, ts[i], prev);
    }
  }
  return x;
}

template <EpsModel M>
std::vector<Vec> sample_dataset(const M& net, const NoiseSchedule& s, int dim, std::size_t n,
                                const SamplerKind& kind, std::uint64_t seed,
                                unsigned workers = 1) {
  if (n < 1) throw ParameterError("sample_dataset needs n >= 1");
  std::vector<Vec> out(n);
  parallel_for(n, workers, [&](std::size_t i) { out[i] = sample_one(net, s, dim, kind, seed, i); });
  return out;
}

inline std::vector<Vec> sample_dataset(const DenoiserParams& net, const NoiseSchedule& s,
                                       std::size_t n, const SamplerKind& kind, std::uint64_t seed,
                                       unsigned workers = 1) {
  return sample_dataset(net, s, net.data_dim, n, kind, seed, workers);
}

}  // namespace trajfx
