#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "trajfx/rng.hpp"
#include "trajfx/sampler.hpp"
#include "trajfx/schedule.hpp"

using namespace trajfx;

TEST(Schedule, TwoStepHandValues) {
  const auto s = make_linear_schedule(2, 0.1, 0.2);
  EXPECT_DOUBLE_EQ(s.betas[0], 0.1);
  EXPECT_DOUBLE_EQ(s.betas[1], 0.2);
  EXPECT_DOUBLE_EQ(s.alphas[0], 0.9);
  EXPECT_DOUBLE_EQ(s.alphas[1], 0.8);
  EXPECT_DOUBLE_EQ(s.alpha_bars[0], 0.9);
  EXPECT_NEAR(s.alpha_bars[1], 0.72, 1e-15);
}

TEST(Schedule, ConstantBetas) {
  const auto s = make_linear_schedule(2, 0.1, 0.1);
  EXPECT_EQ(s.betas, (Vec{0.1, 0.1}));
}

TEST(Schedule, TerminalAlphaBarMatchesLogProduct) {
  const auto s = make_linear_schedule(100, 1e-3, 0.2);
  double log_prod = 0.0, beta_sum = 0.0;
  for (int t = 0; t < 100; ++t) {
    const double beta = 1e-3 + (0.2 - 1e-3) * t / 99.0;
    log_prod += std::log1p(-beta);
    beta_sum += beta;
  }
  EXPECT_NEAR(s.alpha_bars[99], std::exp(log_prod), 1e-15);
  EXPECT_LE(s.alpha_bars[99], std::exp(-beta_sum));  // log(1 - b) <= -b
  EXPECT_LT(s.alpha_bars[99], 1e-4);
}

TEST(Schedule, Invariants) {
  for (auto [T, b0, b1] : {std::tuple{2, 0.1, 0.2}, {100, 1e-3, 0.2}, {200, 1e-3, 0.05}, {1000, 1e-4, 0.02}}) {
    const auto s = make_linear_schedule(T, b0, b1);
    EXPECT_DOUBLE_EQ(s.alpha_bars[0], s.alphas[0]);
    for (int t = 0; t < T; ++t) {
      EXPECT_GT(s.betas[t], 0.0);
      EXPECT_LT(s.betas[t], 1.0);
      EXPECT_GT(s.alpha_bars[t], 0.0);
      EXPECT_LT(s.alpha_bars[t], 1.0);
      if (t) {
        EXPECT_LT(s.alpha_bars[t], s.alpha_bars[t - 1]);
      }
    }
  }
}

TEST(Schedule, RejectsBadRanges) {
  EXPECT_THROW(make_linear_schedule(1, 0.1, 0.2), ParameterError);
  EXPECT_THROW(make_linear_schedule(10, 0.0, 0.2), ParameterError);
  EXPECT_THROW(make_linear_schedule(10, 0.3, 0.2), ParameterError);
  EXPECT_THROW(make_linear_schedule(10, 0.1, 1.0), ParameterError);
}

TEST(ForwardDiffuse, Examples) {
  auto s = make_linear_schedule(10, 0.01, 0.3);
  const Vec x{1.5, -2.0};
  const Vec zero{0.0, 0.0};
  const Vec out = forward_diffuse(s, x, 4, zero);
  EXPECT_EQ(out[0], std::sqrt(s.alpha_bars[4]) * 1.5);
  EXPECT_EQ(out[1], std::sqrt(s.alpha_bars[4]) * -2.0);

  s.alpha_bars[3] = 0.25;
  EXPECT_EQ(forward_diffuse(s, Vec{2.0, 0.0}, 3, zero), (Vec{1.0, 0.0}));

  const Vec pure = forward_diffuse(s, zero, 6, Vec{1.0, 0.0});
  EXPECT_EQ(pure[0], std::sqrt(1.0 - s.alpha_bars[6]));
  EXPECT_EQ(pure[1], 0.0);

  EXPECT_THROW(forward_diffuse(s, x, 10, zero), IndexError);
  EXPECT_THROW(forward_diffuse(s, x, -1, zero), IndexError);
  EXPECT_THROW(forward_diffuse(s, x, 0, Vec{0.0}), ParameterError);
}

TEST(ForwardDiffuse, MarginalMomentsWithinFourStandardErrors) {
  const auto s = make_linear_schedule(100, 1e-3, 0.2);
  const std::vector<std::pair<Vec, int>> cases = {
      {{1.0, -1.0}, 0}, {{0.3, 2.0}, 10}, {{-1.5, 0.5, 1.0}, 50}, {{4.0}, 90}, {{0.0, 0.0}, 99}};
  const int n = 10000;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto& [x, t] = cases[c];
    const double ab = s.alpha_bars[t];
    for (std::size_t d = 0; d < x.size(); ++d) {
      double sum = 0.0, sum2 = 0.0;
      for (int i = 0; i < n; ++i) {
        const Vec eps = CounterRng(100 + c, StreamDomain::kForwardNoise, i).normal_vector(x.size());
        const double v = forward_diffuse(s, x, t, eps)[d];
        sum += v;
        sum2 += v * v;
      }
      const double mean = sum / n;
      const double var = (sum2 - n * mean * mean) / (n - 1);
      const double want_var = 1.0 - ab;
      EXPECT_NEAR(mean, std::sqrt(ab) * x[d], 4.0 * std::sqrt(want_var / n));
      EXPECT_NEAR(var, want_var, 4.0 * want_var * std::sqrt(2.0 / (n - 1)));
    }
  }
}

namespace {

struct ZeroNet {};
Vec predict_eps(const ZeroNet&, std::span<const double> x, int) { return Vec(x.size(), 0.0); }

struct ConstNet {
  Vec out;
};
Vec predict_eps(const ConstNet& n, std::span<const double>, int) { return n.out; }

}  // namespace

TEST(Ancestral, ZeroPredictionZeroNoise) {
  const auto s = make_linear_schedule(20, 1e-3, 0.2);
  const Vec x{1.0, -3.0};
  const Vec out = ancestral_sample_step(ZeroNet{}, s, x, 7, Vec{0.0, 0.0});
  EXPECT_DOUBLE_EQ(out[0], 1.0 / std::sqrt(s.alphas[7]));
  EXPECT_DOUBLE_EQ(out[1], -3.0 / std::sqrt(s.alphas[7]));
}

TEST(Ancestral, FinalStepIgnoresNoise) {
  const auto s = make_linear_schedule(20, 1e-3, 0.2);
  const Vec x{0.4, 0.2};
  const Vec a = ancestral_sample_step(ConstNet{{0.1, -0.2}}, s, x, 0, Vec{5.0, -7.0});
  const Vec b = ancestral_sample_step(ConstNet{{0.1, -0.2}}, s, x, 0, Vec{0.0, 0.0});
  EXPECT_EQ(a, b);
}

TEST(Ancestral, MatchesTranscribedUpdate) {
  const auto s = make_linear_schedule(50, 1e-3, 0.2);
  const DenoiserParams net = init_params(2, {8}, 4, 3, 50);
  std::mt19937_64 gen(1);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 20; ++rep) {
    const int t = 1 + rep * 2;
    const Vec x{nd(gen), nd(gen)}, z{nd(gen), nd(gen)};
    const Vec e = oracle::mlp_forward(net, x, t);
    const double beta = s.betas[t], alpha = 1.0 - beta;
    double ab = 1.0;
    for (int k = 0; k <= t; ++k) ab *= s.alphas[k];
    const Vec got = ancestral_sample_step(net, s, x, t, z);
    for (int i = 0; i < 2; ++i) {
      const double want = (x[i] - beta / std::sqrt(1.0 - ab) * e[i]) / std::sqrt(alpha) + std::sqrt(beta) * z[i];
      EXPECT_NEAR(got[i], want, 1e-12);
    }
  }
}

TEST(Ancestral, PosteriorVarianceVariant) {
  const auto s = make_linear_schedule(50, 1e-3, 0.2);
  const Vec x{0.5, 0.5}, z{1.0, -1.0};
  const Vec got = ancestral_sample_step(ZeroNet{}, s, x, 10, z, ReverseVariance::kPosterior);
  const double sig = std::sqrt(s.betas[10] * (1.0 - s.alpha_bars[9]) / (1.0 - s.alpha_bars[10]));
  EXPECT_NEAR(got[0], 0.5 / std::sqrt(s.alphas[10]) + sig, 1e-14);
  EXPECT_NEAR(got[1], 0.5 / std::sqrt(s.alphas[10]) - sig, 1e-14);
}

// With the exact noise, the zero-noise reverse step returns the mean of
// q(x_{t-1} | x_t, x_0).
TEST(Ancestral, PerfectPredictionGivesPosteriorMean) {
  const auto s = make_linear_schedule(40, 1e-3, 0.2);
  std::mt19937_64 gen(2);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 20; ++rep) {
    const int t = 1 + rep;
    const Vec x0{nd(gen), nd(gen), nd(gen)}, eps{nd(gen), nd(gen), nd(gen)};
    const Vec xt = forward_diffuse(s, x0, t, eps);
    const Vec got = ancestral_sample_step(ConstNet{eps}, s, xt, t, Vec(3, 0.0));
    const double ab = s.alpha_bars[t], abp = s.alpha_bars[t - 1], beta = s.betas[t];
    const double c0 = std::sqrt(abp) * beta / (1.0 - ab);
    const double ct = std::sqrt(s.alphas[t]) * (1.0 - abp) / (1.0 - ab);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(got[i], c0 * x0[i] + ct * xt[i], 1e-12);
  }
}

TEST(Ddim, ZeroPredictionScalesByAlphaBarRatio) {
  const auto s = make_linear_schedule(30, 1e-3, 0.2);
  const Vec x{2.0, -1.0};
  const Vec out = ddim_sample_step(ZeroNet{}, s, x, 20, 5);
  const double r = std::sqrt(s.alpha_bars[5] / s.alpha_bars[20]);
  EXPECT_NEAR(out[0], 2.0 * r, 1e-14);
  EXPECT_NEAR(out[1], -1.0 * r, 1e-14);
}

TEST(Ddim, DegenerateEqualLevelsIsIdentity) {
  const Vec x{0.7, -0.1};
  const Vec out = ddim_update(x, Vec{0.0, 0.0}, 0.4, 0.4);
  EXPECT_NEAR(out[0], x[0], 1e-15);
  EXPECT_NEAR(out[1], x[1], 1e-15);
}

TEST(Ddim, BitwiseDeterministicAndValidated) {
  const auto s = make_linear_schedule(30, 1e-3, 0.2);
  const DenoiserParams net = init_params(2, {8, 8}, 4, 1, 30);
  const Vec x{0.3, 0.9};
  EXPECT_EQ(ddim_sample_step(net, s, x, 29, 10), ddim_sample_step(net, s, x, 29, 10));
  EXPECT_THROW(ddim_sample_step(net, s, x, 10, 10), ParameterError);
  EXPECT_THROW(ddim_sample_step(net, s, x, 10, 12), ParameterError);
}

TEST(Ddim, TimestepGrid) {
  for (int T : {10, 50, 100})
    for (int k : {2, 5, 10}) {
      const auto ts = ddim_timesteps(T, k);
      ASSERT_EQ(ts.size(), static_cast<std::size_t>(k));
      EXPECT_EQ(ts.front(), T - 1);
      EXPECT_EQ(ts.back(), 0);
      for (std::size_t i = 1; i < ts.size(); ++i) EXPECT_LT(ts[i], ts[i - 1]);
    }
  EXPECT_THROW(ddim_timesteps(10, 1), ParameterError);
  EXPECT_THROW(ddim_timesteps(10, 11), ParameterError);
}

TEST(SampleDataset, SeededAndWorkerIndependent) {
  const auto s = make_linear_schedule(20, 1e-3, 0.2);
  const DenoiserParams net = init_params(2, {8}, 4, 7, 20);
  for (auto kind : {SamplerKind::ancestral(), SamplerKind::ddim(5)}) {
    const auto a = sample_dataset(net, s, 1, kind, 99);
    const auto b = sample_dataset(net, s, 1, kind, 99);
    EXPECT_EQ(a, b);
    const auto c = sample_dataset(net, s, 16, kind, 5, 1);
    const auto d = sample_dataset(net, s, 16, kind, 5, 3);
    EXPECT_EQ(c, d);
  }
  EXPECT_THROW(sample_dataset(net, s, 0, SamplerKind::ancestral(), 1), ParameterError);
}

TEST(SampleDataset, UntrainedNetIsFinite) {
  const auto s = make_linear_schedule(50, 1e-3, 0.2);
  const DenoiserParams net = init_params(2, {16, 16}, 8, 4, 50);
  const auto xs = sample_dataset(net, s, 1000, SamplerKind::ancestral(), 3);
  double m = 0.0;
  for (const auto& x : xs) {
    ASSERT_TRUE(all_finite(x));
    m += x[0];
  }
  EXPECT_TRUE(std::isfinite(m / 1000));
}
