#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "trajfx/feature_cache.hpp"
#include "trajfx/features.hpp"

using namespace trajfx;

namespace {

struct Fixture {
  NoiseSchedule s = make_linear_schedule(100, 1e-3, 0.2);
  DenoiserParams p = init_params(2, {8, 8}, 4, 21, 100);
  Vec x{0.4, -0.7};
};

FeatureSpec families(bool loss, bool grad_x, bool grad_theta) {
  FeatureSpec s;
  s.use_loss = loss;
  s.use_grad_x = grad_x;
  s.use_grad_theta = grad_theta;
  return s;
}

std::filesystem::path temp_file(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / "trajfx_feature_tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST(TimestepPlan, Resolve) {
  EXPECT_EQ(TimestepPlan::full().resolve(5), (std::vector<int>{0, 1, 2, 3, 4}));
  EXPECT_EQ(TimestepPlan::strided(4).resolve(10), (std::vector<int>{0, 4, 8}));
  EXPECT_EQ(TimestepPlan::strided(3, 1).resolve(10), (std::vector<int>{1, 4, 7}));
  EXPECT_EQ(TimestepPlan::window(2, 5).resolve(10), (std::vector<int>{2, 3, 4}));
  EXPECT_EQ(TimestepPlan::explicit_steps({7, 1, 3}).resolve(10), (std::vector<int>{1, 3, 7}));
  EXPECT_THROW(TimestepPlan::window(5, 5).resolve(10), IndexError);
  EXPECT_THROW(TimestepPlan::window(0, 11).resolve(10), IndexError);
  EXPECT_THROW(TimestepPlan::explicit_steps({1, 1}).resolve(10), ParameterError);
  EXPECT_THROW(TimestepPlan::explicit_steps({10}).resolve(10), IndexError);
  EXPECT_THROW(TimestepPlan::explicit_steps({}).resolve(10), ParameterError);
  EXPECT_THROW(TimestepPlan::strided(0).resolve(10), ParameterError);
}

TEST(FeatureSpec, Validation) {
  FeatureSpec none = families(false, false, false);
  EXPECT_THROW(none.validate(), ParameterError);
  none.gsa = GsaConfig{};
  EXPECT_NO_THROW(none.validate());
  FeatureSpec bad_p;
  bad_p.pia_norm_p = 0.0;
  EXPECT_THROW(bad_p.validate(), ParameterError);
}

TEST(ExtractFeatures, FullPlanLengthAndOrder) {
  Fixture f;
  const auto v = extract_features(f.p, f.s, f.x, TimestepPlan::full(), FeatureSpec{}, 1, 42);
  EXPECT_EQ(v.values.size(), 300u);
  // Columns follow (t ascending) x (L, gx, gw).
  const Vec eps = CounterRng(1, StreamDomain::kForwardNoise, 42, 17).normal_vector(2);
  const GradBundle g = loss_and_grads(f.p, f.x, 17, eps, f.s, true, true);
  EXPECT_EQ(v.values[17 * 3 + 0], g.loss);
  EXPECT_EQ(v.values[17 * 3 + 1], squared_norm(*g.grad_x));
  EXPECT_EQ(v.values[17 * 3 + 2], squared_norm(*g.grad_theta));
  const auto names = feature_layout(TimestepPlan::full().resolve(100), FeatureSpec{});
  EXPECT_EQ(names[51], "L@17");
  EXPECT_EQ(names[53], "gw@17");
}

TEST(ExtractFeatures, ZeroResidualGivesZeroLoss) {
  const auto s = make_linear_schedule(10, 1e-3, 0.2);
  auto p = DenoiserParams::zeros(2, std::vector<int>{3}, 2, 10);
  const std::uint64_t seed = 5, id = 77;
  const int k = 4;
  const Vec eps = CounterRng(seed, StreamDomain::kForwardNoise, id, k).normal_vector(2);
  p.bias(1)[0] = eps[0];
  p.bias(1)[1] = eps[1];
  const auto v = extract_features(p, s, Vec{1.0, 1.0}, TimestepPlan::explicit_steps({k}), FeatureSpec::loss_only(),
                                  seed, id);
  EXPECT_EQ(v.values, (Vec{0.0}));
}

TEST(ExtractFeatures, ReproducibleAndSeedDependent) {
  Fixture f;
  const auto a = extract_features(f.p, f.s, f.x, TimestepPlan::strided(7), FeatureSpec{}, 3, 9);
  const auto b = extract_features(f.p, f.s, f.x, TimestepPlan::strided(7), FeatureSpec{}, 3, 9);
  const auto c = extract_features(f.p, f.s, f.x, TimestepPlan::strided(7), FeatureSpec{}, 4, 9);
  EXPECT_EQ(a, b);
  EXPECT_NE(a.values, c.values);
}

TEST(ExtractFeatures, PiaModeIsSeedIndependent) {
  Fixture f;
  FeatureSpec spec;
  spec.pia_mode = true;
  const auto a = extract_features(f.p, f.s, f.x, TimestepPlan::full(), spec, 1, 9);
  const auto b = extract_features(f.p, f.s, f.x, TimestepPlan::full(), spec, 987654321, 9);
  EXPECT_EQ(a.values, b.values);
  const Vec eps = predict_eps(f.p, f.x, 0);
  EXPECT_EQ(a.values[3 * 40], loss_and_grads(f.p, f.x, 40, eps, f.s, false, false).loss);
}

TEST(ExtractFeatures, PiaNormOrder) {
  Fixture f;
  FeatureSpec spec = FeatureSpec::loss_only();
  spec.pia_mode = true;
  spec.pia_norm_p = 1.0;
  const auto v = extract_features(f.p, f.s, f.x, TimestepPlan::explicit_steps({30}), spec, 1, 1);
  const Vec eps = predict_eps(f.p, f.x, 0);
  const Vec out = predict_eps(f.p, forward_diffuse(f.s, f.x, 30, eps), 30);
  EXPECT_NEAR(v.values[0], std::abs(out[0] - eps[0]) + std::abs(out[1] - eps[1]), 1e-15);
}

TEST(ExtractFeatures, RepeatsAverageDistinctDraws) {
  Fixture f;
  FeatureSpec spec = FeatureSpec::loss_only();
  spec.repeats = 3;
  const auto v = extract_features(f.p, f.s, f.x, TimestepPlan::explicit_steps({12}), spec, 8, 5);
  double want = 0.0;
  for (int r = 0; r < 3; ++r) {
    const Vec eps = CounterRng(8, StreamDomain::kForwardNoise, 5, 12 + r * 100).normal_vector(2);
    want += loss_and_grads(f.p, f.x, 12, eps, f.s, false, false).loss;
  }
  EXPECT_NEAR(v.values[0], want / 3.0, 1e-14);
}

TEST(ExtractFeatures, RejectsWrongDimensionAndNetMismatch) {
  Fixture f;
  EXPECT_THROW(extract_features(f.p, f.s, Vec{1.0}, TimestepPlan::full(), {}, 1, 1), ParameterError);
  const auto other = make_linear_schedule(50, 1e-3, 0.2);
  EXPECT_THROW(extract_features(f.p, other, f.x, TimestepPlan::full(), {}, 1, 1), ContractError);
}

TEST(ExtractFeatures, HashBindsPlanAndSpec) {
  Fixture f;
  const auto a = feature_spec_hash(TimestepPlan::full(), FeatureSpec{}, f.s, f.p);
  EXPECT_NE(a, feature_spec_hash(TimestepPlan::strided(2), FeatureSpec{}, f.s, f.p));
  EXPECT_NE(a, feature_spec_hash(TimestepPlan::full(), FeatureSpec::loss_only(), f.s, f.p));
  EXPECT_NE(a, feature_spec_hash(TimestepPlan::full(), FeatureSpec{}, make_linear_schedule(100, 1e-3, 0.1), f.p));
  EXPECT_NE(a, feature_spec_hash(TimestepPlan::full(), FeatureSpec{}, f.s, init_params(2, {8, 9}, 4, 21, 100)));
  EXPECT_EQ(a, feature_spec_hash(TimestepPlan::full(), FeatureSpec{}, f.s, init_params(2, {8, 8}, 4, 99, 100)));
}

TEST(Gsa, SingleGroupSingleStepEqualsGradNorm) {
  Fixture f;
  GsaConfig g;
  g.mode = GsaMode::kGsa2;
  g.groups = {{0, 1, 2}};
  g.subsample = {25};
  const Vec agg = extract_gsa(f.p, f.s, f.x, g, 4, 6);
  const Vec eps = CounterRng(4, StreamDomain::kForwardNoise, 6, 25).normal_vector(2);
  EXPECT_NEAR(agg[0], squared_norm(*loss_and_grads(f.p, f.x, 25, eps, f.s, false, true).grad_theta), 1e-12);
}

TEST(Gsa, Gsa2DominatesGsa1) {
  Fixture f;
  std::mt19937_64 gen(3);
  std::normal_distribution<double> nd;
  for (int rep = 0; rep < 10; ++rep) {
    const Vec x{nd(gen), nd(gen)};
    GsaConfig g1, g2;
    g1.mode = GsaMode::kGsa1;
    g2.mode = GsaMode::kGsa2;
    const Vec a = extract_gsa(f.p, f.s, x, g1, rep, rep);
    const Vec b = extract_gsa(f.p, f.s, x, g2, rep, rep);
    ASSERT_EQ(a.size(), f.p.num_layers());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_LE(a[i], b[i] * (1.0 + 1e-12));
  }
}

TEST(Gsa, Gsa1IsNormOfMeanGradient) {
  Fixture f;
  GsaConfig g;
  g.mode = GsaMode::kGsa1;
  g.groups = {{0}, {1, 2}};
  g.subsample = {5, 50};
  const Vec agg = extract_gsa(f.p, f.s, f.x, g, 2, 3);
  Vec mean(f.p.param_count(), 0.0);
  for (int t : {5, 50}) {
    const Vec eps = CounterRng(2, StreamDomain::kForwardNoise, 3, t).normal_vector(2);
    const Vec gt = *loss_and_grads(f.p, f.x, t, eps, f.s, false, true).grad_theta;
    for (std::size_t j = 0; j < gt.size(); ++j) mean[j] += 0.5 * gt[j];
  }
  const auto& L0 = f.p.layers[0];
  double g0 = 0.0, g12 = 0.0;
  for (std::size_t j = 0; j < mean.size(); ++j) (j < L0.size() ? g0 : g12) += mean[j] * mean[j];
  EXPECT_NEAR(agg[0], g0, 1e-12 * g0);
  EXPECT_NEAR(agg[1], g12, 1e-12 * g12);
}

TEST(Gsa, OppositeGradientsCancel) {
  // A single affine layer with zero weight: d/db = 2 (b - eps) cancels across
  // the two steps, d/dw = 2 (b - eps) x_t does not.
  const auto s = make_linear_schedule(10, 1e-3, 0.2);
  auto p = DenoiserParams::zeros(1, std::vector<int>{}, 0, 10);
  const Vec e3 = CounterRng(1, StreamDomain::kForwardNoise, 0, 3).normal_vector(1);
  const Vec e7 = CounterRng(1, StreamDomain::kForwardNoise, 0, 7).normal_vector(1);
  p.bias(0)[0] = 0.5 * (e3[0] + e7[0]);  // b - e3 = -(b - e7)
  GsaConfig g;
  g.mode = GsaMode::kGsa1;
  g.subsample = {3, 7};
  const Vec agg = extract_gsa(p, s, Vec{0.0}, g, 1, 0);
  const double w = (e3[0] - e7[0]) * (-std::sqrt(1.0 - s.alpha_bars[3]) * e3[0] + std::sqrt(1.0 - s.alpha_bars[7]) * e7[0]) / 2.0;
  EXPECT_NEAR(agg[0], w * w, 1e-12);
}

TEST(Gsa, ConfigValidation) {
  GsaConfig g;
  g.groups = {{0}, {0, 1}};
  EXPECT_THROW(g.resolved_groups(2), ParameterError);
  g.groups = {{0}};
  EXPECT_THROW(g.resolved_groups(2), ParameterError);
  g.groups = {{}};
  EXPECT_THROW(g.resolved_groups(1), ParameterError);
  GsaConfig d;
  EXPECT_EQ(d.resolved_subsample(100).size(), 10u);
  EXPECT_EQ(d.resolved_subsample(100).front(), 0);
  EXPECT_EQ(d.resolved_subsample(100).back(), 99);
}

TEST(ColumnSelection, MatchesDirectExtraction) {
  Fixture f;
  const auto full = extract_features(f.p, f.s, f.x, TimestepPlan::full(), FeatureSpec{}, 6, 11);
  const auto steps = TimestepPlan::full().resolve(100);
  for (const auto& [plan, spec] : {std::pair{TimestepPlan::strided(4), FeatureSpec::loss_only()},
                                   std::pair{TimestepPlan::window(10, 20), families(false, true, true)},
                                   std::pair{TimestepPlan::explicit_steps({0, 99}), families(true, false, true)}}) {
    const auto want = extract_features(f.p, f.s, f.x, plan, spec, 6, 11);
    const auto cols = feature_columns(steps, FeatureSpec{}, plan.resolve(100), spec);
    const auto got = select_columns(std::vector{full}, cols, want.spec_hash);
    EXPECT_EQ(got[0], want);
  }
  FeatureSpec pia;
  pia.pia_mode = true;
  EXPECT_THROW(feature_columns(steps, FeatureSpec{}, steps, pia), ContractError);
}

TEST(Normalize, Examples) {
  const std::vector<TrajectoryFeatureVector> one{{1, 0, {3.0, -1.0}, 7}};
  const auto s1 = normalize_fit(one);
  EXPECT_EQ(s1.mean, (Vec{3.0, -1.0}));
  EXPECT_EQ(s1.std, (Vec{NormStats::kStdFloor, NormStats::kStdFloor}));

  const std::vector<TrajectoryFeatureVector> two{{1, 0, {0.0}, 7}, {2, 0, {2.0}, 7}};
  const auto s2 = normalize_fit(two);
  EXPECT_EQ(s2.mean, (Vec{1.0}));
  EXPECT_EQ(s2.std, (Vec{1.0}));
  EXPECT_EQ(normalize_apply(s2, TrajectoryFeatureVector{3, 0, {1.0}, 7}).values, (Vec{0.0}));

  NormStats id;
  id.mean = {0.0, 0.0};
  id.std = {1.0, 1.0};
  EXPECT_EQ(normalize_apply(id, one[0]).values, one[0].values);
  EXPECT_THROW(normalize_apply(id, two[0]), ContractError);

  const std::vector<TrajectoryFeatureVector> mixed{{1, 0, {0.0}, 7}, {2, 0, {2.0}, 8}};
  EXPECT_THROW(normalize_fit(mixed), ContractError);
  EXPECT_THROW(normalize_fit(std::vector<TrajectoryFeatureVector>{}), ContractError);
}

TEST(Normalize, StandardizesTrainingSet) {
  std::mt19937_64 g(8);
  std::normal_distribution<double> nd(3.0, 2.5);
  std::vector<TrajectoryFeatureVector> set;
  for (int i = 0; i < 200; ++i) set.push_back({static_cast<std::uint64_t>(i), 0, {nd(g), 5.0, nd(g) * 1e-6}, 1});
  const auto st = normalize_fit(set);
  for (std::size_t j : {0u, 2u}) {
    double m = 0.0, v = 0.0;
    for (const auto& f : set) m += normalize_apply(st, f).values[j];
    m /= set.size();
    for (const auto& f : set) v += std::pow(normalize_apply(st, f).values[j] - m, 2);
    v /= set.size();
    EXPECT_NEAR(m, 0.0, 1e-9);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
  for (const auto& f : set) EXPECT_EQ(normalize_apply(st, f).values[1], 0.0);
}

TEST(FeatureCache, RoundTripIsBitwise) {
  Fixture f;
  std::vector<TrajectoryFeatureVector> vs;
  for (int i = 0; i < 5; ++i)
    vs.push_back(extract_features(f.p, f.s, Vec{0.1 * i, -0.2 * i}, TimestepPlan::strided(10), {}, 2, 100 + i, i % 3));
  CacheManifest m;
  m.plan = "strided(10,0)";
  m.spec = FeatureSpec{}.describe();
  m.spec_hash = vs[0].spec_hash;
  const auto path = temp_file("round.csv");
  cache_write(path, vs, m);
  EXPECT_EQ(cache_read(path, vs[0].spec_hash), vs);
  EXPECT_THROW(cache_read(path, vs[0].spec_hash ^ 1), StaleCacheError);

  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  EXPECT_EQ(header.substr(0, 25), "sample_id,label,spec_hash");
}

TEST(FeatureCache, EmptyAndMalformed) {
  CacheManifest m;
  m.spec_hash = 0xabc;
  m.dim = 3;
  const auto path = temp_file("empty.csv");
  cache_write(path, std::vector<TrajectoryFeatureVector>{}, m);
  EXPECT_TRUE(cache_read(path, 0xabc).empty());

  const auto bad = temp_file("bad.csv");
  std::vector<TrajectoryFeatureVector> one{{1, 0, {1.0, 2.0}, 0xabc}};
  m.dim = 2;
  cache_write(bad, one, m);
  {
    std::ofstream os(bad, std::ios::app);
    os << "2,0,abc,1.0\n";
  }
  EXPECT_THROW(cache_read(bad, 0xabc), FormatError);
  EXPECT_THROW(cache_read(temp_file("missing.csv"), 0xabc), FormatError);
}
