// Runs every acceptance criterion and prints one PASS/FAIL line per criterion.
// Exit status is nonzero if a criterion fails that is not listed with
// --known-failure.

#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "oracles.hpp"
#include "trajfx/checkpoint.hpp"
#include "trajfx/config.hpp"
#include "trajfx/experiment.hpp"
#include "trajfx/metrics.hpp"
#include "trajfx/optim.hpp"

using namespace trajfx;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
  int id = 0;
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << std::fixed << v;
  return os.str();
}

Vec randn(std::mt19937_64& g, std::size_t n, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  Vec v(n);
  for (double& x : v) x = nd(g);
  return v;
}

Outcome gradients() {
  const auto t0 = Clock::now();
  std::mt19937_64 g(2024);
  double worst = -1e300;
  std::size_t coords = 0;
  const int instances = 24;
  for (int rep = 0; rep < instances; ++rep) {
    const int T = rep % 2 ? 100 : 20;
    const auto s = make_linear_schedule(T, 1e-3, 0.2);
    const int dim = 1 + rep % 4;
    const std::vector<int> widths = rep % 3 == 0 ? std::vector<int>{8} : std::vector<int>{6, 5};
    const auto p = init_params(dim, std::span<const int>(widths), 4, 700 + rep, T);
    const Vec x = randn(g, dim, 1.5), eps = randn(g, dim);
    const int t = (rep * 37) % T;
    const GradBundle gb = loss_and_grads(p, x, t, eps, s, true, true);
    const auto fd = oracle::finite_difference_check(p, x, t, eps, s, *gb.grad_x, *gb.grad_theta);
    worst = std::max(worst, fd.worst_excess);
    coords += fd.coords;
  }
  const double dt = seconds_since(t0);
  return {1, worst <= 0.0 && dt < 10.0,
          std::to_string(instances) + " instances, " + std::to_string(coords) + " coordinates, worst excess over tolerance " +
              fmt(worst, 9) + ", " + fmt(dt, 2) + " s"};
}

Outcome marginals() {
  const auto t0 = Clock::now();
  const auto s = make_linear_schedule(100, 1e-3, 0.2);
  const std::vector<std::pair<Vec, int>> cases = {
      {{1.0, -1.0}, 0}, {{0.3, 2.0}, 10}, {{-1.5, 0.5, 1.0}, 50}, {{4.0}, 90}, {{0.0, 0.0}, 99}};
  const int n = 10000;
  double worst_z = 0.0;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    const auto& [x, t] = cases[c];
    const double ab = s.alpha_bars[t];
    std::vector<Vec> draws(n);
    for (int i = 0; i < n; ++i)
      draws[i] = forward_diffuse(s, x, t, CounterRng(900 + c, StreamDomain::kForwardNoise, i).normal_vector(x.size()));
    for (std::size_t d = 0; d < x.size(); ++d) {
      double sum = 0.0, sum2 = 0.0;
      for (const Vec& v : draws) sum += v[d], sum2 += v[d] * v[d];
      const double mean = sum / n;
      const double var = (sum2 - n * mean * mean) / (n - 1);
      const double want_var = 1.0 - ab;
      worst_z = std::max(worst_z, std::abs(mean - std::sqrt(ab) * x[d]) / std::sqrt(want_var / n));
      worst_z = std::max(worst_z, std::abs(var - want_var) / (want_var * std::sqrt(2.0 / (n - 1))));
    }
  }
  const double dt = seconds_since(t0);
  return {2, worst_z <= 4.0 && dt < 10.0,
          "5 configurations x 1e4 draws, largest deviation " + fmt(worst_z, 2) + " SE, " + fmt(dt, 2) + " s"};
}

Outcome metric_oracles() {
  const auto t0 = Clock::now();
  std::mt19937_64 g(77);
  std::uniform_int_distribution<std::size_t> size(2, 1000);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    Vec s;
    std::vector<int> y;
    oracle::random_scores(g, rep == 0 ? 1000 : size(g), s, y);
    worst = std::max(worst, std::abs(roc_auc(s, y) - oracle::pairwise_auc(s, y)));
    worst = std::max(worst, std::abs(tpr_at_fpr(s, y, 0.01) - oracle::exhaustive_tpr_at_fpr(s, y, 0.01)));
  }
  const double dt = seconds_since(t0);
  return {3, worst <= 1e-12 && dt < 30.0, "100 score sets, max |diff| " + fmt(worst, 15) + ", " + fmt(dt, 2) + " s"};
}

Outcome optimizer_values() {
  std::vector<std::string> bad;
  {
    Vec th{1.0};
    AdamWState st(1, AdamWHyper{0.1, 0.9, 0.999, 1e-8, 0.0});
    adamw_step(th, Vec{1.0}, st);
    // m = (1 - b1) g, v = (1 - b2) g^2; both bias corrections give exactly 1.
    if (std::abs(th[0] - (1.0 - 0.1 / (1.0 + 1e-8))) > 1e-15 || st.m[0] != (1.0 - 0.9) * 1.0 ||
        st.v[0] != (1.0 - 0.999) * 1.0)
      bad.push_back("adam scalar step");
  }
  {
    Vec th{1.0, -2.0};
    AdamWState st(2, AdamWHyper{0.01, 0.9, 0.999, 1e-8, 10.0});
    adamw_step(th, Vec{0.0, 0.0}, st);
    if (th != Vec{1.0 * (1.0 - 0.1), -2.0 * (1.0 - 0.1)}) bad.push_back("pure decay");
  }
  {
    Vec a{2.0}, b{2.0};
    AdamWState sa(1, AdamWHyper{0.05, 0.9, 0.999, 1e-8, 0.0});
    AdamWState sb(1, AdamWHyper{0.05, 0.9, 0.999, 1e-8, 3.0});
    adamw_step(a, Vec{0.5}, sa);
    adamw_step(b, Vec{0.5}, sb);
    if (sa.m != sb.m || sa.v != sb.v || std::abs(b[0] - (a[0] - 0.3)) > 1e-15) bad.push_back("decoupled decay");
  }
  const TrainConfig c = classifier_train_config();
  const double lr5 = step_lr(c.lr, 5, c.sched_step_epochs, c.sched_gamma);
  if (std::abs(lr5 - 8e-4) > 1e-18) bad.push_back("step lr");
  if (step_lr(c.lr, 4, c.sched_step_epochs, c.sched_gamma) != 1e-3) bad.push_back("step lr before first drop");
  std::string detail = "StepLR(epoch 5) = " + fmt(lr5, 6);
  for (const auto& b : bad) detail += "; mismatch: " + b;
  return {4, bad.empty(), detail};
}

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

/// Data, DDPM training, sampling, features and the OA attack from scratch;
/// returns the bytes of the written report.json.
std::string oa_report(const ExperimentConfig& cfg, const fs::path& dir) {
  Experiment exp(cfg, 1);
  Artifacts out;
  nlohmann::ordered_json j = report_header(exp);
  j["ddpm"] = ddpm_summary(exp);
  j["oa"] = run_oa(exp, out);
  fs::create_directories(dir);
  std::ofstream(dir / "report.json", std::ios::binary) << j.dump(2) << "\n";
  return read_file(dir / "report.json");
}

bool same_bits(const FeatureSet& a, const FeatureSet& b) {
  if (a.by_split.size() != b.by_split.size()) return false;
  for (const auto& [name, va] : a.by_split) {
    const auto& vb = b.at(name);
    if (va.size() != vb.size()) return false;
    for (std::size_t i = 0; i < va.size(); ++i)
      if (va[i].values.size() != vb[i].values.size() ||
          std::memcmp(va[i].values.data(), vb[i].values.data(), va[i].values.size() * sizeof(double)) != 0)
        return false;
  }
  return true;
}

Outcome determinism(const fs::path& work) {
  const auto t0 = Clock::now();
  ExperimentConfig cfg = preset("smoke");
  cfg.task = Task::kOa;
  const std::string a = oa_report(cfg, work / "determinism_a");
  const std::string b = oa_report(cfg, work / "determinism_b");

  Experiment e1(cfg, 1);
  ExperimentConfig other = cfg;
  other.seeds.features = cfg.seeds.features + 1000;
  Experiment e2(other, 1);
  e2.set_net(e1.net());
  e2.set_foreign_net(e1.foreign_net());
  const bool pia_same = same_bits(e1.pia_features(), e2.pia_features());
  const bool drawn_differs = !same_bits(e1.base_features(), e2.base_features());
  const double dt = seconds_since(t0);
  return {5, a == b && pia_same && drawn_differs,
          std::string("report.json ") + (a == b ? "identical" : "differs") + " (" + std::to_string(a.size()) +
              " bytes); PIA features across noise seeds " + (pia_same ? "identical" : "differ") +
              "; drawn-noise features " + (drawn_differs ? "change with the seed" : "do not change") + ", " + fmt(dt, 1) +
              " s"};
}

double method_auc(const nlohmann::ordered_json& mia, const std::string& name) {
  for (const auto& m : mia["methods"])
    if (m["method"] == name) return m["auc"].get<double>();
  throw std::runtime_error("method " + name + " missing from report");
}

std::vector<Outcome> overfit_criteria(const fs::path& work, const std::set<int>& only,
                                      nlohmann::ordered_json& record) {
  const auto t0 = Clock::now();
  Experiment exp(preset("overfit"), 1);
  Artifacts out;
  std::vector<Outcome> r;
  auto want = [&](int id) { return only.empty() || only.count(id) > 0; };

  const auto thr = run_threshold_on_belonging(exp, out);
  record["threshold_on_belonging"] = thr;
  const auto& ord = thr["loss_ordering"];
  const double frac = ord["longest_run_fraction"].get<double>();

  std::optional<nlohmann::ordered_json> mia, oa, plans;
  std::vector<AblationRow> rows;
  if (want(8)) record["mia"] = *(mia = run_mia(exp, out));
  if (want(9)) record["plan_study"] = *(plans = run_plan_study(exp, out));
  if (want(10)) rows = run_ablation_rows(exp, ablation_grid(exp.config().features));
  if (want(11) || want(13)) record["oa"] = *(oa = run_oa(exp, out));
  const double dt = seconds_since(t0);
  record["pipeline_seconds"] = dt;

  r.push_back({6, frac >= 0.3 && dt < 600.0,
               "longest ordered run covers " + fmt(frac, 3) + " of t (from t=" +
                   std::to_string(ord["longest_run_start"].get<int>()) + ", length " +
                   std::to_string(ord["longest_run_length"].get<int>()) + "), pipeline " + fmt(dt, 1) + " s"});
  const double gap = thr["fpr_gap"].get<double>();
  r.push_back({7, gap > 0.1,
               "FPR belonging " + fmt(thr["fpr_belonging_eval"].get<double>(), 3) + " vs external " +
                   fmt(thr["fpr_external_eval"].get<double>(), 3) + ", gap " + fmt(gap, 3)});
  if (mia) {
    const double loss = method_auc(*mia, "trajectory_loss"), single = method_auc(*mia, "threshold"),
                 full = method_auc(*mia, "trajectory");
    r.push_back({8, loss - single >= 0.03 && full - loss >= -0.01 && full > loss,
                 "loss trajectory AUC " + fmt(loss) + " vs single-t threshold " + fmt(single) + " (+" +
                     fmt(loss - single) + "); with gradients " + fmt(full)});
  }
  if (plans) {
    const auto& m = (*plans)["method"];
    const double s = m["strided_auc"].get<double>(), w = m["best_window_auc"].get<double>();
    r.push_back({9, s >= w - 0.02, "strided AUC " + fmt(s) + " vs best window " + fmt(w)});
  }
  if (!rows.empty()) {
    auto check = [&](bool pia, std::string& detail) {
      double combined = NAN, best_single = -1.0;
      for (const auto& row : rows) {
        if (row.pia != pia) continue;
        const int n = row.loss + row.grad_x + row.grad_theta;
        if (n == 3) combined = row.report.auc;
        if (n == 1) best_single = std::max(best_single, row.report.auc);
        if (n == 1 || n == 3)
          detail += std::string(row.loss ? "L" : "") + (row.grad_x ? "X" : "") + (row.grad_theta ? "W" : "") + "=" +
                    fmt(row.report.auc) + " ";
      }
      return combined >= best_single;
    };
    std::string drawn, pia;
    const bool ok = check(false, drawn);
    const bool pia_ok = check(true, pia);
    r.push_back({10, ok, "drawn noise: " + drawn + "| PIA mode (" + (pia_ok ? "holds" : "fails") + "): " + pia});
    nlohmann::ordered_json a = nlohmann::ordered_json::array();
    for (const auto& row : rows)
      a.push_back({{"pia", row.pia}, {"loss", row.loss}, {"grad_x", row.grad_x}, {"grad_theta", row.grad_theta},
                   {"auc", row.report.auc}});
    record["ablation"] = a;
  }
  if (oa && want(11)) {
    const double a = (*oa)["report"]["asr"].get<double>(), u = (*oa)["uniform_feature_control_asr"].get<double>();
    r.push_back({11, a > 1.0 / 3 + 0.1 && std::abs(u - 1.0 / 3) <= 0.05,
                 "3-class balanced accuracy " + fmt(a) + ", uniform control " + fmt(u)});
  }
  if (oa && want(13)) {
    const auto& f = (*oa)["filter"];
    const bool have = !f["flagged_median_nn_distance"].is_null() && !f["unflagged_median_nn_distance"].is_null();
    const double fm = have ? f["flagged_median_nn_distance"].get<double>() : NAN;
    const double um = have ? f["unflagged_median_nn_distance"].get<double>() : NAN;
    r.push_back({13, have && fm < um,
                 std::to_string(f["flagged"].get<std::size_t>()) + " flagged, median NN distance " + fmt(fm) +
                     " vs unflagged " + fmt(um)});
  }
  std::ofstream(work / "overfit_losses_per_t.csv") << out["losses_per_t.csv"];
  return r;
}

Outcome class_probe(nlohmann::ordered_json& record) {
  const auto t0 = Clock::now();
  Experiment exp(preset("probe"), 1);
  Artifacts out;
  const auto j = run_class_probe(exp, out);
  record["class_probe"] = j;
  const double chance = j["chance"].get<double>(), all = j["all_features_accuracy"].get<double>(),
               shuf = j["shuffled_label_accuracy"].get<double>();
  return {12, all > chance + 0.1 && std::abs(shuf - chance) <= 0.05,
          "probe accuracy " + fmt(all) + ", shuffled-label control " + fmt(shuf) + ", chance " + fmt(chance, 2) + ", " +
              fmt(seconds_since(t0), 1) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trajfx acceptance checks"};
  std::string work = "acceptance_work";
  std::vector<int> only, known;
  app.add_option("--work", work, "Directory for intermediate files");
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--known-failure", known, "Criteria whose failure does not fail the run");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  const std::set<int> sel(only.begin(), only.end()), expected(known.begin(), known.end());
  auto want = [&](int id) { return sel.empty() || sel.count(id) > 0; };

  std::vector<Outcome> results;
  nlohmann::ordered_json record;
  auto emit = [&](Outcome o) {
    std::cout << "criterion " << o.id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    results.push_back(std::move(o));
  };
  try {
    if (want(1)) emit(gradients());
    if (want(2)) emit(marginals());
    if (want(3)) emit(metric_oracles());
    if (want(4)) emit(optimizer_values());
    if (want(5)) emit(determinism(work));
    std::vector<Outcome> rest;
    if (want(6) || want(7) || want(8) || want(9) || want(10) || want(11) || want(13))
      for (auto& o : overfit_criteria(work, sel, record))
        if (want(o.id)) rest.push_back(std::move(o));
    if (want(12)) rest.push_back(class_probe(record));
    std::sort(rest.begin(), rest.end(), [](const Outcome& a, const Outcome& b) { return a.id < b.id; });
    for (auto& o : rest) emit(std::move(o));
  } catch (const std::exception& e) {
    std::cout << "error: " << e.what() << std::endl;
    return 1;
  }

  nlohmann::ordered_json summary = nlohmann::ordered_json::array();
  int unexpected = 0;
  for (const auto& o : results) {
    summary.push_back({{"criterion", o.id}, {"pass", o.pass}, {"detail", o.detail}});
    if (!o.pass && !expected.count(o.id)) ++unexpected;
    if (!o.pass && expected.count(o.id)) std::cout << "criterion " << o.id << " failure is listed as known" << std::endl;
  }
  record["criteria"] = summary;
  std::ofstream(fs::path(work) / "acceptance.json") << record.dump(2) << "\n";
  std::cout << results.size() - std::count_if(results.begin(), results.end(), [](const Outcome& o) { return !o.pass; })
            << "/" << results.size() << " criteria passed" << std::endl;
  return unexpected == 0 ? 0 : 1;
}
