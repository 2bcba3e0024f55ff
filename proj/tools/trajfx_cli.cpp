// trajfx: staged command-line driver. Every stage reads what earlier stages
// left in --out and writes its own artifacts there.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "trajfx/experiment.hpp"

namespace fs = std::filesystem;
using namespace trajfx;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kStale = 4 };

struct Options {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out = "trajfx_out";
  unsigned workers = 1;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + p.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  detail::write_atomically(p, text);
}

// --config, then --preset, then the config saved by an earlier stage.
ExperimentConfig resolve_config(const Options& o) {
  ExperimentConfig c;
  const fs::path saved = fs::path(o.out) / "config.json";
  if (!o.config.empty())
    c = parse_config(slurp(o.config));
  else if (!o.preset.empty())
    c = preset(o.preset);
  else if (fs::exists(saved))
    c = parse_config(slurp(saved));
  else
    c = preset("default");
  if (o.seed) c.seeds = SeedConfig::from_base(*o.seed);
  c.validate();
  return c;
}

const std::vector<std::string> kRealSplits = {"member_train", "member_eval", "holdout", "external_train",
                                              "external_eval"};
const std::vector<std::string> kGeneratedSplits = {"belonging_train", "belonging_eval", "foreign_ddim",
                                                   "foreign_net"};

LabeledSet* bundle_split(DatasetBundle& b, const std::string& name) {
  std::map<std::string, LabeledSet*> m = {
      {"member_train", &b.member_train},       {"member_eval", &b.member_eval},
      {"holdout", &b.holdout},                 {"external_train", &b.external_train},
      {"external_eval", &b.external_eval},     {"belonging_train", &b.belonging_train},
      {"belonging_eval", &b.belonging_eval},   {"foreign_ddim", &b.foreign_ddim},
      {"foreign_net", &b.foreign_net}};
  return m.at(name);
}

class Workspace {
 public:
  explicit Workspace(const Options& o) : dir_(o.out), exp_(resolve_config(o), o.workers) {
    fs::create_directories(dir_);
    write_text(dir_ / "config.json", to_json(exp_.config()).dump(2) + "\n");
  }

  Experiment& exp() { return exp_; }
  const fs::path& dir() const { return dir_; }
  fs::path data_dir() const { return dir_ / "data"; }
  fs::path net_path() const { return dir_ / "ddpm.bin"; }
  fs::path foreign_path() const { return dir_ / "ddpm_foreign.bin"; }
  fs::path features_path() const { return dir_ / "features.csv"; }

  /// Pulls in whatever earlier stages produced; missing pieces are computed on demand.
  void load(bool need_net) {
    if (fs::exists(data_dir() / "member_train.csv")) {
      DatasetBundle b;
      for (const auto& name : kRealSplits) *bundle_split(b, name) = read_set_csv(data_dir() / (name + ".csv"), name);
      bool have_generated = true;
      for (const auto& name : kGeneratedSplits) have_generated = have_generated && fs::exists(data_dir() / (name + ".csv"));
      if (have_generated)
        for (const auto& name : kGeneratedSplits)
          *bundle_split(b, name) = read_set_csv(data_dir() / (name + ".csv"), name);
      const DatasetBundle fresh = gen_data(exp_.config().mixture, exp_.config().counts, exp_.config().seeds.data);
      if (b.member_train.ids != fresh.member_train.ids || b.external_eval.ids != fresh.external_eval.ids)
        throw StaleCacheError("datasets in " + data_dir().string() + " do not match the config; rerun gen-data");
      exp_.set_data(std::move(b));
    }
    if (fs::exists(net_path())) exp_.set_net(load_checkpoint(net_path()));
    else if (need_net) throw PipelineError("missing checkpoint " + net_path().string() + "; run train-ddpm first");
    if (fs::exists(foreign_path())) exp_.set_foreign_net(load_checkpoint(foreign_path()));
  }

  void save_sets(const std::vector<std::string>& names) {
    fs::create_directories(data_dir());
    for (const auto& name : names) write_set_csv(data_dir() / (name + ".csv"), exp_.split(name));
  }

  void save_artifacts(const Artifacts& a) {
    for (const auto& [name, text] : a) write_text(dir_ / name, text);
  }

  void save_report(const nlohmann::ordered_json& body) {
    nlohmann::ordered_json j = report_header(exp_);
    for (const auto& [k, v] : body.items()) j[k] = v;
    write_text(dir_ / "report.json", j.dump(2) + "\n");
  }

 private:
  fs::path dir_;
  Experiment exp_;
};

std::string history_csv(const std::vector<EpochRecord>& h) {
  std::ostringstream os;
  write_loss_history_csv(os, h);
  return os.str();
}

int cmd_gen_data(const Options& o) {
  Workspace w(o);
  w.save_sets(kRealSplits);
  std::cout << "wrote datasets to " << w.data_dir() << "\n";
  return kOk;
}

int cmd_train_ddpm(const Options& o) {
  Workspace w(o);
  w.load(false);
  Experiment& e = w.exp();
  w.save_sets(kRealSplits);
  save_checkpoint(w.net_path(), e.net());
  save_checkpoint(w.foreign_path(), e.foreign_net());
  if (!e.ddpm_history().empty()) write_text(w.dir() / "ddpm_loss.csv", history_csv(e.ddpm_history()));
  if (!e.foreign_history().empty()) write_text(w.dir() / "ddpm_foreign_loss.csv", history_csv(e.foreign_history()));
  std::cout << "checkpoint " << w.net_path() << " (" << e.net().arch_string() << ")\n";
  return kOk;
}

int cmd_sample(const Options& o) {
  Workspace w(o);
  w.load(true);
  w.exp().ensure_samples();
  w.save_sets(kGeneratedSplits);
  std::cout << "wrote generated sets to " << w.data_dir() << "\n";
  return kOk;
}

int cmd_extract(const Options& o) {
  Workspace w(o);
  w.load(true);
  Experiment& e = w.exp();
  const FeatureSet f = e.method_features();
  std::vector<TrajectoryFeatureVector> rows;
  for (const auto& name : split_names()) rows.insert(rows.end(), f.at(name).begin(), f.at(name).end());
  CacheManifest m;
  m.plan = f.plan.describe();
  m.spec = f.spec.describe();
  m.schedule_digest = hex64(e.schedule().digest());
  m.arch_hash = hex64(e.net().arch_hash());
  m.spec_hash = f.hash;
  m.dim = rows.empty() ? 0 : rows.front().values.size();
  cache_write(w.features_path(), rows, m);
  std::cout << "wrote " << rows.size() << " feature vectors to " << w.features_path() << "\n";
  return kOk;
}

/// Feature rows from features.csv grouped by split; refuses a cache built under another spec.
std::map<std::string, std::vector<TrajectoryFeatureVector>> cached_features(Workspace& w) {
  Experiment& e = w.exp();
  const std::uint64_t want = feature_spec_hash(e.config().plan, e.config().features, e.schedule(), e.net());
  const auto rows = cache_read(w.features_path(), want);
  std::map<std::uint64_t, std::string> where;
  for (const auto& name : split_names())
    for (std::uint64_t id : e.split(name).ids) where[id] = name;
  std::map<std::string, std::vector<TrajectoryFeatureVector>> out;
  for (const auto& f : rows) {
    const auto it = where.find(f.sample_id);
    if (it == where.end()) throw StaleCacheError("features.csv holds an unknown sample id");
    out[it->second].push_back(f);
  }
  return out;
}

int cmd_train_clf(const Options& o) {
  Workspace w(o);
  w.load(true);
  Experiment& e = w.exp();
  if (!fs::exists(w.features_path())) throw PipelineError("missing features.csv; run extract first");
  auto by = cached_features(w);
  std::vector<TrajectoryFeatureVector> xs;
  std::vector<int> ys;
  auto add = [&](const std::string& split, int y) {
    for (const auto& f : by[split]) xs.push_back(f), ys.push_back(y);
  };
  int classes = 2;
  const Task task = e.config().task;
  if (task == Task::kMia) {
    add("member_train", 1);
    add("external_train", 0);
  } else if (task == Task::kMa) {
    add("belonging_train", 1);
    add("member_train", 0);
    add("external_train", 0);
  } else {
    classes = 3;
    add("member_train", static_cast<int>(Origin::kMember));
    add("belonging_train", static_cast<int>(Origin::kBelonging));
    add("external_train", static_cast<int>(Origin::kExternal));
  }
  const auto res = train_linear(xs, ys, classes, e.config().clf_cfg(), task_name(task));
  const std::string name = std::string("classifier_") + task_name(task) + ".json";
  write_text(w.dir() / name, to_json(res.clf).dump(2) + "\n");
  std::cout << "wrote " << w.dir() / name << "\n";
  return kOk;
}

int cmd_eval(const Options& o) {
  Workspace w(o);
  w.load(true);
  Experiment& e = w.exp();
  if (fs::exists(w.features_path())) (void)cached_features(w);
  Artifacts a;
  nlohmann::ordered_json body;
  body["ddpm"] = ddpm_summary(e);
  body["threshold_on_belonging"] = run_threshold_on_belonging(e, a);
  switch (e.config().task) {
    case Task::kMia: body["mia"] = run_mia(e, a); break;
    case Task::kMa: body["ma"] = run_ma(e, a); break;
    case Task::kOa: body["oa"] = run_oa(e, a); break;
  }
  w.save_artifacts(a);
  w.save_report(body);
  std::cout << "wrote " << w.dir() / "report.json" << "\n";
  return kOk;
}

int cmd_ablate(const Options& o) {
  Workspace w(o);
  w.load(true);
  Artifacts a;
  nlohmann::ordered_json body;
  body["ablation"] = run_ablation(w.exp(), a);
  body["plan_study"] = run_plan_study(w.exp(), a);
  w.save_artifacts(a);
  w.save_report(body);
  std::cout << "wrote " << w.dir() / "ablation.csv" << "\n";
  return kOk;
}

int cmd_report(const Options& o) {
  Workspace w(o);
  w.load(false);
  Experiment& e = w.exp();
  if (!fs::exists(w.net_path())) {
    save_checkpoint(w.net_path(), e.net());
    save_checkpoint(w.foreign_path(), e.foreign_net());
  }
  w.save_sets(kRealSplits);
  w.save_sets(kGeneratedSplits);
  Artifacts a;
  nlohmann::ordered_json body;
  body["ddpm"] = ddpm_summary(e);
  body["threshold_on_belonging"] = run_threshold_on_belonging(e, a);
  body["mia"] = run_mia(e, a);
  body["ma"] = run_ma(e, a);
  body["oa"] = run_oa(e, a);
  if (e.config().mixture.components.size() >= 2) body["class_probe"] = run_class_probe(e, a);
  body["ablation"] = run_ablation(e, a);
  body["plan_study"] = run_plan_study(e, a);
  w.save_artifacts(a);
  w.save_report(body);
  std::cout << "wrote " << w.dir() / "report.json" << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Trajectory-feature membership, model and origin attribution on toy diffusion models"};
  app.require_subcommand(1);
  Options o;
  std::uint64_t seed = 0;
  app.add_option("--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--preset", o.preset, "named preset: default, overfit, probe, smoke")->excludes("--config");
  auto* seed_opt = app.add_option("--seed", seed, "base seed; every stage seed derives from it");
  app.add_option("--out", o.out, "output directory")->capture_default_str();
  app.add_option("--workers", o.workers, "worker threads")->check(CLI::Range(1u, 256u))->capture_default_str();
  app.fallthrough();

  using Cmd = int (*)(const Options&);
  const std::vector<std::tuple<const char*, const char*, Cmd>> cmds = {
      {"gen-data", "draw member, holdout and external sets", cmd_gen_data},
      {"train-ddpm", "train the DDPM and the second network", cmd_train_ddpm},
      {"sample", "sample belonging and foreign sets", cmd_sample},
      {"extract", "extract trajectory features to features.csv", cmd_extract},
      {"train-clf", "train the configured task's classifier from features.csv", cmd_train_clf},
      {"eval", "evaluate the configured task and the belonging FPR study", cmd_eval},
      {"ablate", "feature ablation grid and sampling-plan study", cmd_ablate},
      {"report", "run every pipeline and write report.json", cmd_report},
  };
  Cmd chosen = nullptr;
  for (const auto& [name, help, fn] : cmds) {
    auto* sub = app.add_subcommand(name, help);
    sub->callback([&chosen, f = fn] { chosen = f; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }
  if (!seed_opt->empty()) o.seed = seed;

  try {
    return chosen(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const StaleCacheError& e) {
    std::cerr << "stale cache: " << e.what() << "\n";
    return kStale;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
