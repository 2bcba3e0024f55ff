#pragma once

// Experiment configuration, its strict JSON form, and named presets.

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "json.hpp"
#include "trajfx/classifier.hpp"
#include "trajfx/data.hpp"
#include "trajfx/error.hpp"
#include "trajfx/features.hpp"
#include "trajfx/optim.hpp"
#include "trajfx/sampler.hpp"
#include "trajfx/schedule.hpp"
#include "trajfx/trainer.hpp"

namespace trajfx {

enum class Task { kMia, kMa, kOa };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::kMia:
      return "mia";
    case Task::kMa:
      return "ma";
    case Task::kOa:
      return "oa";
  }
  return "?";
}

inline bool operator==(const TimestepPlan& a, const TimestepPlan& b) { return a.describe() == b.describe(); }
inline bool operator==(const FeatureSpec& a, const FeatureSpec& b) { return a.describe() == b.describe(); }

struct SeedConfig {
  std::uint64_t data = 1;
  std::uint64_t ddpm = 2;
  std::uint64_t foreign = 3;  // second DDPM for model attribution
  std::uint64_t sampling = 4;
  std::uint64_t features = 5;
  std::uint64_t classifier = 6;

  static SeedConfig from_base(std::uint64_t s) { return {s, s + 1, s + 2, s + 3, s + 4, s + 5}; }

  friend bool operator==(const SeedConfig&, const SeedConfig&) = default;
};

struct SamplerConfig {
  ReverseVariance variance = ReverseVariance::kBeta;
  int ddim_substeps = 20;  // for the DDIM foreign source

  friend bool operator==(const SamplerConfig&, const SamplerConfig&) = default;
};

struct ExperimentConfig {
  std::string name = "default";
  MixtureSpec mixture;
  DatasetCounts counts;
  int T = 100;
  double beta_start = 1e-3;
  double beta_end = 0.2;
  ArchConfig arch;
  ArchConfig foreign_arch{{96, 96}, 16};
  TrainConfig ddpm_train = ddpm_train_config();
  TrainConfig foreign_train = ddpm_train_config();
  TrainConfig clf_train = classifier_train_config();
  SamplerConfig sampler;
  TimestepPlan plan;
  FeatureSpec features;
  Task task = Task::kOa;
  SeedConfig seeds;
  int query_budget = 12;       // steps per plan in the sampling-strategy comparison
  int loss_curve_repeats = 8;  // noise draws per (sample, t) for the per-t loss curves

  NoiseSchedule schedule() const { return make_linear_schedule(T, beta_start, beta_end); }

  TrainConfig ddpm_cfg() const {
    TrainConfig c = ddpm_train;
    c.seed = seeds.ddpm;
    return c;
  }
  TrainConfig foreign_cfg() const {
    TrainConfig c = foreign_train;
    c.seed = seeds.foreign;
    return c;
  }
  TrainConfig clf_cfg() const {
    TrainConfig c = clf_train;
    c.seed = seeds.classifier;
    return c;
  }

  void validate() const {
    try {
      mixture.validate();
      counts.validate();
      (void)schedule();
      ddpm_train.validate();
      foreign_train.validate();
      clf_train.validate();
      features.validate();
      (void)plan.resolve(T);
      if (arch.hidden_widths.empty() || foreign_arch.hidden_widths.empty())
        throw ParameterError("networks need at least one hidden layer");
      if (arch.embed_dim % 2 != 0 || foreign_arch.embed_dim % 2 != 0)
        throw ParameterError("embed_dim must be even");
      if (sampler.ddim_substeps < 2 || sampler.ddim_substeps > T)
        throw ParameterError("ddim_substeps must be in [2, T]");
      if (query_budget < 1 || 4 * query_budget > T) throw ParameterError("query_budget must be in [1, T/4]");
      if (loss_curve_repeats < 1) throw ParameterError("loss_curve_repeats must be >= 1");
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      throw ConfigError(std::string("invalid experiment config: ") + e.what());
    }
  }

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

namespace detail {

using Json = nlohmann::json;
using OJson = nlohmann::ordered_json;

inline void require_object(const Json& j, const std::string& ctx) {
  if (!j.is_object()) throw ConfigError(ctx + " must be a JSON object");
}

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& ctx) {
  require_object(j, ctx);
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError("unknown key '" + key + "' in " + ctx);
  }
}

template <class T>
void read_opt(const Json& j, const char* key, T& out, const std::string& ctx) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(ctx + "." + key + ": " + e.what());
  }
}

inline OJson train_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},           {"batch_size", c.batch_size},
          {"lr", c.lr},                   {"weight_decay", c.weight_decay},
          {"sched_step_epochs", c.sched_step_epochs}, {"sched_gamma", c.sched_gamma}};
}

inline TrainConfig train_from(const Json& j, TrainConfig c, const std::string& ctx) {
  check_keys(j, {"epochs", "batch_size", "lr", "weight_decay", "sched_step_epochs", "sched_gamma"}, ctx);
  read_opt(j, "epochs", c.epochs, ctx);
  read_opt(j, "batch_size", c.batch_size, ctx);
  read_opt(j, "lr", c.lr, ctx);
  read_opt(j, "weight_decay", c.weight_decay, ctx);
  read_opt(j, "sched_step_epochs", c.sched_step_epochs, ctx);
  read_opt(j, "sched_gamma", c.sched_gamma, ctx);
  return c;
}

inline OJson arch_json(const ArchConfig& a) {
  return {{"hidden_widths", a.hidden_widths}, {"embed_dim", a.embed_dim}};
}

inline ArchConfig arch_from(const Json& j, ArchConfig a, const std::string& ctx) {
  check_keys(j, {"hidden_widths", "embed_dim"}, ctx);
  read_opt(j, "hidden_widths", a.hidden_widths, ctx);
  read_opt(j, "embed_dim", a.embed_dim, ctx);
  return a;
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const TimestepPlan& p) {
  switch (p.variant) {
    case PlanVariant::kFull:
      return {{"variant", "full"}};
    case PlanVariant::kStrided:
      return {{"variant", "strided"}, {"stride", p.stride}, {"offset", p.offset}};
    case PlanVariant::kWindow:
      return {{"variant", "window"}, {"start", p.start}, {"end", p.end}};
    case PlanVariant::kExplicit:
      return {{"variant", "explicit"}, {"steps", p.steps}};
  }
  return {};
}

inline TimestepPlan plan_from_json(const nlohmann::json& j) {
  const std::string ctx = "plan";
  detail::require_object(j, ctx);
  std::string v = "full";
  detail::read_opt(j, "variant", v, ctx);
  TimestepPlan p;
  if (v == "full") {
    detail::check_keys(j, {"variant"}, ctx);
  } else if (v == "strided") {
    detail::check_keys(j, {"variant", "stride", "offset"}, ctx);
    p = TimestepPlan::strided(1, 0);
    detail::read_opt(j, "stride", p.stride, ctx);
    detail::read_opt(j, "offset", p.offset, ctx);
  } else if (v == "window") {
    detail::check_keys(j, {"variant", "start", "end"}, ctx);
    p = TimestepPlan::window(0, 0);
    detail::read_opt(j, "start", p.start, ctx);
    detail::read_opt(j, "end", p.end, ctx);
  } else if (v == "explicit") {
    detail::check_keys(j, {"variant", "steps"}, ctx);
    p = TimestepPlan::explicit_steps({});
    detail::read_opt(j, "steps", p.steps, ctx);
  } else {
    throw ConfigError("unknown plan variant '" + v + "'");
  }
  return p;
}

inline nlohmann::ordered_json to_json(const FeatureSpec& s) {
  nlohmann::ordered_json j = {{"use_loss", s.use_loss},     {"use_grad_x", s.use_grad_x},
                              {"use_grad_theta", s.use_grad_theta}, {"pia_mode", s.pia_mode},
                              {"pia_norm_p", s.pia_norm_p}, {"repeats", s.repeats}};
  if (s.gsa)
    j["gsa"] = {{"mode", s.gsa->mode == GsaMode::kGsa1 ? "gsa1" : "gsa2"},
                {"groups", s.gsa->groups},
                {"subsample", s.gsa->subsample}};
  else
    j["gsa"] = nullptr;
  return j;
}

inline FeatureSpec feature_spec_from_json(const nlohmann::json& j) {
  const std::string ctx = "features";
  detail::check_keys(j, {"use_loss", "use_grad_x", "use_grad_theta", "pia_mode", "pia_norm_p", "repeats", "gsa"}, ctx);
  FeatureSpec s;
  detail::read_opt(j, "use_loss", s.use_loss, ctx);
  detail::read_opt(j, "use_grad_x", s.use_grad_x, ctx);
  detail::read_opt(j, "use_grad_theta", s.use_grad_theta, ctx);
  detail::read_opt(j, "pia_mode", s.pia_mode, ctx);
  detail::read_opt(j, "pia_norm_p", s.pia_norm_p, ctx);
  detail::read_opt(j, "repeats", s.repeats, ctx);
  if (j.contains("gsa") && !j["gsa"].is_null()) {
    const auto& g = j["gsa"];
    detail::check_keys(g, {"mode", "groups", "subsample"}, "features.gsa");
    GsaConfig cfg;
    std::string mode = "gsa2";
    detail::read_opt(g, "mode", mode, "features.gsa");
    if (mode == "gsa1") cfg.mode = GsaMode::kGsa1;
    else if (mode == "gsa2") cfg.mode = GsaMode::kGsa2;
    else throw ConfigError("unknown GSA mode '" + mode + "'");
    detail::read_opt(g, "groups", cfg.groups, "features.gsa");
    detail::read_opt(g, "subsample", cfg.subsample, "features.gsa");
    s.gsa = cfg;
  }
  return s;
}

inline nlohmann::ordered_json to_json(const MixtureSpec& m) {
  nlohmann::ordered_json comps = nlohmann::ordered_json::array();
  for (const auto& c : m.components) comps.push_back({{"weight", c.weight}, {"mean", c.mean}, {"sigma", c.sigma}});
  return {{"dim", m.dim}, {"components", comps}, {"shift", m.shift}, {"scale", m.scale}};
}

inline MixtureSpec mixture_from_json(const nlohmann::json& j, MixtureSpec m) {
  const std::string ctx = "mixture";
  detail::check_keys(j, {"dim", "components", "shift", "scale"}, ctx);
  detail::read_opt(j, "dim", m.dim, ctx);
  detail::read_opt(j, "shift", m.shift, ctx);
  detail::read_opt(j, "scale", m.scale, ctx);
  if (j.contains("components")) {
    if (!j["components"].is_array()) throw ConfigError("mixture.components must be an array");
    m.components.clear();
    for (const auto& c : j["components"]) {
      detail::check_keys(c, {"weight", "mean", "sigma"}, "mixture.components[]");
      MixtureComponent mc;
      detail::read_opt(c, "weight", mc.weight, "mixture.components[]");
      detail::read_opt(c, "mean", mc.mean, "mixture.components[]");
      detail::read_opt(c, "sigma", mc.sigma, "mixture.components[]");
      m.components.push_back(std::move(mc));
    }
  }
  return m;
}

inline nlohmann::ordered_json to_json(const DatasetCounts& c) {
  return {{"members", c.members},           {"member_eval", c.member_eval},
          {"holdout", c.holdout},           {"external_train", c.external_train},
          {"external_eval", c.external_eval}, {"belonging_train", c.belonging_train},
          {"belonging_eval", c.belonging_eval}, {"foreign", c.foreign}};
}

inline DatasetCounts counts_from_json(const nlohmann::json& j, DatasetCounts c) {
  const std::string ctx = "counts";
  detail::check_keys(j, {"members", "member_eval", "holdout", "external_train", "external_eval",
                         "belonging_train", "belonging_eval", "foreign"}, ctx);
  detail::read_opt(j, "members", c.members, ctx);
  detail::read_opt(j, "member_eval", c.member_eval, ctx);
  detail::read_opt(j, "holdout", c.holdout, ctx);
  detail::read_opt(j, "external_train", c.external_train, ctx);
  detail::read_opt(j, "external_eval", c.external_eval, ctx);
  detail::read_opt(j, "belonging_train", c.belonging_train, ctx);
  detail::read_opt(j, "belonging_eval", c.belonging_eval, ctx);
  detail::read_opt(j, "foreign", c.foreign, ctx);
  return c;
}

inline nlohmann::ordered_json to_json(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["name"] = c.name;
  j["mixture"] = to_json(c.mixture);
  j["counts"] = to_json(c.counts);
  j["schedule"] = {{"T", c.T}, {"beta_start", c.beta_start}, {"beta_end", c.beta_end}};
  j["arch"] = detail::arch_json(c.arch);
  j["foreign_arch"] = detail::arch_json(c.foreign_arch);
  j["ddpm_train"] = detail::train_json(c.ddpm_train);
  j["foreign_train"] = detail::train_json(c.foreign_train);
  j["clf_train"] = detail::train_json(c.clf_train);
  j["sampler"] = {{"variance", c.sampler.variance == ReverseVariance::kBeta ? "beta" : "posterior"},
                  {"ddim_substeps", c.sampler.ddim_substeps}};
  j["plan"] = to_json(c.plan);
  j["features"] = to_json(c.features);
  j["task"] = task_name(c.task);
  j["seeds"] = {{"data", c.seeds.data},         {"ddpm", c.seeds.ddpm},
                {"foreign", c.seeds.foreign},   {"sampling", c.seeds.sampling},
                {"features", c.seeds.features}, {"classifier", c.seeds.classifier}};
  j["query_budget"] = c.query_budget;
  j["loss_curve_repeats"] = c.loss_curve_repeats;
  return j;
}

inline ExperimentConfig preset(const std::string& name);

/// Parses a config. A "preset" key selects the base that the remaining keys
/// override; without one the "default" preset is the base.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  detail::check_keys(j, {"preset", "name", "mixture", "counts", "schedule", "arch", "foreign_arch", "ddpm_train",
                         "foreign_train", "clf_train", "sampler", "plan", "features", "task", "seeds",
                         "query_budget", "loss_curve_repeats"},
                     "config");
  std::string base = "default";
  detail::read_opt(j, "preset", base, "config");
  ExperimentConfig c = preset(base);
  detail::read_opt(j, "name", c.name, "config");
  if (j.contains("mixture")) c.mixture = mixture_from_json(j["mixture"], c.mixture);
  if (j.contains("counts")) c.counts = counts_from_json(j["counts"], c.counts);
  if (j.contains("schedule")) {
    const auto& s = j["schedule"];
    detail::check_keys(s, {"T", "beta_start", "beta_end"}, "schedule");
    detail::read_opt(s, "T", c.T, "schedule");
    detail::read_opt(s, "beta_start", c.beta_start, "schedule");
    detail::read_opt(s, "beta_end", c.beta_end, "schedule");
  }
  if (j.contains("arch")) c.arch = detail::arch_from(j["arch"], c.arch, "arch");
  if (j.contains("foreign_arch")) c.foreign_arch = detail::arch_from(j["foreign_arch"], c.foreign_arch, "foreign_arch");
  if (j.contains("ddpm_train")) c.ddpm_train = detail::train_from(j["ddpm_train"], c.ddpm_train, "ddpm_train");
  if (j.contains("foreign_train"))
    c.foreign_train = detail::train_from(j["foreign_train"], c.foreign_train, "foreign_train");
  if (j.contains("clf_train")) c.clf_train = detail::train_from(j["clf_train"], c.clf_train, "clf_train");
  if (j.contains("sampler")) {
    const auto& s = j["sampler"];
    detail::check_keys(s, {"variance", "ddim_substeps"}, "sampler");
    std::string v = c.sampler.variance == ReverseVariance::kBeta ? "beta" : "posterior";
    detail::read_opt(s, "variance", v, "sampler");
    if (v == "beta") c.sampler.variance = ReverseVariance::kBeta;
    else if (v == "posterior") c.sampler.variance = ReverseVariance::kPosterior;
    else throw ConfigError("unknown sampler variance '" + v + "'");
    detail::read_opt(s, "ddim_substeps", c.sampler.ddim_substeps, "sampler");
  }
  if (j.contains("plan")) c.plan = plan_from_json(j["plan"]);
  if (j.contains("features")) c.features = feature_spec_from_json(j["features"]);
  if (j.contains("task")) {
    std::string t;
    detail::read_opt(j, "task", t, "config");
    if (t == "mia") c.task = Task::kMia;
    else if (t == "ma") c.task = Task::kMa;
    else if (t == "oa") c.task = Task::kOa;
    else throw ConfigError("unknown task '" + t + "'");
  }
  if (j.contains("seeds")) {
    const auto& s = j["seeds"];
    detail::check_keys(s, {"data", "ddpm", "foreign", "sampling", "features", "classifier"}, "seeds");
    detail::read_opt(s, "data", c.seeds.data, "seeds");
    detail::read_opt(s, "ddpm", c.seeds.ddpm, "seeds");
    detail::read_opt(s, "foreign", c.seeds.foreign, "seeds");
    detail::read_opt(s, "sampling", c.seeds.sampling, "seeds");
    detail::read_opt(s, "features", c.seeds.features, "seeds");
    detail::read_opt(s, "classifier", c.seeds.classifier, "seeds");
  }
  detail::read_opt(j, "query_budget", c.query_budget, "config");
  detail::read_opt(j, "loss_curve_repeats", c.loss_curve_repeats, "config");
  c.validate();
  return c;
}

inline ExperimentConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

/// Four isotropic clusters on the corners of a square in the first two
/// coordinates.
inline MixtureSpec square_mixture(int dim, double half_side, std::initializer_list<double> sigmas) {
  MixtureSpec m;
  m.dim = dim;
  const double corners[4][2] = {{-1, -1}, {1, -1}, {-1, 1}, {1, 1}};
  auto sig = sigmas.begin();
  for (int c = 0; c < 4; ++c) {
    Vec mean(dim, 0.0);
    mean[0] = half_side * corners[c][0];
    if (dim > 1) mean[1] = half_side * corners[c][1];
    m.components.push_back({0.25, mean, *sig});
    if (sig + 1 != sigmas.end()) ++sig;
  }
  return m;
}

inline ExperimentConfig preset(const std::string& name) {
  ExperimentConfig c;
  c.name = name;
  if (name == "default") {
    c.mixture = square_mixture(2, 2.0, {0.5, 0.4, 0.6, 0.3});
    c.mixture.shift = 0.3;
    c.mixture.scale = 1.3;
    c.counts = {256, 128, 256, 128, 128, 500, 500, 250};
    return c;
  }
  if (name == "overfit") {
    c.mixture = square_mixture(8, 1.0, {0.25, 0.2, 0.3, 0.15});
    c.mixture.shift = 0.15;
    c.mixture.scale = 1.3;
    c.counts = {256, 128, 256, 400, 400, 400, 400, 250};
    c.T = 200;
    c.beta_start = 1e-3;
    c.beta_end = 0.05;
    c.ddpm_train = ddpm_train_config(0, 3000);
    c.ddpm_train.lr = 1e-3;
    c.foreign_train = c.ddpm_train;
    c.sampler.variance = ReverseVariance::kPosterior;
    c.query_budget = 25;
    c.loss_curve_repeats = 16;
    return c;
  }
  if (name == "probe") {
    c.mixture.dim = 8;
    Vec a(8, 0.0), b(8, 0.0);
    a[0] = -0.1;
    b[0] = 0.1;
    c.mixture.components = {{0.5, a, 0.05}, {0.5, b, 0.05}};
    c.mixture.shift = 0.03;
    c.mixture.scale = 1.3;
    c.counts = {2000, 1000, 16, 16, 16, 16, 16, 16};
    c.ddpm_train = ddpm_train_config(0, 200);
    c.ddpm_train.lr = 1e-3;
    c.foreign_train = c.ddpm_train;
    return c;
  }
  if (name == "smoke") {
    c.mixture = square_mixture(2, 1.0, {0.3});
    c.mixture.shift = 0.5;
    c.counts = {32, 16, 16, 16, 16, 16, 16, 16};
    c.T = 20;
    c.beta_start = 5e-3;
    c.beta_end = 0.5;
    c.arch = {{16}, 8};
    c.foreign_arch = {{12}, 8};
    c.ddpm_train = ddpm_train_config(0, 20);
    c.foreign_train = ddpm_train_config(0, 10);
    c.clf_train.epochs = 10;
    c.sampler.ddim_substeps = 5;
    c.query_budget = 5;
    c.loss_curve_repeats = 2;
    return c;
  }
  throw ConfigError("unknown preset '" + name + "'");
}

}  // namespace trajfx
