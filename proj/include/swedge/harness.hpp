#pragma once

// Model dispatch, replicated simulation studies and report emission.
//
// Study layout:
//   <output_dir>/<name>/study.json
//   <output_dir>/<name>/rep_<k>/{data.csv, fit_<model>.json, draws_<model>.csv, done}
//   <output_dir>/<name>/report/*.csv
// Every artifact is a pure function of the study config and the replicate
// index, so runs with different --jobs write identical files.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "datagen.hpp"
#include "diagnostics.hpp"
#include "estimands.hpp"
#include "frequentist.hpp"
#include "io.hpp"
#include "posterior.hpp"
#include "sampler.hpp"

namespace swedge {

enum class ModelId { bayes_immediate, bayes_tv, bayes_tv_cluster, bayes_monotone, lmm_cat, lmm_cont, ols, gam };

inline const std::vector<ModelId>& all_model_ids() {
  static const std::vector<ModelId> ids = {ModelId::bayes_immediate, ModelId::bayes_tv, ModelId::bayes_tv_cluster, ModelId::bayes_monotone,
                                           ModelId::lmm_cat,         ModelId::lmm_cont, ModelId::ols,              ModelId::gam};
  return ids;
}

inline std::string to_string(ModelId m) {
  switch (m) {
    case ModelId::bayes_immediate: return "bayes-immediate";
    case ModelId::bayes_tv: return "bayes-tv";
    case ModelId::bayes_tv_cluster: return "bayes-tv-cluster";
    case ModelId::bayes_monotone: return "bayes-monotone";
    case ModelId::lmm_cat: return "lmm-cat";
    case ModelId::lmm_cont: return "lmm-cont";
    case ModelId::ols: return "ols";
    case ModelId::gam: return "gam";
  }
  return "?";
}

inline ModelId parse_model_id(std::string_view s) {
  for (ModelId m : all_model_ids())
    if (to_string(m) == s) return m;
  throw ValidationError("unknown model: " + std::string(s));
}

inline bool is_bayesian(ModelId m) {
  return m == ModelId::bayes_immediate || m == ModelId::bayes_tv || m == ModelId::bayes_tv_cluster || m == ModelId::bayes_monotone;
}

inline ModelKind model_kind(ModelId m) {
  switch (m) {
    case ModelId::bayes_immediate: return ModelKind::immediate;
    case ModelId::bayes_tv: return ModelKind::time_varying;
    case ModelId::bayes_tv_cluster: return ModelKind::cluster_varying;
    case ModelId::bayes_monotone: return ModelKind::monotone;
    default: throw ValidationError("model_kind: " + to_string(m) + " is not a Bayesian model");
  }
}

inline bool has_curve(ModelId m) { return m == ModelId::bayes_tv || m == ModelId::bayes_tv_cluster || m == ModelId::bayes_monotone; }

struct FitConfig {
  SamplerConfig sampler;
  ModelOptions model;
  FunctionalSummary monotone_summary = FunctionalSummary::plugin;
  bool rank_normalized_rhat = false;
  bool compute_loo = true;
  double psis_tail = 0.2;
};

struct IntervalSummary {
  double estimate = std::numeric_limits<double>::quiet_NaN();
  double lo = std::numeric_limits<double>::quiet_NaN();
  double hi = std::numeric_limits<double>::quiet_NaN();
};

struct CurvePoint {
  int x = 0;  // exposure time for curves, study time for trends
  double median = 0.0, lo = 0.0, hi = 0.0;
};

struct FitResult {
  std::string model;
  bool bayesian = false;
  bool converged = true;
  std::string error;
  double seconds = 0.0;
  std::map<std::string, IntervalSummary> estimands;  // tau, TATE, LTE

  // Bayesian fits
  std::vector<ParamSummary> params;
  int n_divergent = 0;
  double max_rhat = std::numeric_limits<double>::quiet_NaN();
  double min_ess = std::numeric_limits<double>::quiet_NaN();
  std::optional<LooResult> loo;
  std::vector<CurvePoint> curve;
  std::vector<CurvePoint> trend;
  std::vector<std::string> draw_names;
  std::vector<Eigen::MatrixXd> draws;  // constrained, one matrix per chain

  // frequentist fits
  std::optional<FreqFit> freq;
};

namespace detail {

inline IntervalSummary interval_of(const EstimandSummary& s) { return {s.estimate, s.lo, s.hi}; }

inline CurvePoint point_of(int x, std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return {x, quantile_sorted(v, 0.5), quantile_sorted(v, 0.025), quantile_sorted(v, 0.975)};
}

inline FitResult fit_bayesian(const PanelDataset& data, ModelId id, const FitConfig& cfg, int t_star_max) {
  FitResult r;
  r.bayesian = true;
  ModelOptions mo = cfg.model;
  if (id == ModelId::bayes_monotone && !mo.t_star_max) mo.t_star_max = t_star_max;
  const LogPosterior lp(make_model_spec(model_kind(id), data, mo), data);
  const ModelSpec& spec = lp.spec();
  const ParameterLayout& L = lp.layout();
  const Chains ch = nuts_sample(lp, lp.dim(), cfg.sampler);

  const int S = ch.n_chains() * ch.n_draws();
  Eigen::MatrixXd pooled(S, lp.dim());
  std::vector<ConstrainedParams> constrained;
  constrained.reserve(static_cast<std::size_t>(S));
  r.draw_names = L.constrained_names();
  for (int c = 0, row = 0; c < ch.n_chains(); ++c) {
    Eigen::MatrixXd m(ch.n_draws(), static_cast<Eigen::Index>(r.draw_names.size()));
    for (int d = 0; d < ch.n_draws(); ++d, ++row) {
      pooled.row(row) = ch.chains[static_cast<std::size_t>(c)].draws.row(d);
      constrained.push_back(lp.constrain(pooled.row(row).transpose()));
      m.row(d) = flatten(L, constrained.back()).transpose();
    }
    r.draws.push_back(std::move(m));
  }
  FitSummary fs = summarize(r.draws, r.draw_names, cfg.rank_normalized_rhat);
  r.params = fs.params;
  r.n_divergent = ch.n_divergent();
  r.max_rhat = fs.max_rhat;
  r.min_ess = std::numeric_limits<double>::infinity();
  for (const auto& p : r.params)
    if (std::isfinite(p.ess)) r.min_ess = std::min(r.min_ess, p.ess);

  if (cfg.compute_loo) {
    Eigen::MatrixXd ll(S, static_cast<Eigen::Index>(lp.n_observations()));
    for (int s = 0; s < S; ++s) ll.row(s) = lp.pointwise_log_lik(pooled.row(s).transpose()).transpose();
    r.loo = psis_loo(ll, cfg.psis_tail);
  }

  if (spec.model == ModelKind::immediate) {
    const ParamSummary& tau = fs.at("tau");
    const IntervalSummary iv{tau.median, tau.q2_5, tau.q97_5};
    r.estimands = {{"tau", iv}, {"TATE", iv}, {"LTE", iv}};
  } else {
    const EffectCurveDraws curve = effect_curve_draws(spec, constrained, t_star_max);
    const FunctionalSummary mode = spec.model == ModelKind::monotone ? cfg.monotone_summary : FunctionalSummary::per_draw;
    r.estimands["TATE"] = interval_of(tate(curve, mode));
    r.estimands["LTE"] = interval_of(lte(curve, mode));
    r.estimands["tau"] = r.estimands["TATE"];
    for (int k = 0; k < t_star_max; ++k) {
      std::vector<double> v(curve.values.col(k).data(), curve.values.col(k).data() + curve.values.rows());
      r.curve.push_back(point_of(k + 1, std::move(v)));
    }
  }
  // population time trend alpha + B(t) beta
  for (int t = 0; t <= data.design.last_period; ++t) {
    const Eigen::VectorXd b = spec.time_basis(t);
    std::vector<double> v;
    v.reserve(constrained.size());
    for (const auto& c : constrained) v.push_back(c.alpha + b.dot(c.beta));
    r.trend.push_back(point_of(t, std::move(v)));
  }
  return r;
}

inline FitResult fit_frequentist(const PanelDataset& data, ModelId id) {
  FitResult r;
  switch (id) {
    case ModelId::lmm_cat: r.freq = fit_lmm_categorical(data); break;
    case ModelId::lmm_cont: r.freq = fit_lmm_continuous(data); break;
    case ModelId::ols: r.freq = fit_ols_no_time(data); break;
    case ModelId::gam: r.freq = fit_gam(data); break;
    default: throw ValidationError("fit_frequentist: not a frequentist model");
  }
  r.converged = r.freq->converged;
  const IntervalSummary iv{r.freq->tau_hat, r.freq->ci_lo, r.freq->ci_hi};
  r.estimands = {{"tau", iv}, {"TATE", iv}, {"LTE", iv}};
  return r;
}

}  // namespace detail

// Fits one model. t_star_max sets the exposure grid of the curve estimands
// (default: last period - 2). Fit failures propagate as FitError.
inline FitResult fit_dataset(const PanelDataset& data, ModelId id, const FitConfig& cfg = {}, std::optional<int> t_star_max = {}) {
  data.validate();
  const int tmax = t_star_max.value_or(cfg.model.t_star_max.value_or(default_t_star_max(data.design)));
  const auto start = std::chrono::steady_clock::now();
  FitResult r = is_bayesian(id) ? detail::fit_bayesian(data, id, cfg, tmax) : detail::fit_frequentist(data, id);
  r.model = to_string(id);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

// ---------------------------------------------------------------------------
// Fit serialization.

inline Json interval_json(const IntervalSummary& s) { return Json{{"estimate", json_number(s.estimate)}, {"lo", json_number(s.lo)}, {"hi", json_number(s.hi)}}; }

inline Json curve_json(const std::vector<CurvePoint>& c, const char* key) {
  Json a = Json::array();
  for (const auto& p : c) a.push_back(Json{{key, p.x}, {"median", json_number(p.median)}, {"lo", json_number(p.lo)}, {"hi", json_number(p.hi)}});
  return a;
}

inline Json fit_to_json(const FitResult& r) {
  Json j;
  j["model"] = r.model;
  j["bayesian"] = r.bayesian;
  j["converged"] = r.converged;
  if (!r.error.empty()) j["error"] = r.error;
  Json est = Json::object();
  for (const char* k : {"tau", "TATE", "LTE"}) {
    const auto it = r.estimands.find(k);
    if (it != r.estimands.end()) est[k] = interval_json(it->second);
  }
  j["estimands"] = est;
  if (r.bayesian) {
    Json d;
    d["n_divergent"] = r.n_divergent;
    d["max_rhat"] = json_number(r.max_rhat);
    d["min_ess"] = json_number(r.min_ess);
    if (r.loo) {
      d["looic"] = json_number(r.loo->looic);
      d["elpd_loo"] = json_number(r.loo->elpd_loo);
      d["p_loo"] = json_number(r.loo->p_loo);
      d["frac_pareto_k_above_0_7"] = json_number(r.loo->frac_k_above_0_7);
    }
    j["diagnostics"] = d;
    j["curve"] = curve_json(r.curve, "t_star");
    j["trend"] = curve_json(r.trend, "t");
    Json ps = Json::array();
    for (const auto& p : r.params)
      ps.push_back(Json{{"name", p.name},
                        {"mean", json_number(p.mean)},
                        {"sd", json_number(p.sd)},
                        {"median", json_number(p.median)},
                        {"q2_5", json_number(p.q2_5)},
                        {"q97_5", json_number(p.q97_5)},
                        {"rhat", json_number(p.rhat)},
                        {"ess", json_number(p.ess)}});
    j["params"] = ps;
  }
  if (r.freq) {
    const FreqFit& f = *r.freq;
    Json fj;
    fj["tau_hat"] = json_number(f.tau_hat);
    fj["se_tau"] = json_number(f.se_tau);
    fj["ci_lo"] = json_number(f.ci_lo);
    fj["ci_hi"] = json_number(f.ci_hi);
    fj["converged"] = f.converged;
    fj["reml_deviance"] = json_number(f.reml_deviance);
    fj["iterations"] = f.iterations;
    Json vc = Json::object();
    for (const auto& [k, v] : f.variance_components) vc[k] = json_number(v);
    fj["variance_components"] = vc;
    Json fe = Json::object();
    for (std::size_t i = 0; i < f.fixed_names.size(); ++i) fe[f.fixed_names[i]] = json_number(f.fixed_effects[static_cast<Eigen::Index>(i)]);
    fj["fixed_effects"] = fe;
    j["frequentist"] = fj;
  }
  return j;
}

// Reads back what the report needs; draws and pointwise values are not kept.
inline FitResult fit_from_json(const Json& j) {
  FitResult r;
  r.model = j.at("model").get<std::string>();
  r.bayesian = j.at("bayesian").get<bool>();
  r.converged = j.at("converged").get<bool>();
  r.error = j.value("error", std::string());
  for (const auto& [k, v] : j.at("estimands").items()) r.estimands[k] = {json_double(v.at("estimate")), json_double(v.at("lo")), json_double(v.at("hi"))};
  if (j.contains("diagnostics")) {
    const Json& d = j["diagnostics"];
    r.n_divergent = d.at("n_divergent").get<int>();
    r.max_rhat = json_double(d.at("max_rhat"));
    r.min_ess = json_double(d.at("min_ess"));
    if (d.contains("looic")) {
      LooResult l;
      l.looic = json_double(d["looic"]);
      l.elpd_loo = json_double(d["elpd_loo"]);
      l.p_loo = json_double(d["p_loo"]);
      l.frac_k_above_0_7 = json_double(d["frac_pareto_k_above_0_7"]);
      r.loo = l;
    }
  }
  auto read_curve = [](const Json& a, const char* key) {
    std::vector<CurvePoint> c;
    for (const auto& p : a) c.push_back({p.at(key).get<int>(), json_double(p.at("median")), json_double(p.at("lo")), json_double(p.at("hi"))});
    return c;
  };
  if (j.contains("curve")) r.curve = read_curve(j["curve"], "t_star");
  if (j.contains("trend")) r.trend = read_curve(j["trend"], "t");
  if (j.contains("params"))
    for (const auto& p : j["params"]) {
      ParamSummary s;
      s.name = p.at("name").get<std::string>();
      s.mean = json_double(p.at("mean"));
      s.sd = json_double(p.at("sd"));
      s.median = json_double(p.at("median"));
      s.q2_5 = json_double(p.at("q2_5"));
      s.q97_5 = json_double(p.at("q97_5"));
      s.rhat = json_double(p.at("rhat"));
      s.ess = json_double(p.at("ess"));
      r.params.push_back(s);
    }
  if (j.contains("frequentist")) {
    const Json& fj = j["frequentist"];
    FreqFit f;
    f.model = r.model;
    f.tau_hat = json_double(fj.at("tau_hat"));
    f.se_tau = json_double(fj.at("se_tau"));
    f.ci_lo = json_double(fj.at("ci_lo"));
    f.ci_hi = json_double(fj.at("ci_hi"));
    f.converged = fj.at("converged").get<bool>();
    f.reml_deviance = json_double(fj.at("reml_deviance"));
    for (const auto& [k, v] : fj.at("variance_components").items()) f.variance_components[k] = json_double(v);
    r.freq = f;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Study configuration.

struct StudyConfig {
  std::string name = "study";
  std::string scenario = "immediate";  // immediate, s1, s2, s3
  double tau = 0.0;                    // immediate scenario only
  int n_replicates = 1;
  int n_clusters = 0;  // 0: scenario default
  int last_period = 0;
  int individuals_per_cell = 0;
  bool randomized_rollout = false;
  GenConfig generator;
  std::vector<ModelId> models;
  FitConfig fit;
  std::uint64_t seed = 1;
  std::filesystem::path output_dir = "study";
  int jobs = 1;
  int chain_threads = 0;  // 0: share the cores left idle by replicate workers
  bool write_draws = true;

  void resolve_defaults() {
    const ScenarioDefaults d = scenario_defaults(scenario);
    if (n_clusters == 0) n_clusters = d.n_clusters;
    if (last_period == 0) last_period = d.last_period;
    if (individuals_per_cell == 0) individuals_per_cell = d.individuals_per_cell;
  }

  void validate() const {
    scenario_defaults(scenario);
    if (n_replicates < 1) throw ValidationError("study: n_replicates must be >= 1");
    if (models.empty()) throw ValidationError("study: list at least one model");
    if (jobs < 1) throw ValidationError("study: jobs must be >= 1");
    if (chain_threads < 0) throw ValidationError("study: chain_threads must be >= 0");
    if (name.empty() || name.find('/') != std::string::npos) throw ValidationError("study: name must be a plain directory name");
    generator.validate();
    fit.sampler.validate();
    if (!(fit.psis_tail > 0.0 && fit.psis_tail < 1.0)) throw ValidationError("study: psis_tail must lie in (0, 1)");
  }

  TrialDesign design(int replicate) const {
    if (randomized_rollout) return build_randomized_design(n_clusters, last_period, individuals_per_cell, derive_seed(seed, 0xde5, replicate));
    return build_classic_design(n_clusters, last_period, individuals_per_cell);
  }

  int t_star_max() const { return fit.model.t_star_max.value_or(std::max(1, last_period - 2)); }

  EffectCurve curve() const { return scenario_curve(scenario, tau); }

  std::vector<std::string> estimands() const {
    if (scenario == "immediate") return {"tau"};
    return {"TATE", "LTE"};
  }

  double truth(const std::string& estimand) const {
    if (estimand == "tau") return tau;
    if (estimand == "TATE") return true_tate(curve(), t_star_max());
    if (estimand == "LTE") return true_lte(curve(), t_star_max());
    throw ValidationError("unknown estimand: " + estimand);
  }

  PanelDataset generate(int replicate) const {
    GenConfig g = generator;
    g.seed = derive_seed(seed, 0xda7a, replicate);
    const TrialDesign d = design(replicate);
    if (scenario == "immediate") return gen_immediate(d, g, tau);
    return gen_time_varying(d, g, curve(), scenario == "s3");
  }

  // Seed of a model's sampler in a replicate; independent of scheduling.
  std::uint64_t fit_seed(int replicate, ModelId m) const { return derive_seed(seed, 0xf17, replicate, static_cast<std::uint64_t>(m)); }
};

// Everything that determines results; jobs, threads and output location
// are left out so they can change between runs of the same study.
inline Json study_config_to_json(const StudyConfig& c) {
  Json models = Json::array();
  for (ModelId m : c.models) models.push_back(to_string(m));
  const auto& s = c.fit.sampler;
  const auto& mo = c.fit.model;
  Json j;
  j["name"] = c.name;
  j["scenario"] = c.scenario;
  j["tau"] = c.tau;
  j["n_replicates"] = c.n_replicates;
  j["design"] = {{"n_clusters", c.n_clusters}, {"last_period", c.last_period}, {"individuals_per_cell", c.individuals_per_cell}, {"randomized", c.randomized_rollout}};
  j["generator"] = {{"sigma_alpha", c.generator.sigma_alpha}, {"quad_coef", c.generator.quad_coef}, {"d_scale", c.generator.d_scale},
                    {"rho", c.generator.rho},                 {"sigma_eps", c.generator.sigma_eps}, {"sigma_u", c.generator.sigma_u}};
  j["models"] = models;
  j["sampler"] = {{"n_chains", s.n_chains},         {"n_warmup", s.n_warmup},     {"n_draws", s.n_draws},        {"target_accept", s.target_accept},
                  {"max_tree_depth", s.max_tree_depth}, {"init_radius", s.init_radius}, {"max_delta_h", s.max_delta_h}};
  j["model_options"] = {{"smoothness", to_string(mo.smoothness)}, {"penalty_form", to_string(mo.penalty_form)}, {"n_quantiles", mo.n_quantiles},
                        {"degree", mo.degree}, {"t_star_max", mo.t_star_max ? Json(*mo.t_star_max) : Json(nullptr)}};
  j["monotone_summary"] = to_string(c.fit.monotone_summary);
  j["rank_normalized_rhat"] = c.fit.rank_normalized_rhat;
  j["compute_loo"] = c.fit.compute_loo;
  j["psis_tail"] = c.fit.psis_tail;
  j["write_draws"] = c.write_draws;
  j["seed"] = c.seed;
  return j;
}

namespace detail {

template <class T>
void read_if(const Json& j, const char* key, T& out) {
  if (j.contains(key) && !j[key].is_null()) out = j[key].get<T>();
}

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ValidationError("config: " + where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    (void)v;
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return k == a; })) throw ValidationError("config: unknown key '" + where + k + "'");
  }
}

}  // namespace detail

// Parses one study; "tau_values" is handled by expand_study_configs.
inline StudyConfig study_config_from_json(const Json& j) {
  using detail::read_if;
  detail::check_keys(j,
                     {"name", "scenario", "tau", "tau_values", "n_replicates", "design", "generator", "models", "sampler", "model_options", "monotone_summary",
                      "rank_normalized_rhat", "compute_loo", "psis_tail", "write_draws", "seed", "output_dir", "jobs", "chain_threads"},
                     "");
  StudyConfig c;
  try {
    read_if(j, "name", c.name);
    read_if(j, "scenario", c.scenario);
    read_if(j, "tau", c.tau);
    read_if(j, "n_replicates", c.n_replicates);
    if (j.contains("design")) {
      const Json& d = j["design"];
      detail::check_keys(d, {"n_clusters", "last_period", "individuals_per_cell", "randomized"}, "design.");
      read_if(d, "n_clusters", c.n_clusters);
      read_if(d, "last_period", c.last_period);
      read_if(d, "individuals_per_cell", c.individuals_per_cell);
      read_if(d, "randomized", c.randomized_rollout);
    }
    if (j.contains("generator")) {
      const Json& g = j["generator"];
      detail::check_keys(g, {"sigma_alpha", "quad_coef", "d_scale", "rho", "sigma_eps", "sigma_u"}, "generator.");
      read_if(g, "sigma_alpha", c.generator.sigma_alpha);
      read_if(g, "quad_coef", c.generator.quad_coef);
      read_if(g, "d_scale", c.generator.d_scale);
      read_if(g, "rho", c.generator.rho);
      read_if(g, "sigma_eps", c.generator.sigma_eps);
      read_if(g, "sigma_u", c.generator.sigma_u);
    }
    if (j.contains("models"))
      for (const auto& m : j["models"]) c.models.push_back(parse_model_id(m.get<std::string>()));
    if (j.contains("sampler")) {
      const Json& s = j["sampler"];
      detail::check_keys(s, {"n_chains", "n_warmup", "n_draws", "target_accept", "max_tree_depth", "init_radius", "max_delta_h"}, "sampler.");
      read_if(s, "n_chains", c.fit.sampler.n_chains);
      read_if(s, "n_warmup", c.fit.sampler.n_warmup);
      read_if(s, "n_draws", c.fit.sampler.n_draws);
      read_if(s, "target_accept", c.fit.sampler.target_accept);
      read_if(s, "max_tree_depth", c.fit.sampler.max_tree_depth);
      read_if(s, "init_radius", c.fit.sampler.init_radius);
      read_if(s, "max_delta_h", c.fit.sampler.max_delta_h);
    }
    if (j.contains("model_options")) {
      const Json& m = j["model_options"];
      detail::check_keys(m, {"smoothness", "penalty_form", "n_quantiles", "degree", "t_star_max"}, "model_options.");
      if (m.contains("smoothness")) c.fit.model.smoothness = parse_smoothness(m["smoothness"].get<std::string>());
      if (m.contains("penalty_form")) c.fit.model.penalty_form = parse_penalty_form(m["penalty_form"].get<std::string>());
      read_if(m, "n_quantiles", c.fit.model.n_quantiles);
      read_if(m, "degree", c.fit.model.degree);
      if (m.contains("t_star_max") && !m["t_star_max"].is_null()) c.fit.model.t_star_max = m["t_star_max"].get<int>();
    }
    if (j.contains("monotone_summary")) c.fit.monotone_summary = parse_functional_summary(j["monotone_summary"].get<std::string>());
    read_if(j, "rank_normalized_rhat", c.fit.rank_normalized_rhat);
    read_if(j, "compute_loo", c.fit.compute_loo);
    read_if(j, "psis_tail", c.fit.psis_tail);
    read_if(j, "write_draws", c.write_draws);
    read_if(j, "seed", c.seed);
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    read_if(j, "jobs", c.jobs);
    read_if(j, "chain_threads", c.chain_threads);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  c.resolve_defaults();
  c.validate();
  return c;
}

// One study per entry of "tau_values" (named <name>_tau<value>), or the
// config itself when the key is absent.
inline std::vector<StudyConfig> expand_study_configs(const Json& j) {
  if (!j.contains("tau_values")) return {study_config_from_json(j)};
  const Json& tv = j["tau_values"];
  if (!tv.is_array() || tv.empty()) throw ValidationError("config: tau_values must be a non-empty array");
  std::vector<StudyConfig> out;
  for (const auto& v : tv) {
    Json sub = j;
    sub.erase("tau_values");
    sub["tau"] = v;
    sub["name"] = j.value("name", std::string("study")) + "_tau" + format_double(v.get<double>());
    out.push_back(study_config_from_json(sub));
  }
  return out;
}

// Applies "a.b.c=value"; the value is parsed as JSON when it can be and
// taken as a string otherwise.
inline void apply_override(Json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ValidationError("override must look like key=value: " + assignment);
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const nlohmann::json::exception&) {
    value = text;
  }
  Json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ValidationError("override has an empty key: " + assignment);
    if (!node->is_object()) throw ValidationError("override path crosses a non-object: " + assignment);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

// ---------------------------------------------------------------------------
// Running and reporting.

struct MetricSummaryRow {
  std::string scenario, model, estimand;
  double truth = 0.0;
  AggregateMetrics metrics;
  double looic_mean = std::numeric_limits<double>::quiet_NaN();
  int n_failed = 0;
  double max_rhat = std::numeric_limits<double>::quiet_NaN();
  int n_divergent = 0;
};

struct ReplicateRow {
  int replicate = 0;
  MetricRow row;
  bool converged = true;
  double looic = std::numeric_limits<double>::quiet_NaN();
};

struct StudyReport {
  std::filesystem::path dir;
  std::vector<MetricSummaryRow> metrics;
  std::vector<ReplicateRow> replicates;
  int missing_fits = 0;
  double wall_seconds = 0.0;

  const MetricSummaryRow& at(const std::string& model, const std::string& estimand) const {
    for (const auto& m : metrics)
      if (m.model == model && m.estimand == estimand) return m;
    throw ValidationError("report: no metrics for " + model + " / " + estimand);
  }
};

inline std::filesystem::path study_dir(const StudyConfig& c) { return c.output_dir / c.name; }
inline std::filesystem::path replicate_dir(const std::filesystem::path& study, int k) { return study / ("rep_" + std::to_string(k)); }

namespace detail {

inline std::string csv_row(std::initializer_list<std::string> cells) {
  std::string s;
  bool first = true;
  for (const auto& c : cells) {
    if (!first) s += ',';
    s += c;
    first = false;
  }
  return s + '\n';
}

inline std::string fmt(double x) { return format_double(x); }

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline void run_replicate(const StudyConfig& cfg, const std::filesystem::path& dir, int k, int chain_threads) {
  const auto rep = replicate_dir(dir, k);
  if (std::filesystem::exists(rep / "done")) return;
  std::filesystem::create_directories(rep);
  const PanelDataset data = cfg.generate(k);
  write_dataset_csv(rep / "data.csv", data);
  for (ModelId m : cfg.models) {
    const auto fit_path = rep / ("fit_" + to_string(m) + ".json");
    if (std::filesystem::exists(fit_path)) continue;
    FitConfig fc = cfg.fit;
    fc.sampler.seed = cfg.fit_seed(k, m);
    fc.sampler.threads = chain_threads;
    FitResult r;
    try {
      r = fit_dataset(data, m, fc, cfg.t_star_max());
    } catch (const FitError& e) {
      r = FitResult{};
      r.model = to_string(m);
      r.bayesian = is_bayesian(m);
      r.converged = false;
      r.error = e.what();
      warn("replicate " + std::to_string(k) + ", " + r.model + ": " + r.error);
    }
    if (r.bayesian && cfg.write_draws && !r.draws.empty()) write_text_file(rep / ("draws_" + r.model + ".csv"), draws_to_csv(r.draw_names, r.draws));
    write_text_file(fit_path, fit_to_json(r).dump(2) + "\n");
  }
  write_text_file(rep / "done", "");
}

}  // namespace detail

inline StudyReport report_study(const std::filesystem::path& dir);

// Runs (or resumes) a study and writes its report.
inline StudyReport run_study(const StudyConfig& cfg_in) {
  StudyConfig cfg = cfg_in;
  cfg.resolve_defaults();
  cfg.validate();
  const auto dir = study_dir(cfg);
  std::filesystem::create_directories(dir);
  const Json cj = study_config_to_json(cfg);
  const auto cfg_path = dir / "study.json";
  if (std::filesystem::exists(cfg_path)) {
    if (Json::parse(read_text_file(cfg_path)) != cj) throw ValidationError("study directory " + dir.string() + " holds a different configuration");
  } else {
    write_text_file(cfg_path, cj.dump(2) + "\n");
  }

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const int jobs = std::min(cfg.jobs, cfg.n_replicates);
  const int chain_threads =
      cfg.chain_threads > 0 ? cfg.chain_threads : std::clamp(static_cast<int>(hw) / jobs, 1, std::max(1, cfg.fit.sampler.n_chains));
  const auto start = std::chrono::steady_clock::now();
  std::atomic<int> next{1};
  std::mutex err_mutex;
  std::exception_ptr first_error;
  auto worker = [&] {
    for (int k = next++; k <= cfg.n_replicates; k = next++) {
      try {
        detail::run_replicate(cfg, dir, k, chain_threads);
      } catch (...) {
        std::lock_guard lock(err_mutex);
        if (!first_error) first_error = std::current_exception();
        next = cfg.n_replicates + 1;
      }
    }
  };
  std::vector<std::thread> pool;
  for (int i = 0; i < jobs; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);

  StudyReport rep = report_study(dir);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_text_file(dir / "report" / "timing.json", Json{{"wall_seconds", rep.wall_seconds}, {"jobs", jobs}, {"chain_threads", chain_threads}}.dump(2) + "\n");
  return rep;
}

// Reads every replicate artifact under a study directory and writes
// report/{metrics,replicates,curve,curve_replicates,trend,forest,diagnostics}.csv.
// Missing artifacts give a partial report and a warning.
inline StudyReport report_study(const std::filesystem::path& dir) {
  const auto cfg_path = dir / "study.json";
  if (!std::filesystem::exists(cfg_path)) throw ValidationError("report: no study.json in " + dir.string());
  StudyConfig cfg = study_config_from_json(Json::parse(read_text_file(cfg_path)));
  StudyReport rep;
  rep.dir = dir;

  std::map<std::string, std::vector<std::pair<int, FitResult>>> fits;  // by model
  for (int k = 1; k <= cfg.n_replicates; ++k)
    for (ModelId m : cfg.models) {
      const auto p = replicate_dir(dir, k) / ("fit_" + to_string(m) + ".json");
      if (!std::filesystem::exists(p)) {
        ++rep.missing_fits;
        continue;
      }
      fits[to_string(m)].emplace_back(k, fit_from_json(Json::parse(read_text_file(p))));
    }
  if (rep.missing_fits > 0) warn("report: " + std::to_string(rep.missing_fits) + " fit artifacts missing under " + dir.string() + "; report is partial");

  using detail::csv_row;
  using detail::fmt;
  std::string metrics = "scenario,model,estimand,truth,coverage,bias,rmse,looic_mean,n_replicates,mean_abs_error,n_failed,max_rhat,n_divergent\n";
  std::string replicates = "replicate,model,estimand,truth,estimate,lo,hi,covered,converged,looic\n";
  std::string curve = "model,t_star,truth,median,lo,hi,coverage,n_replicates\n";
  std::string curve_reps = "model,replicate,t_star,truth,median,lo,hi\n";
  std::string trend = "model,t,truth,median,lo,hi,n_replicates\n";
  std::string forest = "model,replicate,parameter,median,lo,hi,rhat,ess\n";
  std::string diags = "model,replicate,converged,max_rhat,min_ess,n_divergent,looic,p_loo,frac_pareto_k_above_0_7\n";

  const EffectCurve truth_curve_def = cfg.curve();
  for (ModelId mid : cfg.models) {
    const std::string model = to_string(mid);
    const auto& list = fits[model];
    for (const std::string& est : cfg.estimands()) {
      const double truth = cfg.truth(est);
      std::vector<MetricRow> rows;
      std::vector<double> looics;
      int failed = 0, divergent = 0;
      double max_rhat = std::numeric_limits<double>::quiet_NaN();
      for (const auto& [k, f] : list) {
        const auto it = f.estimands.find(est);
        const bool usable = f.error.empty() && it != f.estimands.end() && std::isfinite(it->second.estimate);
        if (!usable) {
          ++failed;
          continue;
        }
        const MetricRow row = make_metric_row(model, est, truth, it->second.estimate, it->second.lo, it->second.hi);
        rows.push_back(row);
        const double looic = f.loo ? f.loo->looic : std::numeric_limits<double>::quiet_NaN();
        if (std::isfinite(looic)) looics.push_back(looic);
        divergent += f.n_divergent;
        if (std::isfinite(f.max_rhat)) max_rhat = std::isnan(max_rhat) ? f.max_rhat : std::max(max_rhat, f.max_rhat);
        rep.replicates.push_back({k, row, f.converged, looic});
        replicates += csv_row({std::to_string(k), model, est, fmt(truth), fmt(row.estimate), fmt(row.lo), fmt(row.hi), row.covered ? "1" : "0",
                               f.converged ? "1" : "0", fmt(looic)});
      }
      MetricSummaryRow s;
      s.scenario = cfg.scenario;
      s.model = model;
      s.estimand = est;
      s.truth = truth;
      s.n_failed = failed;
      s.n_divergent = divergent;
      s.max_rhat = max_rhat;
      s.looic_mean = detail::mean_of(looics);
      if (!rows.empty()) s.metrics = aggregate_metrics(rows);
      const double nan = std::numeric_limits<double>::quiet_NaN();
      const bool any = !rows.empty();
      metrics += csv_row({s.scenario, model, est, fmt(truth), fmt(any ? s.metrics.coverage : nan), fmt(any ? s.metrics.bias : nan),
                          fmt(any ? s.metrics.rmse : nan), fmt(s.looic_mean), std::to_string(s.metrics.n), fmt(any ? s.metrics.mean_abs_error : nan),
                          std::to_string(failed), fmt(max_rhat), std::to_string(divergent)});
      rep.metrics.push_back(s);
    }

    // curve recovery, averaged over replicates
    if (has_curve(mid)) {
      const int K = cfg.t_star_max();
      for (int t = 1; t <= K; ++t) {
        const double truth = effect_curve(truth_curve_def, t);
        std::vector<double> med, lo, hi;
        int covered = 0;
        for (const auto& [k, f] : list) {
          if (static_cast<int>(f.curve.size()) < t) continue;
          const CurvePoint& p = f.curve[static_cast<std::size_t>(t - 1)];
          med.push_back(p.median);
          lo.push_back(p.lo);
          hi.push_back(p.hi);
          covered += p.lo <= truth && truth <= p.hi;
          curve_reps += csv_row({model, std::to_string(k), std::to_string(t), fmt(truth), fmt(p.median), fmt(p.lo), fmt(p.hi)});
        }
        const double n = static_cast<double>(med.size());
        curve += csv_row({model, std::to_string(t), fmt(truth), fmt(detail::mean_of(med)), fmt(detail::mean_of(lo)), fmt(detail::mean_of(hi)),
                          fmt(med.empty() ? std::numeric_limits<double>::quiet_NaN() : covered / n), std::to_string(med.size())});
      }
    }
    // temporal trend; the generator's population trend is quad_coef * t^2
    if (is_bayesian(mid)) {
      for (int t = 0; t <= cfg.last_period; ++t) {
        std::vector<double> med, lo, hi;
        for (const auto& [k, f] : list) {
          if (static_cast<int>(f.trend.size()) <= t) continue;
          med.push_back(f.trend[static_cast<std::size_t>(t)].median);
          lo.push_back(f.trend[static_cast<std::size_t>(t)].lo);
          hi.push_back(f.trend[static_cast<std::size_t>(t)].hi);
        }
        trend += csv_row({model, std::to_string(t), fmt(cfg.generator.quad_coef * t * t), fmt(detail::mean_of(med)), fmt(detail::mean_of(lo)),
                          fmt(detail::mean_of(hi)), std::to_string(med.size())});
      }
    }
    for (const auto& [k, f] : list) {
      for (const auto& p : f.params) {
        if (p.name.rfind("beta_b[", 0) == 0) continue;
        forest += csv_row({model, std::to_string(k), p.name, fmt(p.median), fmt(p.q2_5), fmt(p.q97_5), fmt(p.rhat), fmt(p.ess)});
      }
      if (f.freq) {
        const auto& q = *f.freq;
        forest += csv_row({model, std::to_string(k), "tau", fmt(q.tau_hat), fmt(q.ci_lo), fmt(q.ci_hi), "nan", "nan"});
      }
      diags += csv_row({model, std::to_string(k), f.converged ? "1" : "0", fmt(f.max_rhat), fmt(f.min_ess), std::to_string(f.n_divergent),
                        fmt(f.loo ? f.loo->looic : std::numeric_limits<double>::quiet_NaN()), fmt(f.loo ? f.loo->p_loo : std::numeric_limits<double>::quiet_NaN()),
                        fmt(f.loo ? f.loo->frac_k_above_0_7 : std::numeric_limits<double>::quiet_NaN())});
    }
  }
  const auto out = dir / "report";
  write_text_file(out / "metrics.csv", metrics);
  write_text_file(out / "replicates.csv", replicates);
  write_text_file(out / "curve.csv", curve);
  write_text_file(out / "curve_replicates.csv", curve_reps);
  write_text_file(out / "trend.csv", trend);
  write_text_file(out / "forest.csv", forest);
  write_text_file(out / "diagnostics.csv", diags);
  return rep;
}

}  // namespace swedge
