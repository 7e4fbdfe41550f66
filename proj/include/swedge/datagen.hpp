#pragma once

// Synthetic stepped-wedge data:
//   y_ijt = alpha_j + s_j(t) + effect_j(t*) * A_jt + eps_ijt
//   s_j(t) = quad_coef * t^2 + gamma_jt,  (gamma_j0..gamma_jT) stationary AR(1)
// with the effect either a constant or a curve in exposure time, optionally
// scaled per cluster by exp(u_j).

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "common.hpp"
#include "design.hpp"

namespace swedge {

struct EffectCurve {
  enum class Kind { constant, scenario1, scenario2, table };
  Kind kind = Kind::constant;
  double value = 0.0;         // constant kind
  std::vector<double> table;  // table kind: table[t*], last entry held beyond the end

  static EffectCurve constant(double v) { return {Kind::constant, v, {}}; }
  static EffectCurve scenario1() { return {Kind::scenario1, 0.0, {}}; }
  static EffectCurve scenario2() { return {Kind::scenario2, 0.0, {}}; }
  static EffectCurve from_table(std::vector<double> t) { return {Kind::table, 0.0, std::move(t)}; }
};

// Effect at exposure time t* (t* = 0 means unexposed). The scenario curves
// use t* wherever the formula's exponent is written in t.
inline double effect_curve(const EffectCurve& curve, double t_star) {
  if (t_star < 0) throw ValidationError("effect_curve: negative exposure time");
  switch (curve.kind) {
    case EffectCurve::Kind::constant:
      return curve.value;
    case EffectCurve::Kind::scenario1:
      if (t_star == 0) return 0.0;
      return 5.0 / (1.0 + 2.0 * std::exp(-t_star));
    case EffectCurve::Kind::scenario2:
      if (t_star == 0) return 0.0;
      if (t_star < 5) return 5.0 / (1.0 + std::exp(-5.0 * (t_star - 1.0)));
      return 2.5 + 5.0 / (1.0 + std::exp(2.0 * (t_star - 5.0)));
    case EffectCurve::Kind::table: {
      if (curve.table.empty()) throw ValidationError("effect_curve: empty table");
      const auto i = static_cast<std::size_t>(t_star);
      return curve.table[std::min(i, curve.table.size() - 1)];
    }
  }
  return 0.0;
}

struct GenConfig {
  double sigma_alpha = 0.5;  // sd of cluster intercepts
  double quad_coef = -0.01;
  double d_scale = 0.6;      // sd of the cluster temporal deviations
  double rho = 0.95;         // AR(1) correlation between adjacent periods
  double sigma_eps = 1.0;
  double sigma_u = 0.2;      // sd of log cluster effect modifiers
  std::uint64_t seed = 1;

  void validate() const {
    if (sigma_alpha < 0 || d_scale < 0 || sigma_eps < 0 || sigma_u < 0) throw ValidationError("GenConfig: standard deviations must be >= 0");
    if (!(std::abs(rho) < 1.0)) throw ValidationError("GenConfig: |rho| must be < 1");
  }
};

// Stationary AR(1) path of length n_points with marginal sd d_scale and
// lag-k correlation rho^k, i.e. a draw from MVN(0, D R D).
inline std::vector<double> gen_ar1_temporal(int n_points, double d_scale, double rho, Rng& rng) {
  if (!(std::abs(rho) < 1.0)) throw ValidationError("gen_ar1_temporal: |rho| must be < 1");
  std::normal_distribution<double> z;
  std::vector<double> g(static_cast<std::size_t>(std::max(n_points, 0)));
  const double innov = d_scale * std::sqrt(1.0 - rho * rho);
  for (std::size_t k = 0; k < g.size(); ++k) g[k] = k == 0 ? d_scale * z(rng) : rho * g[k - 1] + innov * z(rng);
  return g;
}

// Per-cluster latent quantities of one generated dataset.
struct ClusterTruth {
  double alpha = 0.0;
  std::vector<double> gamma;  // per period
  double u = 0.0;
};

namespace detail {

enum StreamTag : std::uint64_t { kIntercept = 1, kTemporal = 2, kModifier = 3, kNoise = 4 };

inline ClusterTruth draw_cluster(const TrialDesign& design, const GenConfig& cfg, int cluster) {
  ClusterTruth c;
  Rng a = make_stream(cfg.seed, cluster, kIntercept);
  c.alpha = cfg.sigma_alpha * std::normal_distribution<double>()(a);
  Rng g = make_stream(cfg.seed, cluster, kTemporal);
  c.gamma = gen_ar1_temporal(design.n_periods(), cfg.d_scale, cfg.rho, g);
  Rng u = make_stream(cfg.seed, cluster, kModifier);
  c.u = cfg.sigma_u * std::normal_distribution<double>()(u);
  return c;
}

template <class EffectFn>
PanelDataset generate(const TrialDesign& design, const GenConfig& cfg, EffectFn&& effect, std::vector<ClusterTruth>* truth) {
  design.validate();
  cfg.validate();
  if (design.individuals_per_cell < 1) throw ValidationError("generate: individuals_per_cell must be >= 1");
  PanelDataset ds;
  ds.design = design;
  ds.family = Family::gaussian;
  ds.observations.reserve(static_cast<std::size_t>(design.n_clusters * design.n_periods() * design.individuals_per_cell));
  if (truth) truth->clear();
  for (int j = 0; j < design.n_clusters; ++j) {
    const ClusterTruth c = draw_cluster(design, cfg, j);
    Rng noise = make_stream(cfg.seed, j, kNoise);
    std::normal_distribution<double> z;
    for (int t = 0; t < design.n_periods(); ++t) {
      const int a = design.treated(j, t);
      const int ts = design.exposure(j, t);
      const double mu = c.alpha + cfg.quad_coef * t * t + c.gamma[static_cast<std::size_t>(t)] + (a ? effect(ts, c) : 0.0);
      for (int i = 0; i < design.individuals_per_cell; ++i) {
        PanelObservation o;
        o.cluster = j;
        o.period = t;
        o.exposure = ts;
        o.treated = a;
        o.y = mu + cfg.sigma_eps * z(noise);
        ds.observations.push_back(std::move(o));
      }
    }
    if (truth) truth->push_back(c);
  }
  return ds;
}

}  // namespace detail

// Immediate, constant effect tau.
inline PanelDataset gen_immediate(const TrialDesign& design, const GenConfig& cfg, double tau, std::vector<ClusterTruth>* truth = nullptr) {
  return detail::generate(design, cfg, [tau](int, const ClusterTruth&) { return tau; }, truth);
}

// Effect tau(t*), times exp(u_j) when cluster_specific.
inline PanelDataset gen_time_varying(const TrialDesign& design, const GenConfig& cfg, const EffectCurve& curve, bool cluster_specific,
                                     std::vector<ClusterTruth>* truth = nullptr) {
  return detail::generate(
      design, cfg,
      [&](int t_star, const ClusterTruth& c) {
        const double base = effect_curve(curve, t_star);
        return cluster_specific ? base * std::exp(c.u) : base;
      },
      truth);
}

// Default layouts for the named simulation scenarios.
struct ScenarioDefaults {
  int n_clusters;
  int last_period;
  int individuals_per_cell;
};

inline ScenarioDefaults scenario_defaults(const std::string& scenario) {
  if (scenario == "immediate") return {10, 12, 10};
  if (scenario == "s1") return {10, 17, 10};
  if (scenario == "s2" || scenario == "s3") return {10, 22, 10};
  throw ValidationError("unknown scenario: " + scenario);
}

inline EffectCurve scenario_curve(const std::string& scenario, double tau = 0.0) {
  if (scenario == "immediate") return EffectCurve::constant(tau);
  if (scenario == "s1") return EffectCurve::scenario1();
  if (scenario == "s2" || scenario == "s3") return EffectCurve::scenario2();
  throw ValidationError("unknown scenario: " + scenario);
}

}  // namespace swedge
