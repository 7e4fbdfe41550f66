#pragma once

// Effect-curve functionals (time-averaged and long-term effects) and
// replicate-level metrics.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "common.hpp"
#include "datagen.hpp"
#include "numeric.hpp"
#include "posterior.hpp"

namespace swedge {

// values(d, k) is the effect at exposure time grid[k] = k + 1 under draw d.
struct EffectCurveDraws {
  std::vector<int> grid;
  Eigen::MatrixXd values;

  int t_star_max() const { return grid.empty() ? 0 : grid.back(); }
  std::size_t n_draws() const { return static_cast<std::size_t>(values.rows()); }
};

inline std::vector<int> exposure_grid(int t_star_max) {
  if (t_star_max < 1) throw ValidationError("exposure grid: t*_max must be >= 1");
  std::vector<int> g(static_cast<std::size_t>(t_star_max));
  for (int k = 0; k < t_star_max; ++k) g[static_cast<std::size_t>(k)] = k + 1;
  return g;
}

// Overall effect curve of one posterior draw. Cluster modifiers are left
// out, so the cluster-varying model reports its population curve.
inline double overall_effect(const ModelSpec& spec, const ConstrainedParams& c, int t_star) {
  switch (spec.model) {
    case ModelKind::immediate: throw ValidationError("effect curve: no curve for the immediate-effect model");
    case ModelKind::time_varying:
    case ModelKind::cluster_varying: return (*spec.exposure_basis)(t_star).dot(c.beta_star);
    case ModelKind::monotone: return c.delta * monotone_fraction(c.simplex, t_star);
  }
  return 0.0;
}

inline EffectCurveDraws effect_curve_draws(const ModelSpec& spec, const std::vector<ConstrainedParams>& draws, int t_star_max) {
  if (spec.model == ModelKind::immediate) throw ValidationError("effect curve: no curve for the immediate-effect model");
  EffectCurveDraws out;
  out.grid = exposure_grid(t_star_max);
  out.values.resize(static_cast<Eigen::Index>(draws.size()), t_star_max);
  for (std::size_t d = 0; d < draws.size(); ++d)
    for (int k = 0; k < t_star_max; ++k) out.values(static_cast<Eigen::Index>(d), k) = overall_effect(spec, draws[d], k + 1);
  return out;
}

// Unconstrained draws (one per row) mapped through the model transform.
inline EffectCurveDraws effect_curve_draws(const ModelSpec& spec, const Eigen::MatrixXd& unconstrained, int t_star_max) {
  const ParameterLayout layout(spec);
  if (unconstrained.cols() != layout.dim) throw ValidationError("effect curve: draw width does not match the model");
  std::vector<ConstrainedParams> c;
  c.reserve(static_cast<std::size_t>(unconstrained.rows()));
  for (Eigen::Index d = 0; d < unconstrained.rows(); ++d) c.push_back(constrain(spec, layout, unconstrained.row(d).transpose()));
  return effect_curve_draws(spec, c, t_star_max);
}

// A known curve as a single-draw EffectCurveDraws.
inline EffectCurveDraws truth_curve(const EffectCurve& curve, int t_star_max) {
  EffectCurveDraws out;
  out.grid = exposure_grid(t_star_max);
  out.values.resize(1, t_star_max);
  for (int k = 0; k < t_star_max; ++k) out.values(0, k) = effect_curve(curve, k + 1);
  return out;
}

enum class FunctionalSummary { per_draw, plugin };

inline std::string to_string(FunctionalSummary f) { return f == FunctionalSummary::per_draw ? "per_draw" : "plugin"; }

inline FunctionalSummary parse_functional_summary(std::string_view s) {
  if (s == "per_draw") return FunctionalSummary::per_draw;
  if (s == "plugin") return FunctionalSummary::plugin;
  throw ValidationError("unknown functional summary: " + std::string(s));
}

struct EstimandSummary {
  double estimate = 0.0;  // posterior median of the functional, or the plug-in value
  double mean = 0.0;
  double lo = 0.0;  // equal-tailed 95% interval of the per-draw functional
  double hi = 0.0;
  std::vector<double> draws;
};

namespace detail {

template <class Functional>
EstimandSummary summarize_functional(const EffectCurveDraws& c, FunctionalSummary mode, Functional&& fn) {
  if (c.values.rows() == 0 || c.values.cols() == 0) throw ValidationError("estimand: no curve draws");
  EstimandSummary s;
  s.draws.resize(c.n_draws());
  for (Eigen::Index d = 0; d < c.values.rows(); ++d) s.draws[static_cast<std::size_t>(d)] = fn(Eigen::VectorXd(c.values.row(d).transpose()));
  std::vector<double> sorted = s.draws;
  std::sort(sorted.begin(), sorted.end());
  s.mean = mean(s.draws);
  s.lo = quantile_sorted(sorted, 0.025);
  s.hi = quantile_sorted(sorted, 0.975);
  if (mode == FunctionalSummary::per_draw) {
    s.estimate = quantile_sorted(sorted, 0.5);
  } else {
    // functional of the pointwise posterior median curve
    Eigen::VectorXd med(c.values.cols());
    for (Eigen::Index k = 0; k < c.values.cols(); ++k) {
      std::vector<double> col(c.values.col(k).data(), c.values.col(k).data() + c.values.rows());
      std::sort(col.begin(), col.end());
      med[k] = quantile_sorted(col, 0.5);
    }
    s.estimate = fn(med);
  }
  return s;
}

}  // namespace detail

// Right-hand Riemann sum over exposure times 1..t*_max, divided by t*_max.
inline double tate_value(const Eigen::VectorXd& curve) {
  double s = 0.0;
  for (Eigen::Index k = 0; k < curve.size(); ++k) s += curve[k];
  return s / static_cast<double>(curve.size());
}

inline double lte_value(const Eigen::VectorXd& curve) { return curve[curve.size() - 1]; }

inline EstimandSummary tate(const EffectCurveDraws& c, FunctionalSummary mode = FunctionalSummary::per_draw) {
  return detail::summarize_functional(c, mode, tate_value);
}

inline EstimandSummary lte(const EffectCurveDraws& c, FunctionalSummary mode = FunctionalSummary::per_draw) {
  return detail::summarize_functional(c, mode, lte_value);
}

inline double true_tate(const EffectCurve& curve, int t_star_max) { return tate(truth_curve(curve, t_star_max)).estimate; }
inline double true_lte(const EffectCurve& curve, int t_star_max) { return lte(truth_curve(curve, t_star_max)).estimate; }

// ---------------------------------------------------------------------------
// Replicate metrics.

struct MetricRow {
  std::string model;
  std::string estimand;  // tau, TATE or LTE
  double truth = 0.0;
  double estimate = 0.0;
  double lo = 0.0;
  double hi = 0.0;
  bool covered = false;
};

inline MetricRow make_metric_row(std::string model, std::string estimand, double truth, double estimate, double lo, double hi) {
  if (!(lo <= hi)) throw ValidationError("metric row: interval bounds out of order");
  return {std::move(model), std::move(estimand), truth, estimate, lo, hi, lo <= truth && truth <= hi};
}

struct AggregateMetrics {
  int n = 0;
  double coverage = 0.0;
  double bias = 0.0;            // |mean(estimate - truth)|
  double mean_abs_error = 0.0;  // mean |estimate - truth|
  double rmse = 0.0;
};

inline AggregateMetrics aggregate_metrics(const std::vector<MetricRow>& rows) {
  if (rows.empty()) throw ValidationError("aggregate_metrics: no rows");
  AggregateMetrics m;
  m.n = static_cast<int>(rows.size());
  double err = 0.0, abs_err = 0.0, sq = 0.0;
  int covered = 0;
  for (const auto& r : rows) {
    const double e = r.estimate - r.truth;
    err += e;
    abs_err += std::abs(e);
    sq += e * e;
    covered += r.covered;
  }
  m.coverage = static_cast<double>(covered) / m.n;
  m.bias = std::abs(err / m.n);
  m.mean_abs_error = abs_err / m.n;
  m.rmse = std::sqrt(sq / m.n);
  return m;
}

}  // namespace swedge
