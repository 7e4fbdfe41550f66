#pragma once

// Log posterior densities of the hierarchical penalized-spline models.
//
//   eta = alpha + beta_b[j] . B(t) + effect(t*, j) * A + gamma . x
//
//   model            effect(t*, j)
//   immediate        tau
//   time_varying     beta_star . B*(t*)
//   cluster_varying  beta_star . B*(t*) * exp(u_j)
//   monotone         delta * sum_{g <= min(t*, K)} simplex_g
//
// Priors
//   alpha ~ N(0, 1)                     beta_b[j] ~ N(beta, sigma_b^2 I)
//   beta_1 ~ N(0, 1)                    beta_m ~ N(beta_{m-1}, sigma_beta^2)
//   sigma_b, sigma_eps ~ half-t(3, 0, 2.5)
//   sigma_beta, sigma_beta_star ~ half-N(0, 1)
//   tau, delta ~ N(0, 5^2)              beta_star: random walk like beta
//   u_j ~ N(0, sigma_u^2)               sigma_u ~ half-N(0, 0.2^2)
//   simplex ~ Dirichlet(omega)          omega ~ U(0.01, 100)
//   covariate coefficients ~ N(0, 1)
//
// In second-difference-penalty mode the random walk on beta_2..beta_p is
// replaced by -0.5 * lambda * sum_m d_m^2, lambda ~ half-t(3, 0, 2.5).
//
// All parameters are sampled on an unconstrained scale: log for scales,
// stick-breaking for the simplex, scaled logit for omega. The returned
// density includes the log Jacobians.

#include <cmath>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "basis.hpp"
#include "common.hpp"
#include "design.hpp"
#include "numeric.hpp"

namespace swedge {

enum class ModelKind { immediate, time_varying, cluster_varying, monotone };
enum class SmoothnessMode { random_walk_prior, second_difference_penalty };
enum class PenaltyForm { printed, conventional };

inline std::string to_string(ModelKind m) {
  switch (m) {
    case ModelKind::immediate: return "immediate";
    case ModelKind::time_varying: return "time_varying";
    case ModelKind::cluster_varying: return "cluster_varying";
    case ModelKind::monotone: return "monotone";
  }
  return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "immediate") return ModelKind::immediate;
  if (s == "time_varying") return ModelKind::time_varying;
  if (s == "cluster_varying") return ModelKind::cluster_varying;
  if (s == "monotone") return ModelKind::monotone;
  throw ValidationError("unknown model kind: " + std::string(s));
}

inline std::string to_string(SmoothnessMode m) {
  return m == SmoothnessMode::random_walk_prior ? "random_walk_prior" : "second_difference_penalty";
}

inline SmoothnessMode parse_smoothness(std::string_view s) {
  if (s == "random_walk_prior" || s == "random_walk") return SmoothnessMode::random_walk_prior;
  if (s == "second_difference_penalty" || s == "penalty") return SmoothnessMode::second_difference_penalty;
  throw ValidationError("unknown smoothness mode: " + std::string(s));
}

inline std::string to_string(PenaltyForm f) { return f == PenaltyForm::printed ? "printed" : "conventional"; }

inline PenaltyForm parse_penalty_form(std::string_view s) {
  if (s == "printed") return PenaltyForm::printed;
  if (s == "conventional") return PenaltyForm::conventional;
  throw ValidationError("unknown penalty form: " + std::string(s));
}

struct ModelSpec {
  ModelKind model = ModelKind::immediate;
  Family family = Family::gaussian;
  Link link = Link::identity;
  SmoothnessMode smoothness = SmoothnessMode::random_walk_prior;
  PenaltyForm penalty_form = PenaltyForm::printed;
  SplineBasis time_basis;
  std::optional<SplineBasis> exposure_basis;
  int n_clusters = 1;
  int n_covariates = 0;
  int simplex_size = 0;  // monotone only: number of exposure steps K
  double sigma_u_scale = 0.2;

  bool uses_exposure_spline() const { return model == ModelKind::time_varying || model == ModelKind::cluster_varying; }

  void validate() const {
    if (link != canonical_link(family)) throw ValidationError("ModelSpec: only canonical links are supported");
    if (uses_exposure_spline() != exposure_basis.has_value()) throw ValidationError("ModelSpec: exposure basis presence does not match model");
    if (n_clusters < 1) throw ValidationError("ModelSpec: n_clusters must be >= 1");
    if (n_covariates < 0) throw ValidationError("ModelSpec: negative covariate count");
    if (model == ModelKind::monotone && simplex_size < 1) throw ValidationError("ModelSpec: monotone model needs simplex_size >= 1");
    if (smoothness == SmoothnessMode::second_difference_penalty && time_basis.size() < 3)
      throw ValidationError("ModelSpec: penalty mode needs at least 3 spline coefficients");
  }
};

struct ModelOptions {
  SmoothnessMode smoothness = SmoothnessMode::random_walk_prior;
  PenaltyForm penalty_form = PenaltyForm::printed;
  int n_quantiles = 6;
  int degree = 3;
  std::optional<int> t_star_max;  // default last_period - 2
};

inline int default_t_star_max(const TrialDesign& d) { return std::max(1, d.last_period - 2); }

// Time basis over study times {0..T}; exposure basis over {0..max exposure}.
inline ModelSpec make_model_spec(ModelKind kind, const PanelDataset& data, const ModelOptions& opt = {}) {
  ModelSpec s;
  s.model = kind;
  s.family = data.family;
  s.link = canonical_link(data.family);
  s.smoothness = opt.smoothness;
  s.penalty_form = opt.penalty_form;
  s.time_basis = integer_grid_basis(data.design.last_period, opt.n_quantiles, opt.degree);
  if (s.uses_exposure_spline()) s.exposure_basis = integer_grid_basis(std::max(1, data.design.max_exposure()), opt.n_quantiles, opt.degree);
  s.n_clusters = data.design.n_clusters;
  s.n_covariates = data.n_covariates();
  if (kind == ModelKind::monotone) s.simplex_size = opt.t_star_max.value_or(default_t_star_max(data.design));
  s.validate();
  return s;
}

// Offsets of each parameter block in the unconstrained vector (-1 = absent).
struct ParameterLayout {
  int alpha = -1, beta = -1, beta_b = -1, log_sigma_b = -1, log_sigma_beta = -1, log_lambda = -1;
  int tau = -1, beta_star = -1, log_sigma_beta_star = -1, u = -1, log_sigma_u = -1;
  int delta = -1, simplex_raw = -1, omega_raw = -1, log_sigma_eps = -1, gamma = -1;
  int p = 0, p_star = 0, n_clusters = 0, n_cov = 0, simplex_size = 0;
  int dim = 0;

  ParameterLayout() = default;

  explicit ParameterLayout(const ModelSpec& s) {
    p = s.time_basis.size();
    p_star = s.exposure_basis ? s.exposure_basis->size() : 0;
    n_clusters = s.n_clusters;
    n_cov = s.n_covariates;
    simplex_size = s.model == ModelKind::monotone ? s.simplex_size : 0;
    auto take = [this](int n) {
      const int at = dim;
      dim += n;
      return at;
    };
    alpha = take(1);
    beta = take(p);
    beta_b = take(n_clusters * p);
    log_sigma_b = take(1);
    if (s.smoothness == SmoothnessMode::random_walk_prior)
      log_sigma_beta = take(1);
    else
      log_lambda = take(1);
    switch (s.model) {
      case ModelKind::immediate: tau = take(1); break;
      case ModelKind::cluster_varying:
        u = take(n_clusters);
        log_sigma_u = take(1);
        [[fallthrough]];
      case ModelKind::time_varying:
        beta_star = take(p_star);
        log_sigma_beta_star = take(1);
        break;
      case ModelKind::monotone:
        delta = take(1);
        simplex_raw = take(simplex_size - 1);
        omega_raw = take(1);
        break;
    }
    if (s.family == Family::gaussian) log_sigma_eps = take(1);
    gamma = take(n_cov);
  }

  std::vector<std::string> unconstrained_names() const {
    std::vector<std::string> n(static_cast<std::size_t>(dim));
    auto put = [&](int at, const std::string& name) { n[static_cast<std::size_t>(at)] = name; };
    name_blocks(put, "log_", "_raw");
    return n;
  }

  // Names of the constrained view; the simplex has simplex_size entries.
  std::vector<std::string> constrained_names() const {
    std::vector<std::string> out;
    auto idx = [](int i) { return "[" + std::to_string(i + 1) + "]"; };
    out.emplace_back("alpha");
    for (int m = 0; m < p; ++m) out.push_back("beta" + idx(m));
    for (int j = 0; j < n_clusters; ++j)
      for (int m = 0; m < p; ++m) out.push_back("beta_b" + idx(j) + idx(m));
    out.emplace_back("sigma_b");
    if (log_sigma_beta >= 0) out.emplace_back("sigma_beta");
    if (log_lambda >= 0) out.emplace_back("lambda");
    if (tau >= 0) out.emplace_back("tau");
    if (u >= 0) {
      for (int j = 0; j < n_clusters; ++j) out.push_back("u" + idx(j));
      out.emplace_back("sigma_u");
    }
    if (beta_star >= 0) {
      for (int m = 0; m < p_star; ++m) out.push_back("beta_star" + idx(m));
      out.emplace_back("sigma_beta_star");
    }
    if (delta >= 0) {
      out.emplace_back("delta");
      for (int k = 0; k < simplex_size; ++k) out.push_back("simplex" + idx(k));
      out.emplace_back("omega");
    }
    if (log_sigma_eps >= 0) out.emplace_back("sigma_eps");
    for (int c = 0; c < n_cov; ++c) out.push_back("gamma" + idx(c));
    return out;
  }

 private:
  template <class Put>
  void name_blocks(Put&& put, const std::string& log_prefix, const std::string& raw_suffix) const {
    auto idx = [](int i) { return "[" + std::to_string(i + 1) + "]"; };
    put(alpha, "alpha");
    for (int m = 0; m < p; ++m) put(beta + m, "beta" + idx(m));
    for (int j = 0; j < n_clusters; ++j)
      for (int m = 0; m < p; ++m) put(beta_b + j * p + m, "beta_b" + idx(j) + idx(m));
    put(log_sigma_b, log_prefix + "sigma_b");
    if (log_sigma_beta >= 0) put(log_sigma_beta, log_prefix + "sigma_beta");
    if (log_lambda >= 0) put(log_lambda, log_prefix + "lambda");
    if (tau >= 0) put(tau, "tau");
    if (u >= 0) {
      for (int j = 0; j < n_clusters; ++j) put(u + j, "u" + idx(j));
      put(log_sigma_u, log_prefix + "sigma_u");
    }
    if (beta_star >= 0) {
      for (int m = 0; m < p_star; ++m) put(beta_star + m, "beta_star" + idx(m));
      put(log_sigma_beta_star, log_prefix + "sigma_beta_star");
    }
    if (delta >= 0) {
      put(delta, "delta");
      for (int k = 0; k + 1 < simplex_size; ++k) put(simplex_raw + k, "simplex" + raw_suffix + idx(k));
      put(omega_raw, "omega" + raw_suffix);
    }
    if (log_sigma_eps >= 0) put(log_sigma_eps, log_prefix + "sigma_eps");
    for (int c = 0; c < n_cov; ++c) put(gamma + c, "gamma" + idx(c));
  }
};

inline constexpr double kOmegaLo = 0.01;
inline constexpr double kOmegaHi = 100.0;

struct ConstrainedParams {
  double alpha = 0.0;
  Eigen::VectorXd beta;
  Eigen::MatrixXd beta_b;  // n_clusters x p
  double sigma_b = 0.0;
  double sigma_beta = std::numeric_limits<double>::quiet_NaN();
  double lambda = std::numeric_limits<double>::quiet_NaN();
  double tau = 0.0;
  Eigen::VectorXd beta_star;
  double sigma_beta_star = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd u;
  double sigma_u = std::numeric_limits<double>::quiet_NaN();
  double delta = 0.0;
  Eigen::VectorXd simplex;
  Eigen::VectorXd log_simplex;
  double omega = std::numeric_limits<double>::quiet_NaN();
  double sigma_eps = std::numeric_limits<double>::quiet_NaN();
  Eigen::VectorXd gamma;
  double log_jacobian = 0.0;
};

namespace detail {

// Stick-breaking: K-1 reals -> K-simplex, computed in log space.
struct StickBreaking {
  Eigen::VectorXd z;      // K-1 break fractions
  Eigen::VectorXd log_x;  // K
  double log_jacobian = 0.0;
};

inline StickBreaking stick_break(const Eigen::Ref<const Eigen::VectorXd>& y, int K) {
  StickBreaking sb;
  sb.z.resize(K - 1);
  sb.log_x.resize(K);
  double log_r = 0.0;
  for (int k = 0; k + 1 < K; ++k) {
    const double a = y[k] - std::log(static_cast<double>(K - k - 1));
    const double log_z = -log1p_exp(-a);
    const double log_1mz = -log1p_exp(a);
    sb.z[k] = inv_logit(a);
    sb.log_x[k] = log_r + log_z;
    sb.log_jacobian += log_z + log_1mz + log_r;
    log_r += log_1mz;
  }
  sb.log_x[K - 1] = log_r;
  return sb;
}

// Given d(target)/d(log x_k) (excluding the Jacobian), returns
// d(target + log_jacobian)/dy.
inline Eigen::VectorXd stick_break_backward(const StickBreaking& sb, const Eigen::VectorXd& g_log_x) {
  const auto K = static_cast<int>(g_log_x.size());
  Eigen::VectorXd gy(K - 1);
  double adj_r = g_log_x[K - 1];
  for (int k = K - 2; k >= 0; --k) {
    const double g_log_z = g_log_x[k] + 1.0;
    const double g_log_1mz = adj_r + 1.0;
    gy[k] = g_log_z * (1.0 - sb.z[k]) - g_log_1mz * sb.z[k];
    adj_r = g_log_x[k] + adj_r + 1.0;
  }
  return gy;
}

inline double half_normal_lpdf(double x, double scale) { return std::numbers::ln2 + normal_lpdf(x, 0.0, scale); }
inline double half_normal_dx(double x, double scale) { return -x / (scale * scale); }

// Half Student-t with nu degrees of freedom and the given scale, x >= 0.
inline double half_t_lpdf(double x, double nu, double scale) {
  return std::numbers::ln2 + std::lgamma(0.5 * (nu + 1.0)) - std::lgamma(0.5 * nu) - 0.5 * std::log(nu * std::numbers::pi) - std::log(scale) -
         0.5 * (nu + 1.0) * std::log1p((x / scale) * (x / scale) / nu);
}
inline double half_t_dx(double x, double nu, double scale) { return -(nu + 1.0) * x / (nu * scale * scale + x * x); }

inline constexpr double kScaleT = 2.5;
inline constexpr double kNuT = 3.0;

}  // namespace detail

inline ConstrainedParams constrain(const ModelSpec& spec, const ParameterLayout& L, const Eigen::Ref<const Eigen::VectorXd>& x) {
  if (x.size() != L.dim) throw ValidationError("constrain: parameter vector has wrong dimension");
  ConstrainedParams c;
  auto scale = [&](int at) {
    c.log_jacobian += x[at];
    return std::exp(x[at]);
  };
  c.alpha = x[L.alpha];
  c.beta = x.segment(L.beta, L.p);
  c.beta_b = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(x.data() + L.beta_b, L.n_clusters, L.p);
  c.sigma_b = scale(L.log_sigma_b);
  if (L.log_sigma_beta >= 0) c.sigma_beta = scale(L.log_sigma_beta);
  if (L.log_lambda >= 0) c.lambda = scale(L.log_lambda);
  if (L.tau >= 0) c.tau = x[L.tau];
  if (L.beta_star >= 0) {
    c.beta_star = x.segment(L.beta_star, L.p_star);
    c.sigma_beta_star = scale(L.log_sigma_beta_star);
  }
  if (L.u >= 0) {
    c.u = x.segment(L.u, L.n_clusters);
    c.sigma_u = scale(L.log_sigma_u);
  }
  if (L.delta >= 0) {
    c.delta = x[L.delta];
    const auto sb = detail::stick_break(x.segment(L.simplex_raw, L.simplex_size - 1), L.simplex_size);
    c.log_simplex = sb.log_x;
    c.simplex = sb.log_x.array().exp();
    c.log_jacobian += sb.log_jacobian;
    const double w = x[L.omega_raw];
    c.omega = kOmegaLo + (kOmegaHi - kOmegaLo) * inv_logit(w);
    c.log_jacobian += std::log(kOmegaHi - kOmegaLo) - log1p_exp(-w) - log1p_exp(w);
  }
  if (L.log_sigma_eps >= 0) c.sigma_eps = scale(L.log_sigma_eps);
  c.gamma = x.segment(L.gamma, L.n_cov);
  (void)spec;
  return c;
}

// Constrained values in the order of ParameterLayout::constrained_names().
inline Eigen::VectorXd flatten(const ParameterLayout& L, const ConstrainedParams& c) {
  std::vector<double> v;
  v.push_back(c.alpha);
  for (int m = 0; m < L.p; ++m) v.push_back(c.beta[m]);
  for (int j = 0; j < L.n_clusters; ++j)
    for (int m = 0; m < L.p; ++m) v.push_back(c.beta_b(j, m));
  v.push_back(c.sigma_b);
  if (L.log_sigma_beta >= 0) v.push_back(c.sigma_beta);
  if (L.log_lambda >= 0) v.push_back(c.lambda);
  if (L.tau >= 0) v.push_back(c.tau);
  if (L.u >= 0) {
    for (int j = 0; j < L.n_clusters; ++j) v.push_back(c.u[j]);
    v.push_back(c.sigma_u);
  }
  if (L.beta_star >= 0) {
    for (int m = 0; m < L.p_star; ++m) v.push_back(c.beta_star[m]);
    v.push_back(c.sigma_beta_star);
  }
  if (L.delta >= 0) {
    v.push_back(c.delta);
    for (int k = 0; k < L.simplex_size; ++k) v.push_back(c.simplex[k]);
    v.push_back(c.omega);
  }
  if (L.log_sigma_eps >= 0) v.push_back(c.sigma_eps);
  for (int k = 0; k < L.n_cov; ++k) v.push_back(c.gamma[k]);
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Cumulative simplex weight reached at exposure t* (capped at K steps).
inline double monotone_fraction(const Eigen::VectorXd& simplex, int t_star) {
  const int k = std::min<int>(t_star, static_cast<int>(simplex.size()));
  return k <= 0 ? 0.0 : simplex.head(k).sum();
}

// Treatment effect at exposure t* for cluster j, excluding the A factor.
inline double treatment_effect(const ModelSpec& spec, const ConstrainedParams& c, int t_star, int cluster) {
  switch (spec.model) {
    case ModelKind::immediate: return c.tau;
    case ModelKind::time_varying: return (*spec.exposure_basis)(t_star).dot(c.beta_star);
    case ModelKind::cluster_varying: return (*spec.exposure_basis)(t_star).dot(c.beta_star) * std::exp(c.u[cluster]);
    case ModelKind::monotone: return c.delta * monotone_fraction(c.simplex, t_star);
  }
  return 0.0;
}

inline double linear_predictor(const ModelSpec& spec, const ConstrainedParams& c, const PanelObservation& o) {
  double eta = c.alpha + spec.time_basis(o.period).dot(c.beta_b.row(o.cluster).transpose());
  if (o.treated) eta += treatment_effect(spec, c, o.exposure, o.cluster);
  for (int k = 0; k < static_cast<int>(o.covariates.size()); ++k) eta += c.gamma[k] * o.covariates[static_cast<std::size_t>(k)];
  return eta;
}

// 0.5 * lambda * sum_{m=2}^{p-1} d_m^2 with d_m = beta_{m-1} + c beta_m + beta_{m+1},
// c = -1 for the printed form and -2 for the conventional second difference.
inline double penalty_term(const Eigen::Ref<const Eigen::VectorXd>& beta, double lambda, PenaltyForm form = PenaltyForm::printed) {
  const double c = form == PenaltyForm::printed ? -1.0 : -2.0;
  double s = 0.0;
  for (Eigen::Index m = 1; m + 1 < beta.size(); ++m) {
    const double d = beta[m - 1] + c * beta[m] + beta[m + 1];
    s += d * d;
  }
  return 0.5 * lambda * s;
}

struct LogDensityResult {
  double value = 0.0;
  Eigen::VectorXd gradient;
};

struct DensityParts {
  double likelihood = 0.0;
  double prior = 0.0;
  double log_jacobian = 0.0;
};

class LogPosterior {
 public:
  LogPosterior(ModelSpec spec, const PanelDataset& data) : spec_(std::move(spec)), layout_(spec_) {
    spec_.validate();
    if (data.family != spec_.family) throw ValidationError("LogPosterior: dataset family does not match model");
    if (data.design.n_clusters != spec_.n_clusters) throw ValidationError("LogPosterior: cluster count mismatch");
    if (data.n_covariates() != spec_.n_covariates) throw ValidationError("LogPosterior: covariate count mismatch");
    const int n_periods = data.design.n_periods();
    time_rows_.resize(n_periods, layout_.p);
    for (int t = 0; t < n_periods; ++t) time_rows_.row(t) = spec_.time_basis(t).transpose();
    max_exposure_ = data.design.max_exposure();
    if (spec_.exposure_basis) {
      exposure_rows_.resize(max_exposure_ + 1, layout_.p_star);
      for (int e = 0; e <= max_exposure_; ++e) exposure_rows_.row(e) = (*spec_.exposure_basis)(e).transpose();
    }
    build_groups(data);
  }

  const ModelSpec& spec() const { return spec_; }
  const ParameterLayout& layout() const { return layout_; }
  int dim() const { return layout_.dim; }
  std::size_t n_observations() const { return obs_group_.size(); }

  ConstrainedParams constrain(const Eigen::Ref<const Eigen::VectorXd>& x) const { return swedge::constrain(spec_, layout_, x); }

  LogDensityResult operator()(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    LogDensityResult r;
    r.gradient.resize(layout_.dim);
    r.value = evaluate(x, &r.gradient, nullptr);
    return r;
  }

  double log_density(const Eigen::Ref<const Eigen::VectorXd>& x) const { return evaluate(x, nullptr, nullptr); }

  DensityParts parts(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    DensityParts d;
    evaluate(x, nullptr, &d);
    return d;
  }

  // Per-observation log likelihood, in dataset row order.
  Eigen::VectorXd pointwise_log_lik(const Eigen::Ref<const Eigen::VectorXd>& x) const {
    const ConstrainedParams c = constrain(x);
    const Eigen::VectorXd eta = group_eta(c);
    Eigen::VectorXd out(static_cast<Eigen::Index>(obs_group_.size()));
    for (std::size_t i = 0; i < obs_group_.size(); ++i) {
      const double e = eta[obs_group_[i]];
      const double y = obs_y_[i];
      switch (spec_.family) {
        case Family::gaussian: out[static_cast<Eigen::Index>(i)] = normal_lpdf(y, e, c.sigma_eps); break;
        case Family::bernoulli: out[static_cast<Eigen::Index>(i)] = y * e - log1p_exp(e); break;
        case Family::poisson: out[static_cast<Eigen::Index>(i)] = y * e - std::exp(e) - std::lgamma(y + 1.0); break;
      }
    }
    return out;
  }

  double log_likelihood(const Eigen::Ref<const Eigen::VectorXd>& x) const { return parts(x).likelihood; }

 private:
  struct Group {
    int cluster = 0, period = 0, exposure = 0, treated = 0;
    std::vector<double> cov;
    double n = 0;
    double sum_y = 0;        // bernoulli/poisson
    double mean_y = 0;       // gaussian: mean and centered sum of squares
    double css = 0;
    double sum_lgamma = 0;   // poisson: sum log(y!)
  };

  void build_groups(const PanelDataset& data) {
    std::map<std::tuple<int, int, std::vector<double>>, int> index;
    obs_group_.reserve(data.size());
    obs_y_.reserve(data.size());
    for (const auto& o : data.observations) {
      auto key = std::make_tuple(o.cluster, o.period, o.covariates);
      auto it = index.find(key);
      if (it == index.end()) {
        it = index.emplace(std::move(key), static_cast<int>(groups_.size())).first;
        Group g;
        g.cluster = o.cluster;
        g.period = o.period;
        g.exposure = o.exposure;
        g.treated = o.treated;
        g.cov = o.covariates;
        groups_.push_back(std::move(g));
      }
      Group& g = groups_[static_cast<std::size_t>(it->second)];
      // Welford update for the gaussian sufficient statistics
      g.n += 1;
      const double d = o.y - g.mean_y;
      g.mean_y += d / g.n;
      g.css += d * (o.y - g.mean_y);
      g.sum_y += o.y;
      if (spec_.family == Family::poisson) g.sum_lgamma += std::lgamma(o.y + 1.0);
      obs_group_.push_back(it->second);
      obs_y_.push_back(o.y);
    }
  }

  // Per-exposure effect of the shared curve (spline models) or cumulative
  // simplex fraction (monotone), indexed 0..max_exposure.
  Eigen::VectorXd exposure_profile(const ConstrainedParams& c) const {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(max_exposure_ + 1);
    if (spec_.uses_exposure_spline()) {
      f = exposure_rows_ * c.beta_star;
    } else if (spec_.model == ModelKind::monotone) {
      double s = 0.0;
      for (int e = 1; e <= max_exposure_; ++e) {
        if (e <= layout_.simplex_size) s += c.simplex[e - 1];
        f[e] = s;
      }
    }
    return f;
  }

  double group_effect(const Group& g, const ConstrainedParams& c, const Eigen::VectorXd& profile) const {
    switch (spec_.model) {
      case ModelKind::immediate: return c.tau;
      case ModelKind::time_varying: return profile[g.exposure];
      case ModelKind::cluster_varying: return profile[g.exposure] * std::exp(c.u[g.cluster]);
      case ModelKind::monotone: return c.delta * profile[g.exposure];
    }
    return 0.0;
  }

  Eigen::VectorXd group_eta(const ConstrainedParams& c) const {
    const Eigen::VectorXd profile = exposure_profile(c);
    Eigen::VectorXd eta(static_cast<Eigen::Index>(groups_.size()));
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      const Group& g = groups_[gi];
      double e = c.alpha + time_rows_.row(g.period).dot(c.beta_b.row(g.cluster));
      if (g.treated) e += group_effect(g, c, profile);
      for (int k = 0; k < layout_.n_cov; ++k) e += c.gamma[k] * g.cov[static_cast<std::size_t>(k)];
      eta[static_cast<Eigen::Index>(gi)] = e;
    }
    return eta;
  }

  // Random-walk prior on v with v_1 ~ N(0,1); accumulates gradients.
  static double random_walk(const Eigen::VectorXd& v, double sigma, Eigen::VectorXd* gv, double* gsigma) {
    double lp = normal_lpdf(v[0], 0.0, 1.0);
    if (gv) (*gv)[0] -= v[0];
    for (Eigen::Index m = 1; m < v.size(); ++m) {
      const double d = v[m] - v[m - 1];
      lp += normal_lpdf(v[m], v[m - 1], sigma);
      if (gv) {
        const double r = d / (sigma * sigma);
        (*gv)[m] -= r;
        (*gv)[m - 1] += r;
        *gsigma += -1.0 / sigma + d * d / (sigma * sigma * sigma);
      }
    }
    return lp;
  }

  double evaluate(const Eigen::Ref<const Eigen::VectorXd>& x, Eigen::VectorXd* grad, DensityParts* parts) const {
    if (x.size() != layout_.dim) throw ValidationError("log_posterior: parameter vector has wrong dimension");
    const ParameterLayout& L = layout_;
    const ConstrainedParams c = constrain(x);
    const bool want = grad != nullptr;
    const int J = L.n_clusters;
    const int p = L.p;

    // gradients with respect to constrained quantities
    double g_alpha = 0, g_sigma_b = 0, g_sigma_beta = 0, g_lambda = 0, g_tau = 0, g_sigma_bs = 0, g_sigma_u = 0;
    double g_delta = 0, g_omega = 0, g_sigma_eps = 0;
    Eigen::VectorXd g_beta, g_beta_star, g_u, g_gamma, g_simplex;
    Eigen::MatrixXd g_beta_b;
    Eigen::VectorXd g_profile;  // d/d profile[e]
    if (want) {
      g_beta = Eigen::VectorXd::Zero(p);
      g_beta_b = Eigen::MatrixXd::Zero(J, p);
      g_beta_star = Eigen::VectorXd::Zero(L.p_star);
      g_u = Eigen::VectorXd::Zero(L.u >= 0 ? J : 0);
      g_gamma = Eigen::VectorXd::Zero(L.n_cov);
      g_profile = Eigen::VectorXd::Zero(max_exposure_ + 1);
    }

    // likelihood
    const Eigen::VectorXd profile = exposure_profile(c);
    double ll = 0.0;
    for (const Group& g : groups_) {
      double eta = c.alpha + time_rows_.row(g.period).dot(c.beta_b.row(g.cluster));
      const double effect = g.treated ? group_effect(g, c, profile) : 0.0;
      eta += effect;
      for (int k = 0; k < L.n_cov; ++k) eta += c.gamma[k] * g.cov[static_cast<std::size_t>(k)];
      double w = 0.0;
      switch (spec_.family) {
        case Family::gaussian: {
          const double s = c.sigma_eps;
          const double r = g.mean_y - eta;
          const double ss = g.css + g.n * r * r;
          ll += -g.n * (kLogSqrt2Pi + std::log(s)) - ss / (2.0 * s * s);
          if (want) {
            w = g.n * r / (s * s);
            g_sigma_eps += -g.n / s + ss / (s * s * s);
          }
          break;
        }
        case Family::bernoulli:
          ll += g.sum_y * eta - g.n * log1p_exp(eta);
          w = g.sum_y - g.n * inv_logit(eta);
          break;
        case Family::poisson: {
          const double mu = std::exp(eta);
          ll += g.sum_y * eta - g.n * mu - g.sum_lgamma;
          w = g.sum_y - g.n * mu;
          break;
        }
      }
      if (!want) continue;
      g_alpha += w;
      g_beta_b.row(g.cluster) += w * time_rows_.row(g.period);
      for (int k = 0; k < L.n_cov; ++k) g_gamma[k] += w * g.cov[static_cast<std::size_t>(k)];
      if (!g.treated) continue;
      switch (spec_.model) {
        case ModelKind::immediate: g_tau += w; break;
        case ModelKind::time_varying: g_profile[g.exposure] += w; break;
        case ModelKind::cluster_varying: {
          const double m = std::exp(c.u[g.cluster]);
          g_profile[g.exposure] += w * m;
          g_u[g.cluster] += w * effect;
          break;
        }
        case ModelKind::monotone:
          g_delta += w * profile[g.exposure];
          g_profile[g.exposure] += w * c.delta;
          break;
      }
    }

    if (want && spec_.uses_exposure_spline()) g_beta_star += exposure_rows_.transpose() * g_profile;
    if (want && spec_.model == ModelKind::monotone) {
      // profile[e] = sum_{k <= min(e, K)} simplex_k  =>  suffix sums
      g_simplex = Eigen::VectorXd::Zero(L.simplex_size);
      double acc = 0.0;
      for (int e = max_exposure_; e >= 1; --e) {
        acc += g_profile[e];
        if (e <= L.simplex_size) g_simplex[e - 1] += acc;
      }
    }

    // priors
    double lp = normal_lpdf(c.alpha, 0.0, 1.0);
    if (want) g_alpha -= c.alpha;

    if (spec_.smoothness == SmoothnessMode::random_walk_prior) {
      lp += random_walk(c.beta, c.sigma_beta, want ? &g_beta : nullptr, &g_sigma_beta);
      lp += detail::half_normal_lpdf(c.sigma_beta, 1.0);
      if (want) g_sigma_beta += detail::half_normal_dx(c.sigma_beta, 1.0);
    } else {
      lp += normal_lpdf(c.beta[0], 0.0, 1.0);
      if (want) g_beta[0] -= c.beta[0];
      const double k = spec_.penalty_form == PenaltyForm::printed ? -1.0 : -2.0;
      double sum_sq = 0.0;
      for (int m = 1; m + 1 < p; ++m) {
        const double d = c.beta[m - 1] + k * c.beta[m] + c.beta[m + 1];
        sum_sq += d * d;
        if (want) {
          g_beta[m - 1] -= c.lambda * d;
          g_beta[m] -= c.lambda * k * d;
          g_beta[m + 1] -= c.lambda * d;
        }
      }
      lp -= 0.5 * c.lambda * sum_sq;
      lp += detail::half_t_lpdf(c.lambda, detail::kNuT, detail::kScaleT);
      if (want) g_lambda += -0.5 * sum_sq + detail::half_t_dx(c.lambda, detail::kNuT, detail::kScaleT);
    }

    for (int j = 0; j < J; ++j) {
      for (int m = 0; m < p; ++m) {
        const double d = c.beta_b(j, m) - c.beta[m];
        lp += normal_lpdf(c.beta_b(j, m), c.beta[m], c.sigma_b);
        if (want) {
          const double r = d / (c.sigma_b * c.sigma_b);
          g_beta_b(j, m) -= r;
          g_beta[m] += r;
          g_sigma_b += -1.0 / c.sigma_b + d * d / (c.sigma_b * c.sigma_b * c.sigma_b);
        }
      }
    }
    lp += detail::half_t_lpdf(c.sigma_b, detail::kNuT, detail::kScaleT);
    if (want) g_sigma_b += detail::half_t_dx(c.sigma_b, detail::kNuT, detail::kScaleT);

    if (L.tau >= 0) {
      lp += normal_lpdf(c.tau, 0.0, 5.0);
      if (want) g_tau -= c.tau / 25.0;
    }
    if (L.beta_star >= 0) {
      lp += random_walk(c.beta_star, c.sigma_beta_star, want ? &g_beta_star : nullptr, &g_sigma_bs);
      lp += detail::half_normal_lpdf(c.sigma_beta_star, 1.0);
      if (want) g_sigma_bs += detail::half_normal_dx(c.sigma_beta_star, 1.0);
    }
    if (L.u >= 0) {
      for (int j = 0; j < J; ++j) {
        lp += normal_lpdf(c.u[j], 0.0, c.sigma_u);
        if (want) {
          g_u[j] -= c.u[j] / (c.sigma_u * c.sigma_u);
          g_sigma_u += -1.0 / c.sigma_u + c.u[j] * c.u[j] / (c.sigma_u * c.sigma_u * c.sigma_u);
        }
      }
      lp += detail::half_normal_lpdf(c.sigma_u, spec_.sigma_u_scale);
      if (want) g_sigma_u += detail::half_normal_dx(c.sigma_u, spec_.sigma_u_scale);
    }
    Eigen::VectorXd g_log_simplex;
    if (L.delta >= 0) {
      lp += normal_lpdf(c.delta, 0.0, 5.0);
      if (want) g_delta -= c.delta / 25.0;
      const int K = L.simplex_size;
      const double sum_log = c.log_simplex.sum();
      lp += std::lgamma(K * c.omega) - K * std::lgamma(c.omega) + (c.omega - 1.0) * sum_log;
      lp -= std::log(kOmegaHi - kOmegaLo);  // uniform prior on omega
      if (want) {
        g_omega += K * digamma(K * c.omega) - K * digamma(c.omega) + sum_log;
        g_log_simplex = g_simplex.cwiseProduct(c.simplex).array() + (c.omega - 1.0);
      }
    }
    if (L.log_sigma_eps >= 0) {
      lp += detail::half_t_lpdf(c.sigma_eps, detail::kNuT, detail::kScaleT);
      if (want) g_sigma_eps += detail::half_t_dx(c.sigma_eps, detail::kNuT, detail::kScaleT);
    }
    for (int k = 0; k < L.n_cov; ++k) {
      lp += normal_lpdf(c.gamma[k], 0.0, 1.0);
      if (want) g_gamma[k] -= c.gamma[k];
    }

    if (parts) {
      parts->likelihood = ll;
      parts->prior = lp;
      parts->log_jacobian = c.log_jacobian;
    }

    if (want) {
      Eigen::VectorXd& g = *grad;
      g.setZero(L.dim);
      // d/d(log s) of f(exp(s)) + s  =  f'(sigma) * sigma + 1
      auto put_scale = [&](int at, double g_sigma, double sigma) { g[at] = g_sigma * sigma + 1.0; };
      g[L.alpha] = g_alpha;
      g.segment(L.beta, p) = g_beta;
      for (int j = 0; j < J; ++j) g.segment(L.beta_b + j * p, p) = g_beta_b.row(j).transpose();
      put_scale(L.log_sigma_b, g_sigma_b, c.sigma_b);
      if (L.log_sigma_beta >= 0) put_scale(L.log_sigma_beta, g_sigma_beta, c.sigma_beta);
      if (L.log_lambda >= 0) put_scale(L.log_lambda, g_lambda, c.lambda);
      if (L.tau >= 0) g[L.tau] = g_tau;
      if (L.beta_star >= 0) {
        g.segment(L.beta_star, L.p_star) = g_beta_star;
        put_scale(L.log_sigma_beta_star, g_sigma_bs, c.sigma_beta_star);
      }
      if (L.u >= 0) {
        g.segment(L.u, J) = g_u;
        put_scale(L.log_sigma_u, g_sigma_u, c.sigma_u);
      }
      if (L.delta >= 0) {
        g[L.delta] = g_delta;
        if (L.simplex_size > 1) {
          const auto sb = detail::stick_break(x.segment(L.simplex_raw, L.simplex_size - 1), L.simplex_size);
          g.segment(L.simplex_raw, L.simplex_size - 1) = detail::stick_break_backward(sb, g_log_simplex);
        }
        const double s = inv_logit(x[L.omega_raw]);
        g[L.omega_raw] = g_omega * (kOmegaHi - kOmegaLo) * s * (1.0 - s) + (1.0 - 2.0 * s);
      }
      if (L.log_sigma_eps >= 0) put_scale(L.log_sigma_eps, g_sigma_eps, c.sigma_eps);
      if (L.n_cov > 0) g.segment(L.gamma, L.n_cov) = g_gamma;
    }
    return ll + lp + c.log_jacobian;
  }

  ModelSpec spec_;
  ParameterLayout layout_;
  Eigen::MatrixXd time_rows_;      // basis rows for periods 0..T
  Eigen::MatrixXd exposure_rows_;  // basis rows for exposures 0..max
  int max_exposure_ = 0;
  std::vector<Group> groups_;
  std::vector<int> obs_group_;
  std::vector<double> obs_y_;
};

}  // namespace swedge
