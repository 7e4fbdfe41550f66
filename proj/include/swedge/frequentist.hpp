#pragma once

// Comparator fits: OLS, linear mixed models by REML, and a mixed-model
// representation of an additive model with cluster-level smooths.
//
// Mixed models are y = X beta + Z b + e, b ~ N(0, s^2 Lambda Lambda'),
// e ~ N(0, s^2 I), with Lambda block diagonal and parameterized by theta.
// The REML criterion is profiled over beta and s^2:
//   L L' = Lambda' Z'Z Lambda + I
//   R_X' R_X = X'X - R_ZX' R_ZX
//   dev = 2 log|L| + 2 log|R_X| + (n-p) (1 + log(2 pi r^2 / (n-p)))
// where r^2 is the penalized residual sum of squares.

#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "basis.hpp"
#include "common.hpp"
#include "design.hpp"

namespace swedge {

inline constexpr double kWaldZ = 1.96;

struct FreqFit {
  std::string model;
  double tau_hat = 0.0;
  double se_tau = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::map<std::string, double> variance_components;
  std::vector<std::string> fixed_names;
  Eigen::VectorXd fixed_effects;
  Eigen::VectorXd fitted;  // in row order, including predicted random effects
  bool converged = true;
  double reml_deviance = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> objective_trace;  // criterion after each accepted step
  int iterations = 0;
};

// ---------------------------------------------------------------------------
// Quasi-Newton minimization with central-difference gradients.

struct OptimResult {
  Eigen::VectorXd x;
  double f = 0.0;
  bool converged = false;
  int iterations = 0;
  std::vector<double> trace;
};

struct OptimOptions {
  int max_iter = 500;
  double grad_tol = 1e-6;
  double fd_step = 1e-5;
};

inline Eigen::VectorXd fd_gradient(const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x, double h) {
  Eigen::VectorXd g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Eigen::VectorXd a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

// BFGS with Armijo backtracking. The trace holds f after every accepted
// step, so it is nonincreasing by construction.
inline OptimResult bfgs_minimize(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x, const OptimOptions& opt = {}) {
  OptimResult r;
  const Eigen::Index n = x.size();
  double fx = f(x);
  if (!std::isfinite(fx)) throw FitError("optimizer: objective not finite at the starting point");
  r.trace.push_back(fx);
  if (n == 0) {
    r.x = x;
    r.f = fx;
    r.converged = true;
    return r;
  }
  Eigen::VectorXd g = fd_gradient(f, x, opt.fd_step);
  Eigen::MatrixXd H = Eigen::MatrixXd::Identity(n, n);
  for (r.iterations = 0; r.iterations < opt.max_iter; ++r.iterations) {
    if (g.lpNorm<Eigen::Infinity>() < opt.grad_tol) {
      r.converged = true;
      break;
    }
    Eigen::VectorXd d = -H * g;
    if (g.dot(d) >= 0.0) {
      H.setIdentity();
      d = -g;
    }
    double step = 1.0, f_new = fx;
    Eigen::VectorXd x_new = x;
    bool accepted = false;
    for (int k = 0; k < 60; ++k) {
      x_new = x + step * d;
      f_new = f(x_new);
      if (std::isfinite(f_new) && f_new <= fx + 1e-4 * step * g.dot(d)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // no descent possible along d: converged to numerical precision
      r.converged = g.lpNorm<Eigen::Infinity>() < 1e3 * opt.grad_tol;
      break;
    }
    const Eigen::VectorXd g_new = fd_gradient(f, x_new, opt.fd_step);
    const Eigen::VectorXd s = x_new - x, y = g_new - g;
    const double sy = s.dot(y);
    if (sy > 1e-12) {
      const double rho = 1.0 / sy;
      const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);
      H = (I - rho * s * y.transpose()) * H * (I - rho * y * s.transpose()) + rho * s * s.transpose();
    }
    const double df = fx - f_new;
    x = x_new;
    fx = f_new;
    g = g_new;
    r.trace.push_back(fx);
    if (df <= 1e-14 * (1.0 + std::abs(fx)) && g.lpNorm<Eigen::Infinity>() < 1e2 * opt.grad_tol) {
      r.converged = true;
      break;
    }
  }
  r.x = x;
  r.f = fx;
  return r;
}

// ---------------------------------------------------------------------------
// REML engine.

// One random-effect term: `levels` independent copies of a `dim`-vector
// (dim 1 or 2) with shared relative covariance T T'. Columns of Z for
// level l are at offset + l*dim ... offset + l*dim + dim - 1.
struct RandomTerm {
  std::string name;
  int dim = 1;
  int levels = 1;
  int offset = 0;
  std::optional<double> fixed_theta;  // dim 1 only: hold the relative sd fixed
};

struct RemlFit {
  Eigen::VectorXd beta;
  Eigen::MatrixXd cov_beta;
  double sigma2 = 0.0;
  std::vector<Eigen::MatrixXd> rel_chol;  // per term, lower-triangular T
  double deviance = 0.0;
  bool converged = false;
  int iterations = 0;
  std::vector<double> trace;
  Eigen::VectorXd fitted;  // X beta + Z b_hat
};

class RemlProblem {
 public:
  RemlProblem(Eigen::MatrixXd X, Eigen::MatrixXd Z, Eigen::VectorXd y, std::vector<RandomTerm> terms)
      : X_(std::move(X)), Z_(std::move(Z)), y_(std::move(y)), terms_(std::move(terms)) {
    n_ = static_cast<int>(y_.size());
    p_ = static_cast<int>(X_.cols());
    q_ = static_cast<int>(Z_.cols());
    if (X_.rows() != n_ || Z_.rows() != n_) throw ValidationError("reml: row counts differ");
    if (n_ <= p_) throw FitError("reml: need more observations than fixed effects");
    int cols = 0;
    for (const auto& t : terms_) {
      if (t.dim != 1 && t.dim != 2) throw ValidationError("reml: random term dimension must be 1 or 2");
      if (t.offset != cols) throw ValidationError("reml: random term columns must be contiguous and ordered");
      if (t.fixed_theta && t.dim != 1) throw ValidationError("reml: only scalar terms can be held fixed");
      cols += t.dim * t.levels;
      if (!t.fixed_theta) n_theta_ += t.dim == 1 ? 1 : 3;
    }
    if (cols != q_) throw ValidationError("reml: random terms do not cover Z");
    if (Eigen::FullPivLU<Eigen::MatrixXd>(X_).rank() < p_) throw FitError("reml: fixed-effect design is singular");
    ZtZ_ = Z_.transpose() * Z_;
    ZtX_ = Z_.transpose() * X_;
    Zty_ = Z_.transpose() * y_;
    XtX_ = X_.transpose() * X_;
    Xty_ = X_.transpose() * y_;
    yty_ = y_.squaredNorm();
  }

  int n_theta() const { return n_theta_; }

  // Relative Cholesky factors from the unconstrained vector: log of each
  // diagonal, raw off-diagonal. Entries flagged in `zero` are held at 0.
  std::vector<Eigen::MatrixXd> factors(const Eigen::VectorXd& phi, const std::vector<bool>& zero) const {
    std::vector<Eigen::MatrixXd> out;
    int k = 0;
    for (const auto& t : terms_) {
      Eigen::MatrixXd T = Eigen::MatrixXd::Zero(t.dim, t.dim);
      if (t.fixed_theta) {
        T(0, 0) = *t.fixed_theta;
      } else if (t.dim == 1) {
        T(0, 0) = zero[static_cast<std::size_t>(k)] ? 0.0 : std::exp(phi[k]);
        k += 1;
      } else {
        T(0, 0) = zero[static_cast<std::size_t>(k)] ? 0.0 : std::exp(phi[k]);
        T(1, 0) = phi[k + 1];
        T(1, 1) = zero[static_cast<std::size_t>(k + 2)] ? 0.0 : std::exp(phi[k + 2]);
        k += 3;
      }
      out.push_back(T);
    }
    return out;
  }

  struct Eval {
    double deviance = std::numeric_limits<double>::infinity();
    Eigen::VectorXd beta;
    Eigen::MatrixXd cov_beta;
    double sigma2 = 0.0;
    Eigen::VectorXd b;  // random effects on the original scale
  };

  Eval evaluate(const std::vector<Eigen::MatrixXd>& T, bool full = false) const {
    Eval e;
    // Lambda is block diagonal; apply it to columns/rows blockwise
    Eigen::MatrixXd Lam = Eigen::MatrixXd::Zero(q_, q_);
    for (std::size_t i = 0; i < terms_.size(); ++i) {
      const auto& t = terms_[i];
      for (int l = 0; l < t.levels; ++l) Lam.block(t.offset + l * t.dim, t.offset + l * t.dim, t.dim, t.dim) = T[i];
    }
    Eigen::MatrixXd M = Lam.transpose() * ZtZ_ * Lam;
    M.diagonal().array() += 1.0;
    const Eigen::LLT<Eigen::MatrixXd> L(M);
    if (L.info() != Eigen::Success) return e;
    const Eigen::MatrixXd LamZtX = Lam.transpose() * ZtX_;
    const Eigen::VectorXd LamZty = Lam.transpose() * Zty_;
    const Eigen::MatrixXd RZX = L.matrixL().solve(LamZtX);
    const Eigen::VectorXd cu = L.matrixL().solve(LamZty);
    const Eigen::MatrixXd XtVX = XtX_ - RZX.transpose() * RZX;
    const Eigen::LLT<Eigen::MatrixXd> RX(XtVX);
    if (RX.info() != Eigen::Success) {
      // numerically rank deficient at extreme theta
      if (full) throw FitError("reml: fixed effects not estimable at the optimum");
      return e;
    }
    const Eigen::VectorXd rhs = Xty_ - RZX.transpose() * cu;
    e.beta = RX.solve(rhs);
    // spherical random effects u = L^-T (cu - RZX beta), b = Lambda u; the
    // penalized RSS is formed directly, which stays accurate when the fit is
    // nearly exact
    const Eigen::VectorXd u = L.matrixU().solve(cu - RZX * e.beta);
    e.b = Lam * u;
    const double r2 = (y_ - X_ * e.beta - Z_ * e.b).squaredNorm() + u.squaredNorm();
    const double dof = n_ - p_;
    if (!(r2 > 0.0) || !std::isfinite(r2)) {
      if (full) throw FitError("reml: zero residual variance");
      return e;
    }
    double logdet_L = 0.0, logdet_RX = 0.0;
    for (int i = 0; i < q_; ++i) logdet_L += std::log(L.matrixLLT()(i, i));
    for (int i = 0; i < p_; ++i) logdet_RX += std::log(RX.matrixLLT()(i, i));
    e.deviance = 2.0 * logdet_L + 2.0 * logdet_RX + dof * (1.0 + std::log(2.0 * std::numbers::pi * r2 / dof));
    e.sigma2 = r2 / dof;
    if (full) e.cov_beta = e.sigma2 * RX.solve(Eigen::MatrixXd::Identity(p_, p_));
    return e;
  }

  RemlFit fit(const OptimOptions& opt = {}) const {
    std::vector<bool> zero(static_cast<std::size_t>(n_theta_), false);
    std::vector<bool> diag(static_cast<std::size_t>(n_theta_), false);
    {
      int k = 0;
      for (const auto& t : terms_) {
        if (t.fixed_theta) continue;
        diag[static_cast<std::size_t>(k)] = true;
        if (t.dim == 2) diag[static_cast<std::size_t>(k + 2)] = true;
        k += t.dim == 1 ? 1 : 3;
      }
    }
    Eigen::VectorXd phi = Eigen::VectorXd::Zero(n_theta_);
    RemlFit out;
    for (int round = 0; round < 4; ++round) {
      // optimize over the parameters not held at the boundary
      std::vector<int> free;
      for (int i = 0; i < n_theta_; ++i)
        if (!zero[static_cast<std::size_t>(i)]) free.push_back(i);
      auto expand = [&](const Eigen::VectorXd& z) {
        Eigen::VectorXd full = phi;
        for (std::size_t i = 0; i < free.size(); ++i) full[free[i]] = z[static_cast<Eigen::Index>(i)];
        return full;
      };
      auto objective = [&](const Eigen::VectorXd& z) {
        if (z.size() > 0 && z.cwiseAbs().maxCoeff() > 25.0) return std::numeric_limits<double>::infinity();
        return evaluate(factors(expand(z), zero)).deviance;
      };
      Eigen::VectorXd z0(static_cast<Eigen::Index>(free.size()));
      for (std::size_t i = 0; i < free.size(); ++i) z0[static_cast<Eigen::Index>(i)] = phi[free[i]];
      const OptimResult r = bfgs_minimize(objective, z0, opt);
      phi = expand(r.x);
      out.converged = r.converged;
      out.iterations += r.iterations;
      for (double v : r.trace)
        if (out.trace.empty() || v <= out.trace.back()) out.trace.push_back(v);
      // a diagonal that has drifted towards 0 is tried exactly at 0
      bool snapped = false;
      const double current = r.f;
      for (int i = 0; i < n_theta_; ++i) {
        if (!diag[static_cast<std::size_t>(i)] || zero[static_cast<std::size_t>(i)] || phi[i] > std::log(1e-3)) continue;
        std::vector<bool> trial = zero;
        trial[static_cast<std::size_t>(i)] = true;
        const double dev0 = evaluate(factors(phi, trial)).deviance;
        if (dev0 <= current + 1e-8) {
          zero = trial;
          snapped = true;
          out.trace.push_back(std::min(dev0, out.trace.back()));
        }
      }
      if (!snapped) break;
    }
    out.rel_chol = factors(phi, zero);
    const Eval e = evaluate(out.rel_chol, true);
    out.beta = e.beta;
    out.cov_beta = e.cov_beta;
    out.sigma2 = e.sigma2;
    out.deviance = e.deviance;
    out.fitted = X_ * e.beta + Z_ * e.b;
    return out;
  }

 private:
  Eigen::MatrixXd X_, Z_;
  Eigen::VectorXd y_;
  std::vector<RandomTerm> terms_;
  int n_ = 0, p_ = 0, q_ = 0, n_theta_ = 0;
  Eigen::MatrixXd ZtZ_, ZtX_, XtX_;
  Eigen::VectorXd Zty_, Xty_;
  double yty_ = 0.0;
};

namespace detail {

inline void require_gaussian(const PanelDataset& data, const char* who) {
  if (data.family != Family::gaussian) throw ValidationError(std::string(who) + ": gaussian outcome required");
  if (data.observations.empty()) throw ValidationError(std::string(who) + ": empty dataset");
}

inline Eigen::VectorXd outcome(const PanelDataset& data) {
  Eigen::VectorXd y(static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) y[static_cast<Eigen::Index>(i)] = data.observations[i].y;
  return y;
}

inline void set_tau(FreqFit& f, double tau, double var) {
  f.tau_hat = tau;
  f.se_tau = std::sqrt(std::max(var, 0.0));
  f.ci_lo = tau - kWaldZ * f.se_tau;
  f.ci_hi = tau + kWaldZ * f.se_tau;
}

inline FreqFit from_reml(std::string model, const RemlFit& r, std::vector<std::string> fixed_names, int tau_col) {
  FreqFit f;
  f.model = std::move(model);
  f.fixed_names = std::move(fixed_names);
  f.fixed_effects = r.beta;
  f.converged = r.converged;
  f.reml_deviance = r.deviance;
  f.objective_trace = r.trace;
  f.iterations = r.iterations;
  f.fitted = r.fitted;
  f.variance_components["residual"] = r.sigma2;
  set_tau(f, r.beta[tau_col], r.cov_beta(tau_col, tau_col));
  return f;
}

}  // namespace detail

// y on {1, A} by least squares, classical standard errors.
inline FreqFit fit_ols_no_time(const PanelDataset& data) {
  detail::require_gaussian(data, "fit_ols_no_time");
  const auto n = static_cast<Eigen::Index>(data.size());
  Eigen::MatrixXd X(n, 2);
  for (Eigen::Index i = 0; i < n; ++i) X.row(i) << 1.0, data.observations[static_cast<std::size_t>(i)].treated;
  const Eigen::VectorXd y = detail::outcome(data);
  const Eigen::MatrixXd XtX = X.transpose() * X;
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(XtX);
  if (lu.rank() < 2) throw FitError("fit_ols_no_time: design is singular (treatment constant)");
  const Eigen::VectorXd beta = lu.solve(X.transpose() * y);
  const double rss = (y - X * beta).squaredNorm();
  const double s2 = n > 2 ? rss / static_cast<double>(n - 2) : 0.0;
  FreqFit f;
  f.model = "ols";
  f.fixed_names = {"intercept", "treatment"};
  f.fixed_effects = beta;
  f.fitted = X * beta;
  f.variance_components["residual"] = s2;
  detail::set_tau(f, beta[1], s2 * lu.inverse()(1, 1));
  return f;
}

// Saturated time: y ~ 1 + A + period dummies, random cluster intercept and
// independent random cluster-by-period effects.
inline FreqFit fit_lmm_categorical(const PanelDataset& data, const OptimOptions& opt = {}) {
  detail::require_gaussian(data, "fit_lmm_categorical");
  const int J = data.design.n_clusters, P = data.design.n_periods();
  if (P < 2) throw ValidationError("fit_lmm_categorical: need at least two periods");
  const auto n = static_cast<Eigen::Index>(data.size());
  Eigen::MatrixXd X = Eigen::MatrixXd::Zero(n, 2 + (P - 1));
  Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(n, J + J * P);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& o = data.observations[static_cast<std::size_t>(i)];
    X(i, 0) = 1.0;
    X(i, 1) = o.treated;
    if (o.period > 0) X(i, 1 + o.period) = 1.0;
    Z(i, o.cluster) = 1.0;
    Z(i, J + o.cluster * P + o.period) = 1.0;
  }
  std::vector<std::string> names = {"intercept", "treatment"};
  for (int t = 1; t < P; ++t) names.push_back("period[" + std::to_string(t) + "]");
  const RemlProblem prob(X, Z, detail::outcome(data), {{"cluster", 1, J, 0, {}}, {"cluster_period", 1, J * P, J, {}}});
  const RemlFit r = prob.fit(opt);
  FreqFit f = detail::from_reml("lmm-cat", r, names, 1);
  f.variance_components["cluster"] = r.sigma2 * r.rel_chol[0](0, 0) * r.rel_chol[0](0, 0);
  f.variance_components["cluster_period"] = r.sigma2 * r.rel_chol[1](0, 0) * r.rel_chol[1](0, 0);
  return f;
}

// Continuous time: y ~ 1 + A + t with correlated random cluster intercepts
// and slopes.
inline FreqFit fit_lmm_continuous(const PanelDataset& data, const OptimOptions& opt = {}) {
  detail::require_gaussian(data, "fit_lmm_continuous");
  const int J = data.design.n_clusters;
  const auto n = static_cast<Eigen::Index>(data.size());
  Eigen::MatrixXd X(n, 3);
  Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(n, 2 * J);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& o = data.observations[static_cast<std::size_t>(i)];
    X.row(i) << 1.0, o.treated, o.period;
    Z(i, 2 * o.cluster) = 1.0;
    Z(i, 2 * o.cluster + 1) = o.period;
  }
  const RemlProblem prob(X, Z, detail::outcome(data), {{"cluster", 2, J, 0, {}}});
  const RemlFit r = prob.fit(opt);
  FreqFit f = detail::from_reml("lmm-cont", r, {"intercept", "treatment", "time"}, 1);
  const Eigen::Matrix2d S = r.sigma2 * r.rel_chol[0] * r.rel_chol[0].transpose();
  f.variance_components["intercept"] = S(0, 0);
  f.variance_components["slope"] = S(1, 1);
  f.variance_components["intercept_slope_cov"] = S(1, 0);
  return f;
}

struct GamOptions {
  int n_quantiles = 6;
  int degree = 3;
  // Relative sds of the penalized components; fixing them pins the
  // smoothing parameters (lambda = 1 / theta^2).
  std::optional<double> theta_global;
  std::optional<double> theta_cluster;
  OptimOptions optim;
};

// Additive model y ~ A + s(t) + s_j(t) as a mixed model. The second
// difference penalty S = D'D is diagonalized, S = U diag(e) U'. Its null
// space (constant and linear coefficient sequences) enters as fixed effects;
// the penalized part of s(t) is one random term, and each cluster's
// deviation smooth is another, sharing one smoothing parameter and with the
// null space penalized alongside.
inline FreqFit fit_gam(const PanelDataset& data, const GamOptions& opt = {}) {
  detail::require_gaussian(data, "fit_gam");
  const int J = data.design.n_clusters;
  const SplineBasis basis = integer_grid_basis(data.design.last_period, opt.n_quantiles, opt.degree);
  const int p = basis.size();
  Eigen::MatrixXd D = Eigen::MatrixXd::Zero(p - 2, p);
  for (int m = 0; m + 2 < p; ++m) D.row(m).segment(m, 3) << 1.0, -2.0, 1.0;
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(D.transpose() * D);
  const Eigen::VectorXd ev = es.eigenvalues();  // ascending: two null directions first
  const Eigen::MatrixXd U = es.eigenvectors();
  const int n_null = 2;
  Eigen::MatrixXd global_map = U.rightCols(p - n_null);
  for (int k = 0; k < p - n_null; ++k) global_map.col(k) /= std::sqrt(ev[n_null + k]);
  Eigen::MatrixXd cluster_map = U;
  for (int k = 0; k < p; ++k) cluster_map.col(k) /= std::sqrt(k < n_null ? 1.0 : ev[k]);

  const auto n = static_cast<Eigen::Index>(data.size());
  Eigen::MatrixXd X(n, n_null + 1);
  Eigen::MatrixXd Z = Eigen::MatrixXd::Zero(n, (p - n_null) + J * p);
  std::vector<Eigen::RowVectorXd> rows(static_cast<std::size_t>(data.design.n_periods()));
  for (int t = 0; t < data.design.n_periods(); ++t) rows[static_cast<std::size_t>(t)] = basis(t).transpose();
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& o = data.observations[static_cast<std::size_t>(i)];
    const Eigen::RowVectorXd& b = rows[static_cast<std::size_t>(o.period)];
    X.row(i).head(n_null) = b * U.leftCols(n_null);
    X(i, n_null) = o.treated;
    Z.row(i).head(p - n_null) = b * global_map;
    Z.row(i).segment((p - n_null) + o.cluster * p, p) = b * cluster_map;
  }
  // each cluster contributes p independent columns with one shared sd,
  // which is J*p levels of a scalar term
  const RemlProblem gam(X, Z, detail::outcome(data),
                        {{"global_smooth", 1, p - n_null, 0, opt.theta_global}, {"cluster_smooth", 1, J * p, p - n_null, opt.theta_cluster}});
  const RemlFit r = gam.fit(opt.optim);
  FreqFit f = detail::from_reml("gam", r, {"null_space[1]", "null_space[2]", "treatment"}, n_null);
  const double tg = r.rel_chol[0](0, 0), tc = r.rel_chol[1](0, 0);
  f.variance_components["global_smooth"] = r.sigma2 * tg * tg;
  f.variance_components["cluster_smooth"] = r.sigma2 * tc * tc;
  f.variance_components["lambda_global"] = tg > 0 ? 1.0 / (tg * tg) : std::numeric_limits<double>::infinity();
  f.variance_components["lambda_cluster"] = tc > 0 ? 1.0 / (tc * tc) : std::numeric_limits<double>::infinity();
  return f;
}

}  // namespace swedge
