#pragma once

// Convergence and model-comparison statistics over MCMC draws.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/normal.hpp>
#include <Eigen/Dense>

#include "common.hpp"
#include "numeric.hpp"

namespace swedge {

using ChainDraws = std::vector<std::vector<double>>;  // [chain][draw]

namespace detail {

inline void check_chains(const ChainDraws& chains, std::size_t min_chains, std::size_t min_draws, const char* who) {
  if (chains.size() < min_chains) throw ValidationError(std::string(who) + ": need at least " + std::to_string(min_chains) + " chains");
  for (const auto& c : chains) {
    if (c.size() < min_draws) throw ValidationError(std::string(who) + ": need at least " + std::to_string(min_draws) + " draws per chain");
    if (c.size() != chains.front().size()) throw ValidationError(std::string(who) + ": chains differ in length");
  }
}

// Two halves per chain; the middle draw of an odd-length chain is dropped.
inline ChainDraws split_halves(const ChainDraws& chains) {
  ChainDraws out;
  for (const auto& c : chains) {
    const std::size_t h = c.size() / 2;
    out.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(h));
    out.emplace_back(c.end() - static_cast<std::ptrdiff_t>(h), c.end());
  }
  return out;
}

inline double rhat_of_halves(const ChainDraws& halves) {
  const double n = static_cast<double>(halves.front().size());
  const double m = static_cast<double>(halves.size());
  std::vector<double> means, vars;
  for (const auto& h : halves) {
    means.push_back(mean(h));
    vars.push_back(variance(h));
  }
  const double W = std::accumulate(vars.begin(), vars.end(), 0.0) / m;
  const double B = n * variance(means);
  if (!(W > 0.0)) {
    warn("split_rhat: zero within-chain variance");
    return std::numeric_limits<double>::infinity();
  }
  return std::sqrt(((n - 1.0) / n * W + B / n) / W);
}

// Normal scores of pooled fractional ranks (ties averaged).
inline ChainDraws rank_normalize(const ChainDraws& chains) {
  std::vector<std::pair<double, std::size_t>> pooled;
  for (const auto& c : chains)
    for (double v : c) pooled.emplace_back(v, pooled.size());
  std::sort(pooled.begin(), pooled.end());
  const double S = static_cast<double>(pooled.size());
  std::vector<double> z(pooled.size());
  const boost::math::normal normal;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t k = i;
    while (k + 1 < pooled.size() && pooled[k + 1].first == pooled[i].first) ++k;
    const double rank = 0.5 * static_cast<double>(i + k) + 1.0;
    const double score = boost::math::quantile(normal, (rank - 0.375) / (S + 0.25));
    for (std::size_t r = i; r <= k; ++r) z[pooled[r].second] = score;
    i = k + 1;
  }
  ChainDraws out;
  std::size_t at = 0;
  for (const auto& c : chains) {
    out.emplace_back(z.begin() + static_cast<std::ptrdiff_t>(at), z.begin() + static_cast<std::ptrdiff_t>(at + c.size()));
    at += c.size();
  }
  return out;
}

}  // namespace detail

// Split R-hat: sqrt(((n-1)/n W + B/n) / W) over 2 * n_chains half-chains.
// With rank_normalized, the maximum of the bulk (rank-normal) and tail
// (folded) versions is returned instead.
inline double split_rhat(const ChainDraws& chains, bool rank_normalized = false) {
  detail::check_chains(chains, 2, 4, "split_rhat");
  if (!rank_normalized) return detail::rhat_of_halves(detail::split_halves(chains));
  const double bulk = detail::rhat_of_halves(detail::split_halves(detail::rank_normalize(chains)));
  std::vector<double> pooled;
  for (const auto& c : chains) pooled.insert(pooled.end(), c.begin(), c.end());
  const double med = quantile(pooled, 0.5);
  ChainDraws folded = chains;
  for (auto& c : folded)
    for (double& v : c) v = std::abs(v - med);
  const double tail = detail::rhat_of_halves(detail::split_halves(detail::rank_normalize(folded)));
  return std::max(bulk, tail);
}

// Effective sample size from the multi-chain autocorrelation estimate with
// Geyer's initial monotone sequence truncation. Autocovariances are computed
// lag by lag, only as far as the truncation needs. Returns NaN when the
// draws have no variance; values above twice the total are capped.
inline double ess(const ChainDraws& chains) {
  detail::check_chains(chains, 1, 4, "ess");
  const std::size_t M = chains.size();
  const std::size_t n = chains.front().size();
  const double total = static_cast<double>(M * n);

  std::vector<double> chain_mean(M), chain_var(M);
  std::vector<std::vector<double>> centered(M);
  for (std::size_t m = 0; m < M; ++m) {
    chain_mean[m] = mean(chains[m]);
    centered[m].resize(n);
    for (std::size_t i = 0; i < n; ++i) centered[m][i] = chains[m][i] - chain_mean[m];
    chain_var[m] = variance(chains[m]);
  }
  const double mean_var = std::accumulate(chain_var.begin(), chain_var.end(), 0.0) / static_cast<double>(M);
  double var_plus = mean_var * (static_cast<double>(n) - 1.0) / static_cast<double>(n);
  if (M > 1) var_plus += variance(chain_mean);
  if (!(var_plus > 0.0)) {
    warn("ess: draws have zero variance");
    return std::numeric_limits<double>::quiet_NaN();
  }

  // mean over chains of the biased lag-t autocovariance
  auto rho_at = [&](std::size_t t) {
    double s = 0.0;
    for (std::size_t m = 0; m < M; ++m) {
      double a = 0.0;
      for (std::size_t i = 0; i + t < n; ++i) a += centered[m][i] * centered[m][i + t];
      s += a / static_cast<double>(n);
    }
    return 1.0 - (mean_var - s / static_cast<double>(M)) / var_plus;
  };

  std::vector<double> r(n + 1, 0.0);
  r[0] = 1.0;
  double even = 1.0, odd = rho_at(1);
  r[1] = odd;
  std::size_t t = 1;
  while (t + 4 < n && even + odd > 0.0) {
    even = rho_at(t + 1);
    odd = rho_at(t + 2);
    if (even + odd >= 0.0) {
      r[t + 1] = even;
      r[t + 2] = odd;
    }
    t += 2;
  }
  const std::size_t max_t = t;
  if (even > 0.0) r[max_t + 1] = even;
  // initial monotone sequence: pair sums may not increase
  for (std::size_t k = 1; k + 3 <= max_t; k += 2) {
    if (r[k + 1] + r[k + 2] > r[k - 1] + r[k]) {
      r[k + 1] = (r[k - 1] + r[k]) / 2.0;
      r[k + 2] = r[k + 1];
    }
  }
  double sum = 0.0;
  for (std::size_t k = 0; k < max_t; ++k) sum += r[k];
  const double tau = -1.0 + 2.0 * sum + r[max_t + 1];
  double out = tau > 0.0 ? total / tau : std::numeric_limits<double>::infinity();
  if (out > 2.0 * total) {
    std::ostringstream os;
    os << "ess: estimate exceeds twice the number of draws; capped at " << 2.0 * total;
    warn(os.str());
    out = 2.0 * total;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pareto-smoothed importance sampling leave-one-out cross-validation.

struct GpdFit {
  double k = 0.0;
  double sigma = 0.0;
};

// Zhang & Stephens (2009) estimate of the generalized Pareto shape and scale
// for sorted exceedances x (ascending, all > 0), with the weakly informative
// prior adjustment of the shape towards 0.5.
inline GpdFit gpdfit(const std::vector<double>& x) {
  const std::size_t N = x.size();
  const double prior = 3.0;
  const std::size_t M = 30 + static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(N))));
  const double xstar = x[static_cast<std::size_t>(std::floor(static_cast<double>(N) / 4.0 + 0.5)) - 1];
  std::vector<double> theta(M), l_theta(M);
  for (std::size_t j = 0; j < M; ++j) {
    theta[j] = 1.0 / x[N - 1] + (1.0 - std::sqrt(static_cast<double>(M) / (static_cast<double>(j + 1) - 0.5))) / prior / xstar;
    double kk = 0.0;
    for (double xi : x) kk += std::log1p(-theta[j] * xi);
    kk /= static_cast<double>(N);
    l_theta[j] = static_cast<double>(N) * (std::log(-theta[j] / kk) - kk - 1.0);
  }
  const double lse = log_sum_exp(l_theta);
  double theta_hat = 0.0;
  for (std::size_t j = 0; j < M; ++j) theta_hat += theta[j] * std::exp(l_theta[j] - lse);
  double k = 0.0;
  for (double xi : x) k += std::log1p(-theta_hat * xi);
  k /= static_cast<double>(N);
  GpdFit fit;
  fit.sigma = -k / theta_hat;
  const double a = 10.0, n = static_cast<double>(N);
  fit.k = k * n / (n + a) + a * 0.5 / (n + a);
  if (std::isnan(fit.k)) fit.k = std::numeric_limits<double>::infinity();
  return fit;
}

inline double qgpd(double p, double k, double sigma) { return sigma * std::expm1(-k * std::log1p(-p)) / k; }

struct PsisResult {
  std::vector<double> log_weights;  // smoothed, unnormalized
  double pareto_k = 0.0;
};

// Smooths the largest `tail_fraction` of the importance ratios. Weights are
// truncated at the largest raw ratio.
inline PsisResult psis_smooth(const std::vector<double>& log_ratios, double tail_fraction = 0.2) {
  const std::size_t S = log_ratios.size();
  if (S < 2) throw ValidationError("psis: need at least 2 draws");
  const double max_lr = *std::max_element(log_ratios.begin(), log_ratios.end());
  PsisResult out;
  out.log_weights.resize(S);
  for (std::size_t s = 0; s < S; ++s) out.log_weights[s] = log_ratios[s] - max_lr;
  out.pareto_k = std::numeric_limits<double>::infinity();
  const auto tail_len = static_cast<std::size_t>(std::ceil(tail_fraction * static_cast<double>(S)));
  if (tail_len >= 5 && tail_len < S) {
    std::vector<std::size_t> ord(S);
    std::iota(ord.begin(), ord.end(), 0);
    std::stable_sort(ord.begin(), ord.end(), [&](std::size_t a, std::size_t b) { return out.log_weights[a] < out.log_weights[b]; });
    const std::size_t first_tail = S - tail_len;
    const double lo = out.log_weights[ord[first_tail]], hi = out.log_weights[ord[S - 1]];
    if (std::abs(hi - lo) < std::numeric_limits<double>::epsilon() / 100.0) {
      warn("psis: all tail values are equal; no smoothing");
    } else {
      const double cutoff = out.log_weights[ord[first_tail - 1]];
      const double exp_cutoff = std::exp(cutoff);
      std::vector<double> exceed(tail_len);
      for (std::size_t i = 0; i < tail_len; ++i) exceed[i] = std::exp(out.log_weights[ord[first_tail + i]]) - exp_cutoff;
      const GpdFit fit = gpdfit(exceed);
      out.pareto_k = fit.k;
      if (std::isfinite(fit.k)) {
        for (std::size_t i = 0; i < tail_len; ++i) {
          const double p = (static_cast<double>(i) + 0.5) / static_cast<double>(tail_len);
          out.log_weights[ord[first_tail + i]] = std::log(qgpd(p, fit.k, fit.sigma) + exp_cutoff);
        }
      }
    }
  }
  for (double& w : out.log_weights) {
    if (w > 0.0 || std::isnan(w)) w = 0.0;
    w += max_lr;
  }
  return out;
}

struct LooResult {
  double elpd_loo = 0.0;
  double looic = 0.0;
  double p_loo = 0.0;
  std::vector<double> pointwise;  // elpd_i
  std::vector<double> pareto_k;
  double frac_k_above_0_7 = 0.0;
};

// loglik: draws x observations.
inline LooResult psis_loo(const Eigen::MatrixXd& loglik, double tail_fraction = 0.2) {
  if (loglik.rows() < 2 || loglik.cols() < 1) throw ValidationError("psis_loo: need >= 2 draws and >= 1 observation");
  if (!loglik.allFinite()) throw ValidationError("psis_loo: non-finite log-likelihood values");
  const auto S = static_cast<std::size_t>(loglik.rows());
  LooResult r;
  double lpd = 0.0;
  int high_k = 0;
  for (Eigen::Index i = 0; i < loglik.cols(); ++i) {
    std::vector<double> ll(S), neg(S);
    for (std::size_t s = 0; s < S; ++s) {
      ll[s] = loglik(static_cast<Eigen::Index>(s), i);
      neg[s] = -ll[s];
    }
    const double lpd_i = log_sum_exp(ll) - std::log(static_cast<double>(S));
    lpd += lpd_i;
    const auto [mn, mx] = std::minmax_element(ll.begin(), ll.end());
    double elpd_i, k;
    if (*mx - *mn == 0.0) {
      elpd_i = lpd_i;
      k = -std::numeric_limits<double>::infinity();
    } else {
      const PsisResult ps = psis_smooth(neg, tail_fraction);
      std::vector<double> num(S);
      for (std::size_t s = 0; s < S; ++s) num[s] = ps.log_weights[s] + ll[s];
      elpd_i = log_sum_exp(num) - log_sum_exp(ps.log_weights);
      k = ps.pareto_k;
    }
    high_k += k > 0.7;
    r.pointwise.push_back(elpd_i);
    r.pareto_k.push_back(k);
    r.elpd_loo += elpd_i;
  }
  r.looic = -2.0 * r.elpd_loo;
  r.p_loo = lpd - r.elpd_loo;
  r.frac_k_above_0_7 = static_cast<double>(high_k) / static_cast<double>(loglik.cols());
  if (high_k > 0) {
    std::ostringstream os;
    os << "psis_loo: " << high_k << " of " << loglik.cols() << " observations have pareto k > 0.7";
    warn(os.str());
  }
  return r;
}

// ---------------------------------------------------------------------------
// Posterior summaries.

struct ParamSummary {
  std::string name;
  double mean = 0.0, sd = 0.0, median = 0.0, q2_5 = 0.0, q97_5 = 0.0;
  double rhat = 0.0, ess = 0.0;
};

struct FitSummary {
  std::vector<ParamSummary> params;
  int n_draws = 0;  // pooled
  int n_chains = 0;
  int n_divergences = 0;
  double max_rhat = 0.0;
  std::optional<LooResult> loo;

  const ParamSummary& at(const std::string& name) const {
    for (const auto& p : params)
      if (p.name == name) return p;
    throw ValidationError("FitSummary: no parameter named " + name);
  }
  bool has(const std::string& name) const {
    return std::any_of(params.begin(), params.end(), [&](const ParamSummary& p) { return p.name == name; });
  }
};

// Median and equal-tailed 95% interval of pooled draws.
inline ParamSummary summarize_draws(const std::string& name, const ChainDraws& chains, bool rank_normalized = false) {
  std::vector<double> pooled;
  for (const auto& c : chains) pooled.insert(pooled.end(), c.begin(), c.end());
  if (pooled.empty()) throw ValidationError("summarize: no draws for " + name);
  ParamSummary p;
  p.name = name;
  p.mean = mean(pooled);
  p.sd = pooled.size() > 1 ? std::sqrt(variance(pooled)) : 0.0;
  std::sort(pooled.begin(), pooled.end());
  p.median = quantile_sorted(pooled, 0.5);
  p.q2_5 = quantile_sorted(pooled, 0.025);
  p.q97_5 = quantile_sorted(pooled, 0.975);
  const bool enough = chains.size() >= 2 && chains.front().size() >= 4;
  p.rhat = enough ? split_rhat(chains, rank_normalized) : std::numeric_limits<double>::quiet_NaN();
  p.ess = chains.front().size() >= 4 ? ess(chains) : std::numeric_limits<double>::quiet_NaN();
  return p;
}

// draws[c] is (draws x params) for chain c, columns named by `names`.
inline FitSummary summarize(const std::vector<Eigen::MatrixXd>& draws, const std::vector<std::string>& names, bool rank_normalized = false) {
  if (draws.empty()) throw ValidationError("summarize: no chains");
  FitSummary s;
  s.n_chains = static_cast<int>(draws.size());
  for (const auto& d : draws) {
    if (d.cols() != static_cast<Eigen::Index>(names.size())) throw ValidationError("summarize: name count does not match draws");
    s.n_draws += static_cast<int>(d.rows());
  }
  for (std::size_t k = 0; k < names.size(); ++k) {
    ChainDraws chains;
    for (const auto& d : draws) {
      const auto col = d.col(static_cast<Eigen::Index>(k));
      chains.emplace_back(col.data(), col.data() + col.size());
    }
    s.params.push_back(summarize_draws(names[k], chains, rank_normalized));
    if (std::isfinite(s.params.back().rhat)) s.max_rhat = std::max(s.max_rhat, s.params.back().rhat);
  }
  return s;
}

}  // namespace swedge
