#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "swedge/diagnostics.hpp"

using namespace swedge;

namespace {

struct WarningCapture {
  std::vector<std::string> messages;
  WarningCapture() {
    set_warning_sink([this](std::string_view m) { messages.emplace_back(m); });
  }
  ~WarningCapture() { set_warning_sink(nullptr); }
};

ChainDraws iid_normal(int chains, int draws, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  ChainDraws out(chains, std::vector<double>(draws));
  for (auto& c : out)
    for (double& v : c) v = n(rng);
  return out;
}

double normal_logpdf(double x, double m, double var) { return -0.5 * std::log(2 * std::numbers::pi * var) - 0.5 * (x - m) * (x - m) / var; }

}  // namespace

TEST(SplitRhat, HandComputedFourNumbers) {
  // chains {1,2,3,4} twice: halves {1,2},{3,4},{1,2},{3,4}
  const ChainDraws c = {{1, 2, 3, 4}, {1, 2, 3, 4}};
  const double n = 2, W = 0.5;
  const double var_means = 4 * (1.0 * 1.0) / 3.0;  // half means 1.5, 3.5, 1.5, 3.5 sit +-1 from 2.5
  const double B = n * var_means;
  EXPECT_NEAR(split_rhat(c), std::sqrt(((n - 1) / n * W + B / n) / W), 1e-14);
  EXPECT_NEAR(split_rhat(c), 1.7795130420052185, 1e-14);
}

TEST(SplitRhat, WellMixedChains) { EXPECT_LT(split_rhat(iid_normal(4, 1000, 1)), 1.01); }

TEST(SplitRhat, ShiftedChainDetected) {
  auto c = iid_normal(4, 1000, 2);
  for (double& v : c[2]) v += 10.0;
  EXPECT_GT(split_rhat(c), 1.5);
  EXPECT_GT(split_rhat(c, true), 1.5);
}

TEST(SplitRhat, RankNormalizedCloseToOneOnWellMixed) { EXPECT_LT(split_rhat(iid_normal(4, 1000, 3), true), 1.01); }

TEST(SplitRhat, PermutationWithinHalvesInvariant) {
  auto c = iid_normal(3, 200, 4);
  const double before = split_rhat(c);
  std::mt19937_64 rng(5);
  for (auto& ch : c) {
    std::shuffle(ch.begin(), ch.begin() + 100, rng);
    std::shuffle(ch.begin() + 100, ch.end(), rng);
  }
  EXPECT_NEAR(split_rhat(c), before, 1e-12);
}

TEST(SplitRhat, PermutationAcrossChainsChangesB) {
  ChainDraws c = iid_normal(2, 100, 6);
  for (double& v : c[1]) v += 1.0;
  const double before = split_rhat(c);
  // exchange a quarter of each chain so the half-chain means move
  std::swap_ranges(c[0].begin(), c[0].begin() + 25, c[1].begin());
  EXPECT_NE(split_rhat(c), before);
}

TEST(SplitRhat, ZeroVarianceIsInfiniteWithWarning) {
  WarningCapture w;
  const ChainDraws c = {{1, 1, 1, 1}, {1, 1, 1, 1}};
  EXPECT_TRUE(std::isinf(split_rhat(c)));
  EXPECT_FALSE(w.messages.empty());
}

TEST(SplitRhat, PreconditionsEnforced) {
  EXPECT_THROW(split_rhat({{1, 2, 3, 4}}), ValidationError);
  EXPECT_THROW(split_rhat({{1, 2, 3}, {1, 2, 3}}), ValidationError);
  EXPECT_THROW(split_rhat({{1, 2, 3, 4}, {1, 2, 3, 4, 5}}), ValidationError);
}

TEST(Ess, IidCloseToTotal) {
  const double e = ess(iid_normal(4, 1000, 7));
  EXPECT_NEAR(e, 4000.0, 0.15 * 4000.0);
}

TEST(Ess, Ar1MatchesAnalyticFactor) {
  // AR(1) with phi: integrated autocorrelation time (1 + phi) / (1 - phi)
  const double phi = 0.5;
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n;
  ChainDraws c(4, std::vector<double>(5000));
  for (auto& ch : c) {
    double x = n(rng) / std::sqrt(1 - phi * phi);
    for (double& v : ch) {
      x = phi * x + n(rng);
      v = x;
    }
  }
  const double expected = 20000.0 * (1 - phi) / (1 + phi);
  EXPECT_NEAR(ess(c), expected, 0.15 * expected);
}

TEST(Ess, AntitheticCappedWithWarning) {
  WarningCapture w;
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  ChainDraws c(4);
  for (auto& ch : c)
    for (int i = 0; i < 500; ++i) {
      const double z = n(rng);
      ch.push_back(z);
      ch.push_back(-z);
    }
  const double e = ess(c);
  EXPECT_GT(e, 4000.0);
  EXPECT_LE(e, 8000.0);
  EXPECT_FALSE(w.messages.empty());
}

TEST(Ess, ConstantChainIsSentinel) {
  WarningCapture w;
  EXPECT_TRUE(std::isnan(ess({{2, 2, 2, 2, 2}, {2, 2, 2, 2, 2}})));
}

TEST(Gpd, RecoversKnownShape) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u;
  const double k = 0.3, sigma = 2.0;
  std::vector<double> x;
  for (int i = 0; i < 20000; ++i) x.push_back(qgpd(u(rng), k, sigma));
  std::sort(x.begin(), x.end());
  const GpdFit f = gpdfit(x);
  EXPECT_NEAR(f.k, k, 0.03);
  EXPECT_NEAR(f.sigma, sigma, 0.1);
}

TEST(Psis, ConstantLogLik) {
  Eigen::MatrixXd ll = Eigen::MatrixXd::Constant(100, 5, -1.7);
  const LooResult r = psis_loo(ll);
  for (double e : r.pointwise) EXPECT_DOUBLE_EQ(e, -1.7);
  for (double k : r.pareto_k) EXPECT_TRUE(std::isinf(k) && k < 0);
  EXPECT_NEAR(r.looic, -2.0 * 5 * -1.7, 1e-12);
}

TEST(Psis, LooicDecomposes) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n;
  Eigen::MatrixXd ll(400, 7);
  for (int i = 0; i < ll.size(); ++i) ll.data()[i] = -1.0 + 0.3 * n(rng);
  const LooResult r = psis_loo(ll);
  double s = 0;
  for (double e : r.pointwise) s += e;
  EXPECT_NEAR(r.looic, -2.0 * s, 1e-10);
  EXPECT_NEAR(r.elpd_loo, s, 1e-10);
}

TEST(Psis, WeightsTruncatedAtLargestRawRatio) {
  std::mt19937_64 rng(12);
  std::student_t_distribution<double> t(2.0);
  std::vector<double> lr;
  for (int i = 0; i < 1000; ++i) lr.push_back(t(rng));
  const PsisResult p = psis_smooth(lr);
  const double mx = *std::max_element(lr.begin(), lr.end());
  for (double w : p.log_weights) EXPECT_LE(w, mx + 1e-12);
  EXPECT_TRUE(std::isfinite(p.pareto_k));
}

TEST(Psis, ConjugateNormalMatchesExactLoo) {
  // y_i ~ N(mu, s^2), mu ~ N(0, t0^2); draws from the exact posterior
  const int n = 8;
  const double s2 = 1.0, t02 = 4.0;
  std::mt19937_64 rng(13);
  std::normal_distribution<double> z;
  std::vector<double> y(n);
  for (double& v : y) v = 1.0 + z(rng);
  double sum = 0;
  for (double v : y) sum += v;
  const double prec = 1 / t02 + n / s2;
  const double post_mean = (sum / s2) / prec, post_sd = std::sqrt(1 / prec);
  const int S = 4000;
  Eigen::MatrixXd ll(S, n);
  for (int s = 0; s < S; ++s) {
    const double mu = post_mean + post_sd * z(rng);
    for (int i = 0; i < n; ++i) ll(s, i) = normal_logpdf(y[i], mu, s2);
  }
  double exact = 0;
  for (int i = 0; i < n; ++i) {
    const double p_i = 1 / t02 + (n - 1) / s2;
    const double m_i = ((sum - y[i]) / s2) / p_i;
    exact += normal_logpdf(y[i], m_i, s2 + 1 / p_i);
  }
  const LooResult r = psis_loo(ll);
  EXPECT_NEAR(r.elpd_loo, exact, 0.1);
  EXPECT_GT(r.p_loo, 0.0);
}

TEST(Psis, RejectsNonFinite) {
  Eigen::MatrixXd ll = Eigen::MatrixXd::Zero(10, 2);
  ll(3, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(psis_loo(ll), ValidationError);
}

TEST(Summary, SymmetricDrawsMedianZero) {
  const ParamSummary p = summarize_draws("x", {{-1, 0, 1}});
  EXPECT_EQ(p.median, 0.0);
  EXPECT_LE(p.q2_5, p.median);
  EXPECT_LE(p.median, p.q97_5);
}

TEST(Summary, TypeSevenQuantiles) {
  std::vector<double> v;
  for (int i = 1; i <= 100; ++i) v.push_back(i);
  // h = 99 * 0.025 = 2.475 -> x[2] + 0.475 (x[3] - x[2]) with 0-based x
  const double oracle = v[2] + 0.475 * (v[3] - v[2]);
  const ParamSummary p = summarize_draws("x", {v});
  EXPECT_NEAR(p.q2_5, oracle, 1e-12);
  EXPECT_NEAR(p.q2_5, 3.475, 1e-12);
  EXPECT_NEAR(p.q97_5, 97.525, 1e-12);
}

TEST(Summary, EveryParameterGetsDiagnostics) {
  std::vector<Eigen::MatrixXd> draws;
  std::mt19937_64 rng(14);
  std::normal_distribution<double> n;
  for (int c = 0; c < 4; ++c) {
    Eigen::MatrixXd d(200, 3);
    for (int i = 0; i < d.size(); ++i) d.data()[i] = n(rng);
    draws.push_back(d);
  }
  const FitSummary s = summarize(draws, {"a", "b", "c"});
  ASSERT_EQ(s.params.size(), 3u);
  for (const auto& p : s.params) {
    EXPECT_TRUE(std::isfinite(p.rhat));
    EXPECT_TRUE(std::isfinite(p.ess));
    EXPECT_LE(p.q2_5, p.median);
    EXPECT_LE(p.median, p.q97_5);
  }
  EXPECT_EQ(s.n_draws, 800);
  EXPECT_EQ(s.at("b").name, "b");
  EXPECT_THROW(s.at("zz"), ValidationError);
  EXPECT_THROW(summarize(draws, {"a"}), ValidationError);
}
