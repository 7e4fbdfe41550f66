#include <gtest/gtest.h>

#include <boost/math/special_functions/digamma.hpp>
#include <cmath>
#include <numbers>
#include <random>
#include <tuple>

#include "swedge/datagen.hpp"
#include "swedge/posterior.hpp"

using namespace swedge;

namespace {

PanelDataset small_dataset(Family family, int n_cov, std::uint64_t seed) {
  const TrialDesign d = build_classic_design(3, 5, 2);
  GenConfig c;
  c.seed = seed;
  PanelDataset ds = gen_time_varying(d, c, EffectCurve::scenario1(), false);
  Rng rng(seed);
  std::uniform_real_distribution<double> u;
  for (auto& o : ds.observations) {
    if (family == Family::bernoulli) o.y = u(rng) < inv_logit(0.3 * o.y) ? 1.0 : 0.0;
    if (family == Family::poisson) o.y = std::floor(3.0 * u(rng));
    for (int k = 0; k < n_cov; ++k) o.covariates.push_back(k == 0 ? (o.period >= 3 ? 1.0 : 0.0) : u(rng));
  }
  ds.family = family;
  for (int k = 0; k < n_cov; ++k) ds.covariate_names.push_back("c" + std::to_string(k));
  return ds;
}

PanelDataset single_observation(double y) {
  PanelDataset ds;
  ds.design = build_classic_design(1, 1, 1);
  ds.observations = {{0, 0, 0, 0, y, {}}};
  return ds;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

double max_fd_error(const LogPosterior& lp, const Eigen::VectorXd& x) {
  const LogDensityResult r = lp(x);
  double worst = 0.0;
  // five-point central stencil: the two-point rule loses ~eps*|f|/h to
  // cancellation when |f| is large (tiny scales far in the tails)
  const double h = 1e-3;
  auto at = [&](int i, double step) {
    Eigen::VectorXd y = x;
    y[i] += step;
    return lp.log_density(y);
  };
  for (int i = 0; i < x.size(); ++i) {
    const double fd = (8.0 * (at(i, h) - at(i, -h)) - (at(i, 2 * h) - at(i, -2 * h))) / (12.0 * h);
    worst = std::max(worst, rel_err(r.gradient[i], fd));
  }
  return worst;
}

}  // namespace

TEST(Digamma, MatchesBoost) {
  for (double x : {1e-3, 0.01, 0.3, 1.0, 2.5, 9.99, 10.0, 37.2, 1e3, 1e6, -0.5, -2.3})
    EXPECT_NEAR(digamma(x), boost::math::digamma(x), 1e-12 * std::max(1.0, std::abs(boost::math::digamma(x)))) << x;
}

TEST(Constrain, ScaleTransform) {
  const auto ds = single_observation(0.0);
  const ModelSpec s = make_model_spec(ModelKind::immediate, ds);
  const ParameterLayout L(s);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(L.dim);
  const auto c = constrain(s, L, x);
  EXPECT_EQ(c.sigma_b, 1.0);
  EXPECT_EQ(c.sigma_eps, 1.0);
  EXPECT_EQ(c.log_jacobian, 0.0);
  x[L.log_sigma_b] = 0.7;
  EXPECT_NEAR(constrain(s, L, x).log_jacobian, 0.7, 1e-15);
}

TEST(Constrain, StickBreakingMidpointIsUniform) {
  const auto sb = detail::stick_break(Eigen::VectorXd::Zero(2), 3);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(std::exp(sb.log_x[k]), 1.0 / 3.0, 1e-15);
}

TEST(Constrain, SimplexAlwaysValid) {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 5.0);
  for (int rep = 0; rep < 200; ++rep) {
    Eigen::VectorXd y(6);
    for (int i = 0; i < 6; ++i) y[i] = n(rng);
    const auto sb = detail::stick_break(y, 7);
    const Eigen::VectorXd x = sb.log_x.array().exp();
    EXPECT_NEAR(x.sum(), 1.0, 1e-12);
    EXPECT_GE(x.minCoeff(), 0.0);
  }
}

TEST(Constrain, OmegaMidpoint) {
  PanelDataset ds = single_observation(0.0);
  ds.design = build_classic_design(1, 6, 1);
  ds.observations = {{0, 0, 0, 0, 0.0, {}}};
  const ModelSpec s = make_model_spec(ModelKind::monotone, ds);
  const ParameterLayout L(s);
  const auto c = constrain(s, L, Eigen::VectorXd::Zero(L.dim));
  EXPECT_NEAR(c.omega, 50.005, 1e-12);
  EXPECT_EQ(c.simplex.size(), 4);
  EXPECT_NEAR(c.simplex.sum(), 1.0, 1e-15);
}

TEST(Constrain, WrongDimensionThrows) {
  const auto ds = single_observation(0.0);
  const ModelSpec s = make_model_spec(ModelKind::immediate, ds);
  const LogPosterior lp(s, ds);
  EXPECT_THROW(lp(Eigen::VectorXd::Zero(lp.dim() + 1)), ValidationError);
}

TEST(LogPosterior, StandardNormalLikelihoodAtZero) {
  const auto ds = single_observation(0.0);
  const LogPosterior lp(make_model_spec(ModelKind::immediate, ds), ds);
  const auto parts = lp.parts(Eigen::VectorXd::Zero(lp.dim()));
  EXPECT_NEAR(parts.likelihood, -0.5 * std::log(2 * std::numbers::pi), 1e-14);
}

TEST(LogPosterior, ClusterVaryingReducesToTimeVarying) {
  const auto ds = small_dataset(Family::gaussian, 0, 3);
  const ModelSpec tv = make_model_spec(ModelKind::time_varying, ds);
  const ModelSpec cv = make_model_spec(ModelKind::cluster_varying, ds);
  const LogPosterior ltv(tv, ds), lcv(cv, ds);
  const ParameterLayout& A = ltv.layout();
  const ParameterLayout& B = lcv.layout();
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n;
  Eigen::VectorXd xa(A.dim);
  for (int i = 0; i < A.dim; ++i) xa[i] = n(rng);
  // copy shared blocks by name
  Eigen::VectorXd xb = Eigen::VectorXd::Zero(B.dim);
  const auto na = A.unconstrained_names(), nb = B.unconstrained_names();
  for (int i = 0; i < A.dim; ++i)
    for (int k = 0; k < B.dim; ++k)
      if (na[i] == nb[k]) xb[k] = xa[i];
  const double log_sigma_u = xb[B.log_sigma_u] = -0.4;
  const double sigma_u = std::exp(log_sigma_u);
  double u_terms = 0.0;
  for (int j = 0; j < 3; ++j) u_terms += normal_lpdf(0.0, 0.0, sigma_u);
  u_terms += std::log(2.0) + normal_lpdf(sigma_u, 0.0, 0.2) + log_sigma_u;
  EXPECT_NEAR(lcv.log_density(xb), ltv.log_density(xa) + u_terms, 1e-9);
}

TEST(LogPosterior, PointwiseSumsToLikelihood) {
  for (Family f : {Family::gaussian, Family::bernoulli, Family::poisson}) {
    for (ModelKind m : {ModelKind::immediate, ModelKind::time_varying, ModelKind::cluster_varying, ModelKind::monotone}) {
      const auto ds = small_dataset(f, 1, 11);
      const LogPosterior lp(make_model_spec(m, ds), ds);
      std::mt19937_64 rng(6);
      std::normal_distribution<double> n;
      Eigen::VectorXd x(lp.dim());
      for (int i = 0; i < lp.dim(); ++i) x[i] = n(rng);
      const Eigen::VectorXd pw = lp.pointwise_log_lik(x);
      ASSERT_EQ(static_cast<std::size_t>(pw.size()), ds.size());
      EXPECT_NEAR(pw.sum(), lp.log_likelihood(x), 1e-10 * std::max(1.0, std::abs(pw.sum())));
    }
  }
}

TEST(LogPosterior, PointwiseReferenceValues) {
  // gaussian with y = eta: each term is -0.5 log(2 pi sigma^2)
  const auto g = single_observation(0.0);
  const LogPosterior lg(make_model_spec(ModelKind::immediate, g), g);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(lg.dim());
  x[lg.layout().log_sigma_eps] = std::log(2.0);
  EXPECT_NEAR(lg.pointwise_log_lik(x)[0], -0.5 * std::log(2 * std::numbers::pi * 4.0), 1e-14);

  PanelDataset b = single_observation(1.0);
  b.family = Family::bernoulli;
  const LogPosterior lb(make_model_spec(ModelKind::immediate, b), b);
  EXPECT_NEAR(lb.pointwise_log_lik(Eigen::VectorXd::Zero(lb.dim()))[0], std::log(0.5), 1e-15);
}

TEST(LogPosterior, LinearPredictorPieces) {
  const auto ds = small_dataset(Family::gaussian, 0, 2);
  const ModelSpec s = make_model_spec(ModelKind::immediate, ds);
  const ParameterLayout L(s);
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n;
  Eigen::VectorXd x(L.dim);
  for (int i = 0; i < L.dim; ++i) x[i] = n(rng);
  const auto c = constrain(s, L, x);
  // period 0 sits on the clamped boundary: basis = (1, 0, ..., 0)
  PanelObservation o{1, 0, 0, 0, 0.0, {}};
  EXPECT_NEAR(linear_predictor(s, c, o), c.alpha + c.beta_b(1, 0), 1e-14);
  o.treated = 1;
  o.exposure = 1;
  EXPECT_NEAR(linear_predictor(s, c, o), c.alpha + c.beta_b(1, 0) + c.tau, 1e-14);

  // untreated rows ignore the effect block entirely
  Eigen::VectorXd x2 = x;
  x2[L.tau] += 3.0;
  o.treated = 0;
  o.exposure = 0;
  EXPECT_EQ(linear_predictor(s, c, o), linear_predictor(s, constrain(s, L, x2), o));
}

TEST(LogPosterior, MonotoneEffectReachesDeltaAtLastStep) {
  const auto ds = small_dataset(Family::gaussian, 0, 2);
  const ModelSpec s = make_model_spec(ModelKind::monotone, ds);
  EXPECT_EQ(s.simplex_size, 3);
  const ParameterLayout L(s);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n;
  Eigen::VectorXd x(L.dim);
  for (int i = 0; i < L.dim; ++i) x[i] = n(rng);
  const auto c = constrain(s, L, x);
  EXPECT_NEAR(treatment_effect(s, c, 3, 0), c.delta, 1e-14);
  EXPECT_NEAR(treatment_effect(s, c, 5, 0), c.delta, 1e-14);
  EXPECT_EQ(treatment_effect(s, c, 0, 0), 0.0);
  // cumulative sums of nonnegative entries move monotonically in the sign of delta
  for (int t = 1; t <= 5; ++t) {
    const double a = treatment_effect(s, c, t - 1, 0), b = treatment_effect(s, c, t, 0);
    if (c.delta >= 0) {
      EXPECT_LE(a, b + 1e-15);
    } else {
      EXPECT_GE(a, b - 1e-15);
    }
  }
}

TEST(Penalty, PrintedAndConventionalForms) {
  Eigen::VectorXd b(3);
  b << 1, 2, 3;
  EXPECT_DOUBLE_EQ(penalty_term(b, 1.5, PenaltyForm::printed), 0.5 * 1.5 * 4.0);
  EXPECT_DOUBLE_EQ(penalty_term(b, 1.5, PenaltyForm::conventional), 0.0);
  EXPECT_DOUBLE_EQ(penalty_term(b, 0.0), 0.0);
  b << 2, 2, 2;
  EXPECT_DOUBLE_EQ(penalty_term(b, 3.0), 0.5 * 3.0 * 4.0);
}

TEST(Penalty, EntersLogDensityInPlaceOfRandomWalk) {
  const auto ds = small_dataset(Family::gaussian, 0, 4);
  ModelOptions opt;
  opt.smoothness = SmoothnessMode::second_difference_penalty;
  const ModelSpec s = make_model_spec(ModelKind::immediate, ds, opt);
  const LogPosterior lp(s, ds);
  const ParameterLayout& L = lp.layout();
  EXPECT_LT(L.log_sigma_beta, 0);
  EXPECT_GE(L.log_lambda, 0);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(L.dim);
  for (int m = 0; m < L.p; ++m) x[L.beta + m] = 0.1 * m;
  const double base = lp.log_density(x);
  x[L.log_lambda] = std::log(3.0);
  const double with = lp.log_density(x);
  // only the penalty, the lambda prior and its Jacobian change
  const double pen1 = penalty_term(x.segment(L.beta, L.p), 1.0), pen3 = penalty_term(x.segment(L.beta, L.p), 3.0);
  const double prior_diff = detail::half_t_lpdf(3.0, 3.0, 2.5) - detail::half_t_lpdf(1.0, 3.0, 2.5);
  EXPECT_NEAR(with - base, -(pen3 - pen1) + prior_diff + std::log(3.0), 1e-10);
}

class GradientCheck : public ::testing::TestWithParam<std::tuple<ModelKind, Family, SmoothnessMode, PenaltyForm>> {};

TEST_P(GradientCheck, MatchesCentralDifferences) {
  const auto [model, family, smooth, form] = GetParam();
  const auto ds = small_dataset(family, 2, 17);
  ModelOptions opt;
  opt.smoothness = smooth;
  opt.penalty_form = form;
  const LogPosterior lp(make_model_spec(model, ds, opt), ds);
  std::mt19937_64 rng(23);
  std::normal_distribution<double> n;
  double worst = 0.0;
  for (int rep = 0; rep < 50; ++rep) {
    Eigen::VectorXd x(lp.dim());
    for (int i = 0; i < lp.dim(); ++i) x[i] = n(rng);
    worst = std::max(worst, max_fd_error(lp, x));
  }
  EXPECT_LT(worst, 1e-5);
}

INSTANTIATE_TEST_SUITE_P(AllModels, GradientCheck,
                         ::testing::Combine(::testing::Values(ModelKind::immediate, ModelKind::time_varying, ModelKind::cluster_varying,
                                                              ModelKind::monotone),
                                            ::testing::Values(Family::gaussian, Family::bernoulli, Family::poisson),
                                            ::testing::Values(SmoothnessMode::random_walk_prior, SmoothnessMode::second_difference_penalty),
                                            ::testing::Values(PenaltyForm::printed, PenaltyForm::conventional)));

TEST(LogPosterior, FiniteOverWideRandomPoints) {
  for (ModelKind m : {ModelKind::immediate, ModelKind::time_varying, ModelKind::cluster_varying, ModelKind::monotone}) {
    for (Family f : {Family::gaussian, Family::bernoulli}) {
      const auto ds = small_dataset(f, 1, 31);
      const LogPosterior lp(make_model_spec(m, ds), ds);
      std::mt19937_64 rng(37);
      std::normal_distribution<double> n(0.0, 3.0);
      int bad = 0;
      for (int rep = 0; rep < 10000 / 8; ++rep) {
        Eigen::VectorXd x(lp.dim());
        for (int i = 0; i < lp.dim(); ++i) x[i] = n(rng);
        const auto r = lp(x);
        bad += !std::isfinite(r.value) || !r.gradient.allFinite();
      }
      EXPECT_EQ(bad, 0) << to_string(m) << " " << to_string(f);
    }
  }
}

TEST(ModelSpec, RejectsNonCanonicalLinkAndMismatchedData) {
  const auto ds = small_dataset(Family::gaussian, 0, 1);
  ModelSpec s = make_model_spec(ModelKind::immediate, ds);
  s.link = Link::logit;
  EXPECT_THROW(s.validate(), ValidationError);
  PanelDataset b = ds;
  b.family = Family::bernoulli;
  EXPECT_THROW(LogPosterior(make_model_spec(ModelKind::immediate, ds), b), ValidationError);
}

TEST(ModelSpec, NamesCoverEveryCoordinate) {
  const auto ds = small_dataset(Family::gaussian, 1, 1);
  for (ModelKind m : {ModelKind::immediate, ModelKind::time_varying, ModelKind::cluster_varying, ModelKind::monotone}) {
    const ModelSpec s = make_model_spec(m, ds);
    const ParameterLayout L(s);
    const auto un = L.unconstrained_names();
    for (const auto& n : un) EXPECT_FALSE(n.empty());
    const auto cn = L.constrained_names();
    const auto flat = flatten(L, constrain(s, L, Eigen::VectorXd::Zero(L.dim)));
    EXPECT_EQ(static_cast<std::size_t>(flat.size()), cn.size());
  }
  const ParameterLayout L(make_model_spec(ModelKind::immediate, ds));
  EXPECT_EQ(L.constrained_names()[1 + L.p], "beta_b[1][1]");
}
