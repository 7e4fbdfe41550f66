#include <gtest/gtest.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>

#include "swedge/harness.hpp"

using namespace swedge;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("swedge_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

FitConfig quick_fit(std::uint64_t seed = 1) {
  FitConfig c;
  c.sampler.n_warmup = 150;
  c.sampler.n_draws = 100;
  c.sampler.seed = seed;
  return c;
}

Json smoke_config(const fs::path& out, const std::string& name) {
  Json j;
  j["name"] = name;
  j["scenario"] = "s1";
  j["n_replicates"] = 1;
  j["design"] = {{"n_clusters", 3}, {"last_period", 3}, {"individuals_per_cell", 3}};
  Json models = Json::array();
  for (ModelId m : all_model_ids()) models.push_back(to_string(m));
  j["models"] = models;
  j["sampler"] = {{"n_chains", 2}, {"n_warmup", 100}, {"n_draws", 100}};
  j["model_options"] = {{"t_star_max", 2}};
  j["seed"] = 11;
  j["output_dir"] = out.string();
  return j;
}

Json small_study(const fs::path& out, const std::string& name, int reps) {
  Json j;
  j["name"] = name;
  j["scenario"] = "s2";
  j["n_replicates"] = reps;
  j["design"] = {{"n_clusters", 3}, {"last_period", 5}, {"individuals_per_cell", 2}};
  j["models"] = {"bayes-tv", "bayes-monotone", "lmm-cat"};
  j["sampler"] = {{"n_chains", 2}, {"n_warmup", 100}, {"n_draws", 100}};
  j["seed"] = 5;
  j["output_dir"] = out.string();
  return j;
}

std::map<std::string, std::string> report_files(const fs::path& study) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::directory_iterator(study / "report"))
    if (e.path().extension() == ".csv") out[e.path().filename().string()] = read_text_file(e.path());
  return out;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SWEDGE_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Binary outcomes with a pandemic indicator and its interaction with
// treatment as covariates.
PanelDataset binary_trial(std::uint64_t seed) {
  const TrialDesign d = build_classic_design(4, 6, 15);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u;
  PanelDataset ds;
  ds.design = d;
  ds.family = Family::bernoulli;
  ds.covariate_names = {"pandemic", "pandemic_x_treated"};
  for (int j = 0; j < d.n_clusters; ++j)
    for (int t = 0; t <= d.last_period; ++t)
      for (int i = 0; i < d.individuals_per_cell; ++i) {
        PanelObservation o;
        o.cluster = j;
        o.period = t;
        o.treated = d.treated(j, t);
        o.exposure = d.exposure(j, t);
        const double pandemic = t >= 4 ? 1.0 : 0.0;
        o.covariates = {pandemic, pandemic * o.treated};
        const double eta = -0.5 + 0.8 * o.treated - 0.4 * pandemic;
        o.y = u(rng) < inv_logit(eta) ? 1.0 : 0.0;
        ds.observations.push_back(o);
      }
  return ds;
}

}  // namespace

TEST(ModelIds, RoundTrip) {
  for (ModelId m : all_model_ids()) EXPECT_EQ(parse_model_id(to_string(m)), m);
  EXPECT_THROW(parse_model_id("bayes-magic"), ValidationError);
  EXPECT_TRUE(is_bayesian(ModelId::bayes_monotone));
  EXPECT_FALSE(is_bayesian(ModelId::gam));
}

TEST(FitDataset, BayesianAttachesRhatToEveryParameter) {
  GenConfig g;
  g.seed = 2;
  const PanelDataset ds = gen_time_varying(build_classic_design(3, 5, 2), g, EffectCurve::scenario1(), true);
  const FitResult r = fit_dataset(ds, ModelId::bayes_tv_cluster, quick_fit());
  const ParameterLayout L(make_model_spec(ModelKind::cluster_varying, ds));
  ASSERT_EQ(r.params.size(), L.constrained_names().size());
  for (const auto& p : r.params) EXPECT_TRUE(std::isfinite(p.rhat)) << p.name;
  ASSERT_TRUE(r.loo.has_value());
  EXPECT_EQ(r.curve.size(), 3u);
  EXPECT_EQ(r.trend.size(), 6u);
  EXPECT_EQ(r.draws.size(), 4u);
  EXPECT_EQ(r.estimands.at("TATE").estimate, r.estimands.at("tau").estimate);
}

TEST(FitDataset, FrequentistHasNoDraws) {
  GenConfig g;
  g.seed = 3;
  const PanelDataset ds = gen_immediate(build_classic_design(4, 5, 3), g, 1.0);
  for (ModelId m : {ModelId::lmm_cat, ModelId::lmm_cont, ModelId::ols, ModelId::gam}) {
    const FitResult r = fit_dataset(ds, m);
    EXPECT_TRUE(r.draws.empty());
    EXPECT_TRUE(r.params.empty());
    ASSERT_TRUE(r.freq.has_value());
    EXPECT_EQ(r.estimands.at("tau").estimate, r.freq->tau_hat);
  }
}

TEST(FitDataset, LogitFitWithPandemicInteraction) {
  const PanelDataset ds = binary_trial(4);
  const FitResult r = fit_dataset(ds, ModelId::bayes_immediate, quick_fit(5));
  EXPECT_TRUE(std::isfinite(r.estimands.at("tau").estimate));
  EXPECT_TRUE(r.params.back().name.rfind("gamma", 0) == 0);
  EXPECT_THROW(fit_dataset(ds, ModelId::lmm_cat), ValidationError);
}

TEST(FitDataset, JsonRoundTripKeepsReportFields) {
  GenConfig g;
  g.seed = 6;
  const PanelDataset ds = gen_time_varying(build_classic_design(3, 5, 2), g, EffectCurve::scenario2(), false);
  const FitResult r = fit_dataset(ds, ModelId::bayes_monotone, quick_fit(7));
  const FitResult back = fit_from_json(Json::parse(fit_to_json(r).dump()));
  EXPECT_EQ(back.estimands.at("LTE").estimate, r.estimands.at("LTE").estimate);
  EXPECT_EQ(back.loo->looic, r.loo->looic);
  EXPECT_EQ(back.curve.size(), r.curve.size());
  EXPECT_EQ(back.params.size(), r.params.size());
  EXPECT_EQ(fit_to_json(back).dump(), fit_to_json(r).dump());
}

TEST(StudyConfigJson, DefaultsAndValidation) {
  Json j = {{"scenario", "s2"}, {"models", {"bayes-tv"}}};
  const StudyConfig c = study_config_from_json(j);
  EXPECT_EQ(c.n_clusters, 10);
  EXPECT_EQ(c.last_period, 22);
  EXPECT_EQ(c.t_star_max(), 20);
  EXPECT_EQ(c.estimands(), (std::vector<std::string>{"TATE", "LTE"}));
  EXPECT_NEAR(c.truth("TATE"), 3.0333, 1e-3);
  EXPECT_THROW(study_config_from_json(Json{{"scenario", "s2"}}), ValidationError);
  EXPECT_THROW(study_config_from_json(Json{{"models", {"ols"}}, {"n_replicates", 0}}), ValidationError);
  EXPECT_THROW(study_config_from_json(Json{{"models", {"ols"}}, {"replicates", 3}}), ValidationError);
  EXPECT_THROW(study_config_from_json(Json{{"models", {"ols"}}, {"sampler", {{"n_chain", 3}}}}), ValidationError);
  EXPECT_THROW(study_config_from_json(Json{{"models", {"ols"}}, {"scenario", "s9"}}), ValidationError);
}

TEST(StudyConfigJson, OverridesAndTauExpansion) {
  Json j = {{"name", "cov"}, {"models", {"ols"}}, {"tau_values", {0, 3}}};
  apply_override(j, "sampler.n_draws=250");
  apply_override(j, "scenario=immediate");
  apply_override(j, "design.randomized=true");
  const auto subs = expand_study_configs(j);
  ASSERT_EQ(subs.size(), 2u);
  EXPECT_EQ(subs[0].name, "cov_tau0");
  EXPECT_EQ(subs[1].name, "cov_tau3");
  EXPECT_EQ(subs[1].tau, 3.0);
  EXPECT_EQ(subs[0].fit.sampler.n_draws, 250);
  EXPECT_TRUE(subs[0].randomized_rollout);
  EXPECT_THROW(apply_override(j, "novalue"), ValidationError);
  EXPECT_THROW(apply_override(j, "scenario.x=1"), ValidationError);
}

TEST(Study, SmokeRunsEndToEndQuickly) {
  const fs::path out = temp_dir("smoke");
  const auto start = std::chrono::steady_clock::now();
  const StudyReport r = run_study(study_config_from_json(smoke_config(out, "smoke")));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  EXPECT_LT(secs, 60.0);
  const fs::path dir = out / "smoke";
  EXPECT_TRUE(fs::exists(dir / "rep_1" / "data.csv"));
  EXPECT_TRUE(fs::exists(dir / "rep_1" / "done"));
  for (ModelId m : all_model_ids()) EXPECT_TRUE(fs::exists(dir / "rep_1" / ("fit_" + to_string(m) + ".json"))) << to_string(m);
  EXPECT_TRUE(fs::exists(dir / "rep_1" / "draws_bayes-tv.csv"));
  EXPECT_FALSE(fs::exists(dir / "rep_1" / "draws_ols.csv"));
  // replicate rows = replicates x models x estimands
  EXPECT_EQ(r.replicates.size(), 1u * all_model_ids().size() * 2u);
  EXPECT_EQ(r.metrics.size(), all_model_ids().size() * 2u);
  for (const char* f : {"metrics.csv", "replicates.csv", "curve.csv", "trend.csv", "forest.csv", "diagnostics.csv"}) EXPECT_TRUE(fs::exists(dir / "report" / f)) << f;
}

TEST(Study, CurveReportHasOneRowPerExposureTime) {
  const fs::path out = temp_dir("curve");
  const StudyConfig c = study_config_from_json(small_study(out, "curve", 1));
  run_study(c);
  const std::string text = read_text_file(out / "curve" / "report" / "curve.csv");
  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "model,t_star,truth,median,lo,hi,coverage,n_replicates");
  std::map<std::string, int> rows;
  while (std::getline(in, line)) {
    const auto cells = split_csv_line(line);
    ++rows[cells[0]];
    EXPECT_EQ(parse_double(cells[2]), effect_curve(EffectCurve::scenario2(), parse_int(cells[1])));
  }
  EXPECT_EQ(rows["bayes-tv"], c.t_star_max());
  EXPECT_EQ(rows["bayes-monotone"], c.t_star_max());
  EXPECT_EQ(rows.count("lmm-cat"), 0u);
}

TEST(Study, ReportsIdenticalAcrossJobCounts) {
  const fs::path out = temp_dir("jobs");
  StudyConfig a = study_config_from_json(small_study(out / "a", "det", 3));
  StudyConfig b = study_config_from_json(small_study(out / "b", "det", 3));
  a.jobs = 1;
  b.jobs = 3;
  run_study(a);
  run_study(b);
  const auto ra = report_files(out / "a" / "det"), rb = report_files(out / "b" / "det");
  ASSERT_EQ(ra.size(), 7u);
  EXPECT_EQ(ra, rb);
  for (int k = 1; k <= 3; ++k)
    EXPECT_EQ(read_text_file(replicate_dir(out / "a" / "det", k) / "draws_bayes-tv.csv"), read_text_file(replicate_dir(out / "b" / "det", k) / "draws_bayes-tv.csv"));
}

TEST(Study, ResumedRunMatchesUninterruptedRun) {
  const fs::path out = temp_dir("resume");
  const StudyConfig full = study_config_from_json(small_study(out / "full", "r", 2));
  run_study(full);
  const StudyConfig part = study_config_from_json(small_study(out / "part", "r", 2));
  run_study(part);
  // simulate an interruption: one replicate half done, the other never started
  const fs::path dir = out / "part" / "r";
  fs::remove(replicate_dir(dir, 1) / "done");
  fs::remove(replicate_dir(dir, 1) / "fit_bayes-monotone.json");
  fs::remove_all(replicate_dir(dir, 2));
  fs::remove_all(dir / "report");
  run_study(part);
  EXPECT_EQ(report_files(out / "full" / "r"), report_files(dir));
}

TEST(Study, ReportIsIdempotentAndPartialWhenArtifactsMissing) {
  const fs::path out = temp_dir("idem");
  run_study(study_config_from_json(small_study(out, "i", 2)));
  const fs::path dir = out / "i";
  const auto first = report_files(dir);
  report_study(dir);
  EXPECT_EQ(report_files(dir), first);
  fs::remove(replicate_dir(dir, 2) / "fit_lmm-cat.json");
  std::vector<std::string> warnings;
  set_warning_sink([&](std::string_view m) { warnings.emplace_back(m); });
  const StudyReport r = report_study(dir);
  set_warning_sink(nullptr);
  EXPECT_EQ(r.missing_fits, 1);
  EXPECT_FALSE(warnings.empty());
  EXPECT_EQ(r.at("lmm-cat", "TATE").metrics.n, 1);
}

TEST(Study, DirectoryWithDifferentConfigRejected) {
  const fs::path out = temp_dir("clash");
  run_study(study_config_from_json(small_study(out, "c", 1)));
  Json changed = small_study(out, "c", 1);
  changed["seed"] = 6;
  EXPECT_THROW(run_study(study_config_from_json(changed)), ValidationError);
}

TEST(Cli, ExitCodes) {
  const fs::path dir = temp_dir("cli");
  const std::string data = (dir / "d.csv").string();
  EXPECT_EQ(run_cli("simulate --scenario s1 --clusters 3 --periods 4 --individuals 2 --seed 2 --out " + data), 0);
  EXPECT_TRUE(fs::exists(data));
  EXPECT_EQ(run_cli("fit --model ols --data " + data + " --out " + (dir / "f.json").string()), 0);
  EXPECT_EQ(run_cli("fit --model bayes-tv --data " + data + " --warmup 100 --draws 100 --out " + (dir / "b.json").string() + " --draws-out " +
                    (dir / "b.csv").string()),
            0);
  EXPECT_TRUE(fs::exists(dir / "b.csv"));
  EXPECT_EQ(run_cli("fit --model ols --data " + (dir / "missing.csv").string()), 2);
  EXPECT_EQ(run_cli("fit --model magic --data " + data), 2);
  EXPECT_EQ(run_cli("fit --model bayes-tv --data " + data + " --max-depth 0"), 2);
  // two observations cannot support the saturated-time mixed model
  write_text_file(dir / "tiny.csv", "cluster,period,treated,y\n1,0,0,1.0\n1,1,1,2.0\n");
  EXPECT_EQ(run_cli("fit --model lmm-cat --data " + (dir / "tiny.csv").string()), 3);
  write_text_file(dir / "bad.json", "{\"models\": [\"ols\"], \"n_replicates\": -1}");
  EXPECT_EQ(run_cli("study --config " + (dir / "bad.json").string()), 2);
  write_text_file(dir / "study.json", smoke_config(dir / "out", "cli").dump());
  EXPECT_EQ(run_cli("study --config " + (dir / "study.json").string() + " --set models=[\\\"ols\\\",\\\"lmm-cont\\\"] --jobs 2"), 0);
  EXPECT_TRUE(fs::exists(dir / "out" / "cli" / "report" / "metrics.csv"));
  EXPECT_EQ(run_cli("report " + (dir / "out" / "cli").string()), 0);
  EXPECT_EQ(run_cli("report " + (dir / "nowhere").string()), 2);
}

TEST(StudyConfigJson, ShippedConfigsParse) {
  int n = 0;
  for (const auto& e : fs::directory_iterator(SWEDGE_CONFIG_DIR)) {
    if (e.path().extension() != ".json") continue;
    EXPECT_NO_THROW(expand_study_configs(Json::parse(read_text_file(e.path())))) << e.path();
    ++n;
  }
  EXPECT_GE(n, 4);
}
