// Command-line front end: simulate, fit, study, report.
// Exit codes: 0 success, 2 invalid input, 3 fit failure.

#include <CLI11.hpp>

#include <iostream>
#include <thread>

#include "swedge/swedge.hpp"

using namespace swedge;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitFit = 3;

int simulate(const std::string& scenario, double tau, std::uint64_t seed, int J, int T, int I, bool randomized, const std::string& out,
             const std::string& design_out) {
  StudyConfig c;
  c.scenario = scenario;
  c.tau = tau;
  c.seed = seed;
  c.n_clusters = J;
  c.last_period = T;
  c.individuals_per_cell = I;
  c.randomized_rollout = randomized;
  c.resolve_defaults();
  GenConfig g = c.generator;
  g.seed = seed;
  const TrialDesign d = randomized ? build_randomized_design(c.n_clusters, c.last_period, c.individuals_per_cell, seed)
                                   : build_classic_design(c.n_clusters, c.last_period, c.individuals_per_cell);
  const PanelDataset ds = scenario == "immediate" ? gen_immediate(d, g, tau) : gen_time_varying(d, g, scenario_curve(scenario), scenario == "s3");
  if (out.empty() || out == "-")
    std::cout << dataset_to_csv(ds);
  else
    write_dataset_csv(out, ds);
  if (!design_out.empty()) write_text_file(design_out, design_to_json(d).dump(2) + "\n");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Stepped-wedge trial simulation and analysis"};
  app.require_subcommand(1);

  auto* sim = app.add_subcommand("simulate", "Generate one synthetic trial dataset as CSV");
  std::string scenario = "immediate", out, design_out;
  double tau = 0.0;
  std::uint64_t seed = 1;
  int J = 0, T = 0, I = 0;
  bool randomized = false;
  sim->add_option("--scenario", scenario, "immediate, s1, s2 or s3")->check(CLI::IsMember({"immediate", "s1", "s2", "s3"}));
  sim->add_option("--tau", tau, "Constant effect for the immediate scenario");
  sim->add_option("--seed", seed, "Root seed");
  sim->add_option("--clusters", J, "Number of clusters (default per scenario)");
  sim->add_option("--periods", T, "Last period index T (default per scenario)");
  sim->add_option("--individuals", I, "Individuals per cluster-period (default per scenario)");
  sim->add_flag("--randomized", randomized, "Randomly permute the rollout order");
  sim->add_option("--out", out, "Output CSV (stdout when omitted)");
  sim->add_option("--design-out", design_out, "Also write the design as JSON");

  auto* fit = app.add_subcommand("fit", "Fit one model to a dataset");
  std::string model, data_path, family = "gaussian", fit_out, draws_out, smoothness = "random_walk", penalty_form = "printed", summary = "plugin";
  SamplerConfig sc;
  int threads = 0, t_star_max = 0;
  fit->add_option("--model", model, "Model id")
      ->required()
      ->check(CLI::IsMember({"bayes-immediate", "bayes-tv", "bayes-tv-cluster", "bayes-monotone", "lmm-cat", "lmm-cont", "ols", "gam"}));
  fit->add_option("--data", data_path, "Dataset CSV")->required();
  fit->add_option("--family", family, "gaussian, bernoulli or poisson");
  fit->add_option("--chains", sc.n_chains, "Number of chains");
  fit->add_option("--warmup", sc.n_warmup, "Warmup iterations per chain");
  fit->add_option("--draws", sc.n_draws, "Retained draws per chain");
  fit->add_option("--adapt-delta", sc.target_accept, "Target acceptance statistic");
  fit->add_option("--max-depth", sc.max_tree_depth, "Maximum tree depth");
  fit->add_option("--seed", sc.seed, "Sampler seed");
  fit->add_option("--threads", threads, "Chains run in parallel (default: one per chain, up to the core count)");
  fit->add_option("--smoothness", smoothness, "random_walk or penalty");
  fit->add_option("--penalty-form", penalty_form, "printed or conventional");
  fit->add_option("--t-star-max", t_star_max, "Exposure grid end for curve estimands (default T-2)");
  fit->add_option("--monotone-summary", summary, "per_draw or plugin");
  fit->add_option("--out", fit_out, "Fit summary JSON (stdout when omitted)");
  fit->add_option("--draws-out", draws_out, "Write constrained draws as CSV");

  auto* study = app.add_subcommand("study", "Run or resume a replicated simulation study");
  std::string config_path;
  std::vector<std::string> overrides;
  int jobs = 0;
  study->add_option("--config", config_path, "Study config JSON")->required();
  study->add_option("--jobs", jobs, "Replicates run in parallel");
  study->add_option("--set", overrides, "Override a config entry, key=value (dotted keys for nested entries)");

  auto* rep = app.add_subcommand("report", "Rebuild the report CSVs of a study directory");
  std::string report_dir;
  rep->add_option("dir", report_dir, "Study directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitValidation;
  }

  try {
    if (*sim) return simulate(scenario, tau, seed, J, T, I, randomized, out, design_out);

    if (*fit) {
      const PanelDataset ds = read_dataset_csv(data_path, parse_family(family));
      FitConfig fc;
      fc.sampler = sc;
      fc.sampler.threads = threads > 0 ? threads : std::clamp(static_cast<int>(std::thread::hardware_concurrency()), 1, sc.n_chains);
      fc.model.smoothness = parse_smoothness(smoothness);
      fc.model.penalty_form = parse_penalty_form(penalty_form);
      if (t_star_max > 0) fc.model.t_star_max = t_star_max;
      fc.monotone_summary = parse_functional_summary(summary);
      fc.sampler.validate();
      const FitResult r = fit_dataset(ds, parse_model_id(model), fc);
      if (!draws_out.empty() && r.bayesian) write_text_file(draws_out, draws_to_csv(r.draw_names, r.draws));
      Json j = fit_to_json(r);
      j["seconds"] = r.seconds;
      if (fit_out.empty() || fit_out == "-")
        std::cout << j.dump(2) << '\n';
      else
        write_text_file(fit_out, j.dump(2) + "\n");
      return 0;
    }

    if (*study) {
      Json cfg;
      try {
        cfg = Json::parse(read_text_file(config_path));
      } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(std::string("config: ") + e.what());
      }
      for (const auto& o : overrides) apply_override(cfg, o);
      for (StudyConfig c : expand_study_configs(cfg)) {
        if (jobs > 0) c.jobs = jobs;
        const StudyReport r = run_study(c);
        std::cout << "study " << c.name << ": " << r.replicates.size() << " replicate rows, report in " << (r.dir / "report").string() << '\n';
        for (const auto& m : r.metrics)
          std::cout << "  " << m.model << ' ' << m.estimand << ": coverage " << format_double(m.metrics.coverage) << ", bias " << format_double(m.metrics.bias)
                    << ", rmse " << format_double(m.metrics.rmse) << ", looic " << format_double(m.looic_mean) << ", n " << m.metrics.n << '\n';
      }
      return 0;
    }

    if (*rep) {
      const StudyReport r = report_study(report_dir);
      std::cout << "report written to " << (r.dir / "report").string() << '\n';
      return 0;
    }
  } catch (const ValidationError& e) {
    std::cerr << "swedge: error: " << e.what() << '\n';
    return kExitValidation;
  } catch (const FitError& e) {
    std::cerr << "swedge: fit failed: " << e.what() << '\n';
    return kExitFit;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "swedge: error: " << e.what() << '\n';
    return kExitValidation;
  }
  return 0;
}
