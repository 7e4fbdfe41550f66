#pragma once

// Stepped-wedge layout: clusters cross from control to intervention at
// staggered start periods; period 0 is an all-control baseline.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "common.hpp"

namespace swedge {

struct TrialDesign {
  int n_clusters = 0;
  int last_period = 0;            // periods are 0..last_period (T+1 points)
  std::vector<int> start_period;  // per cluster, in [1, last_period]
  int individuals_per_cell = 0;

  int n_periods() const { return last_period + 1; }

  int treated(int cluster, int period) const { return period >= start_period.at(static_cast<std::size_t>(cluster)) ? 1 : 0; }

  // 0 while untreated; 1 in the first treated period, +1 per period after.
  int exposure(int cluster, int period) const {
    return std::max(0, period - start_period.at(static_cast<std::size_t>(cluster)) + 1);
  }

  int max_exposure() const {
    int m = 0;
    for (int j = 0; j < n_clusters; ++j) m = std::max(m, exposure(j, last_period));
    return m;
  }

  void validate() const {
    if (n_clusters < 1) throw ValidationError("design: need at least one cluster");
    if (last_period < 1) throw ValidationError("design: need at least two periods");
    if (static_cast<int>(start_period.size()) != n_clusters) throw ValidationError("design: start_period size != n_clusters");
    for (int s : start_period) {
      if (s < 1 || s > last_period)
        throw ValidationError("design: start period " + std::to_string(s) + " outside [1, " + std::to_string(last_period) + "]");
    }
    if (individuals_per_cell < 0) throw ValidationError("design: negative individuals_per_cell");
  }
};

inline int exposure_time(const TrialDesign& d, int cluster, int period) { return d.exposure(cluster, period); }
inline int treatment_indicator(const TrialDesign& d, int cluster, int period) { return d.treated(cluster, period); }

// Explicit start periods (cluster j starts at starts[j]).
inline TrialDesign build_design(int n_clusters, int last_period, std::vector<int> starts, int individuals_per_cell) {
  if (n_clusters < 1) throw ValidationError("build_design: J must be >= 1");
  if (last_period < n_clusters) throw ValidationError("build_design: T must be >= J");
  TrialDesign d{n_clusters, last_period, std::move(starts), individuals_per_cell};
  d.validate();
  return d;
}

// Classic one-cluster-per-step rollout: starts 1..J, cluster j at j+1.
inline TrialDesign build_classic_design(int n_clusters, int last_period, int individuals_per_cell) {
  std::vector<int> starts(static_cast<std::size_t>(n_clusters));
  std::iota(starts.begin(), starts.end(), 1);
  return build_design(n_clusters, last_period, std::move(starts), individuals_per_cell);
}

// Classic rollout with the order of clusters randomly permuted.
inline TrialDesign build_randomized_design(int n_clusters, int last_period, int individuals_per_cell, std::uint64_t seed) {
  std::vector<int> starts(static_cast<std::size_t>(std::max(n_clusters, 0)));
  std::iota(starts.begin(), starts.end(), 1);
  Rng rng = make_stream(seed, 0x5eed0001ULL);
  // Fisher-Yates with an explicit draw so the permutation does not depend on
  // the standard library's shuffle implementation.
  for (std::size_t i = starts.size(); i > 1; --i) {
    const std::size_t k = static_cast<std::size_t>(rng() % i);
    std::swap(starts[i - 1], starts[k]);
  }
  return build_design(n_clusters, last_period, std::move(starts), individuals_per_cell);
}

struct PanelObservation {
  int cluster = 0;  // 0-based internally; 1-based in CSV
  int period = 0;
  int exposure = 0;
  int treated = 0;
  double y = 0.0;
  std::vector<double> covariates;
};

struct PanelDataset {
  TrialDesign design;
  std::vector<PanelObservation> observations;
  Family family = Family::gaussian;
  std::vector<std::string> covariate_names;

  std::size_t size() const { return observations.size(); }
  int n_covariates() const { return static_cast<int>(covariate_names.size()); }

  // Checks treatment/exposure consistency of every row against the design.
  void validate() const {
    design.validate();
    for (const auto& o : observations) {
      if (o.cluster < 0 || o.cluster >= design.n_clusters) throw ValidationError("dataset: cluster index out of range");
      if (o.period < 0 || o.period > design.last_period) throw ValidationError("dataset: period out of range");
      if (o.treated != design.treated(o.cluster, o.period)) throw ValidationError("dataset: treated flag inconsistent with design");
      if (o.exposure != design.exposure(o.cluster, o.period)) throw ValidationError("dataset: exposure inconsistent with design");
      if (static_cast<int>(o.covariates.size()) != n_covariates()) throw ValidationError("dataset: covariate count mismatch");
      if (family == Family::bernoulli && o.y != 0.0 && o.y != 1.0) throw ValidationError("dataset: bernoulli outcome must be 0/1");
      if (family == Family::poisson && (o.y < 0.0 || o.y != std::floor(o.y))) throw ValidationError("dataset: poisson outcome must be a count");
    }
  }
};

// Recovers the design from observation rows: J and T from the index ranges,
// each cluster's start from its first treated period.
inline TrialDesign infer_design(const std::vector<PanelObservation>& obs) {
  if (obs.empty()) throw ValidationError("infer_design: empty dataset");
  TrialDesign d;
  for (const auto& o : obs) {
    if (o.cluster < 0 || o.period < 0) throw ValidationError("infer_design: negative index");
    d.n_clusters = std::max(d.n_clusters, o.cluster + 1);
    d.last_period = std::max(d.last_period, o.period);
  }
  d.start_period.assign(static_cast<std::size_t>(d.n_clusters), d.last_period + 1);
  std::vector<int> counts(static_cast<std::size_t>(d.n_clusters * d.n_periods()), 0);
  for (const auto& o : obs) {
    if (o.treated) d.start_period[static_cast<std::size_t>(o.cluster)] = std::min(d.start_period[static_cast<std::size_t>(o.cluster)], o.period);
    ++counts[static_cast<std::size_t>(o.cluster * d.n_periods() + o.period)];
  }
  for (int j = 0; j < d.n_clusters; ++j) {
    if (d.start_period[static_cast<std::size_t>(j)] > d.last_period)
      throw ValidationError("infer_design: cluster " + std::to_string(j + 1) + " never receives the intervention");
  }
  const bool balanced = std::all_of(counts.begin(), counts.end(), [&](int c) { return c == counts.front(); });
  d.individuals_per_cell = balanced ? counts.front() : 0;
  return d;
}

}  // namespace swedge
