#pragma once

// No-U-Turn sampler with multinomial trajectory sampling, dual-averaging
// step size adaptation and a windowed diagonal metric.
//
// The target is any callable `f(const Eigen::VectorXd&) -> LogDensityResult`
// that is safe to call concurrently.

#include <cmath>
#include <limits>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "common.hpp"
#include "numeric.hpp"
#include "posterior.hpp"

namespace swedge {

struct SamplerConfig {
  int n_chains = 4;
  int n_warmup = 1000;
  int n_draws = 1000;
  double target_accept = 0.8;
  int max_tree_depth = 10;
  std::uint64_t seed = 1;
  double init_radius = 2.0;
  double max_delta_h = 1000.0;  // energy error treated as divergence
  int init_attempts = 100;
  int threads = 1;              // chains run concurrently up to this many

  void validate() const {
    if (n_chains < 1 || n_warmup < 0 || n_draws < 1) throw ValidationError("SamplerConfig: counts must be positive");
    if (!(target_accept > 0.0 && target_accept < 1.0)) throw ValidationError("SamplerConfig: target_accept must lie in (0, 1)");
    if (max_tree_depth < 1) throw ValidationError("SamplerConfig: max_tree_depth must be >= 1");
    if (!(init_radius >= 0.0)) throw ValidationError("SamplerConfig: init_radius must be >= 0");
    if (init_attempts < 1) throw ValidationError("SamplerConfig: init_attempts must be >= 1");
  }
};

struct ChainResult {
  Eigen::MatrixXd draws;  // n_draws x dim, unconstrained
  std::vector<double> log_density;
  std::vector<int> divergent;
  std::vector<int> tree_depth;
  std::vector<int> n_leapfrog;
  std::vector<double> accept_stat;
  double step_size = 0.0;
  Eigen::VectorXd inv_metric;
  int warmup_divergences = 0;
};

struct Chains {
  std::vector<ChainResult> chains;
  int dim = 0;

  int n_chains() const { return static_cast<int>(chains.size()); }
  int n_draws() const { return chains.empty() ? 0 : static_cast<int>(chains.front().draws.rows()); }
  int n_divergent() const {
    int n = 0;
    for (const auto& c : chains)
      for (int d : c.divergent) n += d;
    return n;
  }
  int max_tree_depth_hits(int max_depth) const {
    int n = 0;
    for (const auto& c : chains)
      for (int d : c.tree_depth) n += d >= max_depth;
    return n;
  }
  // draws of one coordinate, chain by chain
  std::vector<std::vector<double>> coordinate(int k) const {
    std::vector<std::vector<double>> out;
    for (const auto& c : chains) out.emplace_back(c.draws.col(k).data(), c.draws.col(k).data() + c.draws.rows());
    return out;
  }
};

// Uniform point in [-radius, radius]^dim with a finite log density.
template <class Density>
Eigen::VectorXd init_params(const Density& f, int dim, double radius, int attempts, Rng& rng) {
  std::uniform_real_distribution<double> unif(-radius, radius);
  for (int a = 0; a < attempts; ++a) {
    Eigen::VectorXd x(dim);
    for (int i = 0; i < dim; ++i) x[i] = unif(rng);
    try {
      const LogDensityResult r = f(x);
      if (std::isfinite(r.value) && r.gradient.allFinite()) return x;
    } catch (const std::domain_error&) {
    }
  }
  throw FitError("initialization failed");
}

namespace detail {

struct PhasePoint {
  Eigen::VectorXd q, p, grad;
  double log_density = 0.0;
};

// Stan-style windowed adaptation schedule for the metric.
class WindowSchedule {
 public:
  explicit WindowSchedule(int n_warmup) : n_warmup_(n_warmup) {
    if (n_warmup < 20) {
      enabled_ = false;
      return;
    }
    if (init_buffer_ + base_window_ + term_buffer_ > n_warmup) {
      init_buffer_ = static_cast<int>(0.15 * n_warmup);
      term_buffer_ = static_cast<int>(0.1 * n_warmup);
      base_window_ = n_warmup - (init_buffer_ + term_buffer_);
    }
    window_size_ = base_window_;
    next_window_ = init_buffer_ + window_size_ - 1;
  }

  bool in_window() const {
    return enabled_ && counter_ >= init_buffer_ && counter_ < n_warmup_ - term_buffer_ && counter_ != n_warmup_;
  }
  bool window_ends() const { return enabled_ && counter_ == next_window_ && counter_ != n_warmup_; }
  void advance_window() {
    if (next_window_ == n_warmup_ - term_buffer_ - 1) return;
    window_size_ *= 2;
    next_window_ = counter_ + window_size_;
    if (next_window_ != n_warmup_ - term_buffer_ - 1) {
      if (next_window_ + 2 * window_size_ >= n_warmup_ - term_buffer_) next_window_ = n_warmup_ - term_buffer_ - 1;
    }
  }
  void tick() { ++counter_; }

 private:
  int n_warmup_;
  bool enabled_ = true;
  int init_buffer_ = 75;
  int term_buffer_ = 50;
  int base_window_ = 25;
  int window_size_ = 0;
  int next_window_ = 0;
  int counter_ = 0;
};

struct DualAveraging {
  double mu = 0.0, s_bar = 0.0, x_bar = 0.0;
  double counter = 0.0;
  double gamma = 0.05, t0 = 10.0, kappa = 0.75;
  double delta = 0.8;

  void restart(double step) {
    mu = std::log(10.0 * step);
    s_bar = x_bar = counter = 0.0;
  }
  double learn(double accept) {
    counter += 1.0;
    accept = std::min(1.0, accept);
    const double eta = 1.0 / (counter + t0);
    s_bar = (1.0 - eta) * s_bar + eta * (delta - accept);
    const double x = mu - s_bar * std::sqrt(counter) / gamma;
    const double x_eta = std::pow(counter, -kappa);
    x_bar = (1.0 - x_eta) * x_bar + x_eta * x;
    return std::exp(x);
  }
};

template <class Density>
class NutsChain {
 public:
  NutsChain(const Density& f, int dim, const SamplerConfig& cfg, Rng rng)
      : f_(f), dim_(dim), cfg_(cfg), rng_(std::move(rng)), inv_metric_(Eigen::VectorXd::Ones(dim)) {}

  ChainResult run() {
    ChainResult out;
    Eigen::VectorXd q0 = init_params(f_, dim_, cfg_.init_radius, cfg_.init_attempts, rng_);
    PhasePoint z;
    z.q = q0;
    z.p = Eigen::VectorXd::Zero(dim_);
    refresh(z);

    DualAveraging da;
    da.delta = cfg_.target_accept;
    WindowSchedule windows(cfg_.n_warmup);
    Eigen::VectorXd w_mean = Eigen::VectorXd::Zero(dim_), w_m2 = Eigen::VectorXd::Zero(dim_);
    int w_n = 0;

    init_step_size(z);
    da.restart(step_);

    for (int it = 0; it < cfg_.n_warmup; ++it) {
      const Transition tr = transition(z);
      out.warmup_divergences += tr.divergent;
      step_ = da.learn(tr.accept);
      if (windows.in_window()) {
        ++w_n;
        const Eigen::VectorXd d = z.q - w_mean;
        w_mean += d / w_n;
        w_m2 += d.cwiseProduct(z.q - w_mean);
      }
      if (windows.window_ends()) {
        windows.advance_window();
        const double n = w_n;
        Eigen::VectorXd var = w_n > 1 ? Eigen::VectorXd(w_m2 / (n - 1.0)) : Eigen::VectorXd::Ones(dim_);
        inv_metric_ = (n / (n + 5.0)) * var.array() + 1e-3 * (5.0 / (n + 5.0));
        w_mean.setZero();
        w_m2.setZero();
        w_n = 0;
        init_step_size(z);
        da.restart(step_);
      }
      windows.tick();
    }
    if (cfg_.n_warmup > 0) step_ = std::exp(da.x_bar);

    out.draws.resize(cfg_.n_draws, dim_);
    for (int it = 0; it < cfg_.n_draws; ++it) {
      const Transition tr = transition(z);
      out.draws.row(it) = z.q.transpose();
      out.log_density.push_back(z.log_density);
      out.divergent.push_back(tr.divergent);
      out.tree_depth.push_back(tr.depth);
      out.n_leapfrog.push_back(tr.n_leapfrog);
      out.accept_stat.push_back(tr.accept);
    }
    out.step_size = step_;
    out.inv_metric = inv_metric_;
    return out;
  }

 private:
  struct Transition {
    double accept = 0.0;
    int depth = 0;
    int n_leapfrog = 0;
    int divergent = 0;
  };

  struct TreeStats {
    int n_leapfrog = 0;
    double sum_metro_prob = 0.0;
    bool divergent = false;
  };

  void refresh(PhasePoint& z) const {
    const LogDensityResult r = f_(z.q);
    z.log_density = std::isfinite(r.value) ? r.value : -std::numeric_limits<double>::infinity();
    z.grad = r.gradient;
  }

  double kinetic(const Eigen::VectorXd& p) const { return 0.5 * p.cwiseProduct(inv_metric_).dot(p); }
  double hamiltonian(const PhasePoint& z) const { return -z.log_density + kinetic(z.p); }

  void sample_momentum(PhasePoint& z) {
    std::normal_distribution<double> n;
    for (int i = 0; i < dim_; ++i) z.p[i] = n(rng_) / std::sqrt(inv_metric_[i]);
  }

  void leapfrog(PhasePoint& z, double eps) const {
    z.p += 0.5 * eps * z.grad;
    z.q += eps * inv_metric_.cwiseProduct(z.p);
    refresh(z);
    if (z.grad.allFinite()) z.p += 0.5 * eps * z.grad;
  }

  double energy(const PhasePoint& z) const {
    const double h = hamiltonian(z);
    return std::isnan(h) ? std::numeric_limits<double>::infinity() : h;
  }

  void init_step_size(PhasePoint& z) {
    const PhasePoint z0 = z;
    sample_momentum(z);
    double h0 = energy(z);
    leapfrog(z, step_);
    double delta_h = h0 - energy(z);
    const int direction = delta_h > std::log(0.8) ? 1 : -1;
    while (true) {
      z = z0;
      sample_momentum(z);
      h0 = energy(z);
      leapfrog(z, step_);
      delta_h = h0 - energy(z);
      if (direction == 1 && !(delta_h > std::log(0.8))) break;
      if (direction == -1 && !(delta_h < std::log(0.8))) break;
      step_ = direction == 1 ? 2.0 * step_ : 0.5 * step_;
      if (step_ > 1e7) throw FitError("step size diverged during initialization; posterior may be improper");
      if (step_ == 0.0) throw FitError("step size vanished during initialization");
    }
    z = z0;
  }

  bool no_u_turn(const Eigen::VectorXd& p_sharp_minus, const Eigen::VectorXd& p_sharp_plus, const Eigen::VectorXd& rho) const {
    return p_sharp_plus.dot(rho) > 0 && p_sharp_minus.dot(rho) > 0;
  }

  // Builds a subtree of 2^depth leapfrog steps from edge state z in direction
  // sign(eps). Returns false on divergence or an internal U-turn.
  bool build_tree(int depth, PhasePoint& z, PhasePoint& proposal, Eigen::VectorXd& p_sharp_beg, Eigen::VectorXd& p_sharp_end,
                  Eigen::VectorXd& rho, Eigen::VectorXd& p_beg, Eigen::VectorXd& p_end, double h0, double eps, double& log_sum_weight,
                  TreeStats& st) {
    if (depth == 0) {
      leapfrog(z, eps);
      ++st.n_leapfrog;
      const double h = energy(z);
      if (!std::isfinite(h) || h - h0 > cfg_.max_delta_h) {
        st.divergent = true;
        return false;
      }
      log_sum_weight = log_sum_exp(log_sum_weight, h0 - h);
      st.sum_metro_prob += h0 - h > 0 ? 1.0 : std::exp(h0 - h);
      proposal = z;
      rho += z.p;
      p_sharp_beg = inv_metric_.cwiseProduct(z.p);
      p_sharp_end = p_sharp_beg;
      p_beg = z.p;
      p_end = p_beg;
      return true;
    }
    const double ninf = -std::numeric_limits<double>::infinity();

    Eigen::VectorXd p_sharp_init_end(dim_), p_init_end(dim_);
    Eigen::VectorXd rho_init = Eigen::VectorXd::Zero(dim_);
    double lsw_init = ninf;
    if (!build_tree(depth - 1, z, proposal, p_sharp_beg, p_sharp_init_end, rho_init, p_beg, p_init_end, h0, eps, lsw_init, st)) return false;

    PhasePoint proposal_final = z;
    Eigen::VectorXd p_sharp_final_beg(dim_), p_final_beg(dim_);
    Eigen::VectorXd rho_final = Eigen::VectorXd::Zero(dim_);
    double lsw_final = ninf;
    if (!build_tree(depth - 1, z, proposal_final, p_sharp_final_beg, p_sharp_end, rho_final, p_final_beg, p_end, h0, eps, lsw_final, st))
      return false;

    const double lsw_subtree = log_sum_exp(lsw_init, lsw_final);
    log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
    if (lsw_final > lsw_subtree) {
      proposal = proposal_final;
    } else if (std::uniform_real_distribution<double>()(rng_) < std::exp(lsw_final - lsw_subtree)) {
      proposal = proposal_final;
    }

    const Eigen::VectorXd rho_subtree = rho_init + rho_final;
    rho += rho_subtree;
    bool persist = no_u_turn(p_sharp_beg, p_sharp_end, rho_subtree);
    persist = persist && no_u_turn(p_sharp_beg, p_sharp_final_beg, rho_init + p_final_beg);
    persist = persist && no_u_turn(p_sharp_init_end, p_sharp_end, rho_final + p_init_end);
    return persist;
  }

  Transition transition(PhasePoint& z) {
    sample_momentum(z);
    const double h0 = energy(z);
    PhasePoint z_fwd = z, z_bck = z, z_sample = z, z_propose = z;

    Eigen::VectorXd p_fwd_fwd = z.p, p_fwd_bck = z.p, p_bck_fwd = z.p, p_bck_bck = z.p;
    const Eigen::VectorXd p_sharp = inv_metric_.cwiseProduct(z.p);
    Eigen::VectorXd p_sharp_fwd_fwd = p_sharp, p_sharp_fwd_bck = p_sharp, p_sharp_bck_fwd = p_sharp, p_sharp_bck_bck = p_sharp;
    Eigen::VectorXd rho = z.p;
    double log_sum_weight = 0.0;
    TreeStats st;
    Transition tr;
    std::uniform_real_distribution<double> unif;

    while (tr.depth < cfg_.max_tree_depth) {
      Eigen::VectorXd rho_fwd = Eigen::VectorXd::Zero(dim_), rho_bck = Eigen::VectorXd::Zero(dim_);
      double lsw_subtree = -std::numeric_limits<double>::infinity();
      bool valid;
      if (unif(rng_) > 0.5) {
        rho_bck = rho;
        p_bck_fwd = p_fwd_bck;
        p_sharp_bck_fwd = p_sharp_fwd_bck;
        PhasePoint edge = z_fwd;
        valid = build_tree(tr.depth, edge, z_propose, p_sharp_fwd_bck, p_sharp_fwd_fwd, rho_fwd, p_fwd_bck, p_fwd_fwd, h0, step_,
                           lsw_subtree, st);
        z_fwd = edge;
      } else {
        rho_fwd = rho;
        p_fwd_bck = p_bck_fwd;
        p_sharp_fwd_bck = p_sharp_bck_fwd;
        PhasePoint edge = z_bck;
        valid = build_tree(tr.depth, edge, z_propose, p_sharp_bck_fwd, p_sharp_bck_bck, rho_bck, p_bck_fwd, p_bck_bck, h0, -step_,
                           lsw_subtree, st);
        z_bck = edge;
      }
      if (!valid) break;
      ++tr.depth;
      if (lsw_subtree > log_sum_weight) {
        z_sample = z_propose;
      } else if (unif(rng_) < std::exp(lsw_subtree - log_sum_weight)) {
        z_sample = z_propose;
      }
      log_sum_weight = log_sum_exp(log_sum_weight, lsw_subtree);
      rho = rho_bck + rho_fwd;
      bool persist = no_u_turn(p_sharp_bck_bck, p_sharp_fwd_fwd, rho);
      persist = persist && no_u_turn(p_sharp_bck_bck, p_sharp_fwd_bck, rho_bck + p_fwd_bck);
      persist = persist && no_u_turn(p_sharp_bck_fwd, p_sharp_fwd_fwd, rho_fwd + p_bck_fwd);
      if (!persist) break;
    }
    tr.n_leapfrog = st.n_leapfrog;
    tr.divergent = st.divergent ? 1 : 0;
    tr.accept = st.n_leapfrog > 0 ? st.sum_metro_prob / st.n_leapfrog : 0.0;
    z = z_sample;
    return tr;
  }

  const Density& f_;
  int dim_;
  SamplerConfig cfg_;
  Rng rng_;
  Eigen::VectorXd inv_metric_;
  double step_ = 1.0;
};

}  // namespace detail

// Runs cfg.n_chains independent chains. Chain c draws from the stream
// (cfg.seed, c), so results do not depend on cfg.threads.
template <class Density>
Chains nuts_sample(const Density& f, int dim, const SamplerConfig& cfg) {
  cfg.validate();
  if (dim < 1) throw ValidationError("nuts_sample: dim must be >= 1");
  Chains out;
  out.dim = dim;
  out.chains.resize(static_cast<std::size_t>(cfg.n_chains));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(cfg.n_chains));
  auto run_chain = [&](int c) {
    try {
      detail::NutsChain<Density> chain(f, dim, cfg, make_stream(cfg.seed, 0xc4a1ULL, c));
      out.chains[static_cast<std::size_t>(c)] = chain.run();
    } catch (...) {
      errors[static_cast<std::size_t>(c)] = std::current_exception();
    }
  };
  const int threads = std::max(1, std::min(cfg.threads, cfg.n_chains));
  if (threads == 1) {
    for (int c = 0; c < cfg.n_chains; ++c) run_chain(c);
  } else {
    for (int start = 0; start < cfg.n_chains; start += threads) {
      std::vector<std::thread> pool;
      for (int c = start; c < std::min(cfg.n_chains, start + threads); ++c) pool.emplace_back(run_chain, c);
      for (auto& t : pool) t.join();
    }
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

}  // namespace swedge
