#pragma once

// Cubic (or general-degree) B-spline bases with quantile-placed interior knots.

#include <algorithm>
#include <cmath>
#include <span>
#include <sstream>
#include <vector>

#include <Eigen/Dense>

#include "common.hpp"
#include "numeric.hpp"

namespace swedge {

struct KnotVector {
  std::vector<double> interior;  // strictly increasing, strictly inside (lo, hi)
  double lo = 0.0;
  double hi = 1.0;
  int degree = 3;

  // Open (clamped) knot sequence: each boundary repeated degree+1 times.
  std::vector<double> padded() const {
    std::vector<double> t;
    t.reserve(interior.size() + 2 * static_cast<std::size_t>(degree + 1));
    t.insert(t.end(), static_cast<std::size_t>(degree + 1), lo);
    t.insert(t.end(), interior.begin(), interior.end());
    t.insert(t.end(), static_cast<std::size_t>(degree + 1), hi);
    return t;
  }
};

// Interior knots are the n_quantiles equally spaced quantiles of `values`
// (probabilities 0, 1/(n-1), ..., 1) with the smallest and largest dropped.
// Boundaries are min/max of `values`. Duplicate knots collapse with a warning.
inline KnotVector make_knots(std::span<const double> values, int n_quantiles = 6, int degree = 3) {
  if (values.empty()) throw ValidationError("make_knots: no values");
  if (n_quantiles < 3) throw ValidationError("make_knots: n_quantiles must be >= 3");
  if (degree < 1) throw ValidationError("make_knots: degree must be >= 1");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  KnotVector k;
  k.degree = degree;
  k.lo = sorted.front();
  k.hi = sorted.back();
  if (!(k.lo < k.hi)) throw ValidationError("make_knots: degenerate support");

  int dropped = 0;
  for (int q = 1; q < n_quantiles - 1; ++q) {
    const double prob = static_cast<double>(q) / static_cast<double>(n_quantiles - 1);
    const double knot = quantile_sorted(sorted, prob);
    if (knot <= k.lo || knot >= k.hi || (!k.interior.empty() && knot <= k.interior.back())) {
      ++dropped;
      continue;
    }
    k.interior.push_back(knot);
  }
  if (dropped > 0) {
    std::ostringstream os;
    os << "make_knots: " << dropped << " duplicate quantile knot(s) collapsed";
    warn(os.str());
  }
  return k;
}

inline KnotVector make_knots(const std::vector<double>& values, int n_quantiles = 6, int degree = 3) {
  return make_knots(std::span<const double>(values), n_quantiles, degree);
}

class SplineBasis {
 public:
  SplineBasis() : SplineBasis(KnotVector{}) {}

  explicit SplineBasis(KnotVector knots) : knots_(std::move(knots)), padded_(knots_.padded()) {
    if (!(knots_.lo < knots_.hi)) throw ValidationError("SplineBasis: lo must be < hi");
    if (knots_.degree < 1) throw ValidationError("SplineBasis: degree must be >= 1");
    double prev = knots_.lo;
    for (double t : knots_.interior) {
      if (!(t > prev) || !(t < knots_.hi)) throw ValidationError("SplineBasis: interior knots must increase strictly inside (lo, hi)");
      prev = t;
    }
  }

  const KnotVector& knots() const { return knots_; }
  int degree() const { return knots_.degree; }
  int size() const { return static_cast<int>(knots_.interior.size()) + knots_.degree + 1; }
  double lo() const { return knots_.lo; }
  double hi() const { return knots_.hi; }

  // Values of all size() basis functions at x (clamped into [lo, hi]).
  Eigen::VectorXd operator()(double x) const {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(size());
    const int first = eval_nonzero(x, scratch_values());
    for (int r = 0; r <= knots_.degree; ++r) out[first + r] = scratch_values()[static_cast<std::size_t>(r)];
    return out;
  }

  // Writes the degree+1 nonzero values into `vals`; returns index of the first.
  int eval_nonzero(double x, std::vector<double>& vals) const {
    const int d = knots_.degree;
    const int p = size();
    x = std::clamp(x, knots_.lo, knots_.hi);
    // span index i with padded_[i] <= x < padded_[i+1], i in [d, p-1]
    int span = p - 1;
    if (x < knots_.hi) {
      auto it = std::upper_bound(padded_.begin() + d, padded_.begin() + p, x);
      span = static_cast<int>(it - padded_.begin()) - 1;
    }
    vals.assign(static_cast<std::size_t>(d + 1), 0.0);
    std::vector<double> left(static_cast<std::size_t>(d + 1)), right(static_cast<std::size_t>(d + 1));
    vals[0] = 1.0;
    for (int j = 1; j <= d; ++j) {
      left[static_cast<std::size_t>(j)] = x - padded_[static_cast<std::size_t>(span + 1 - j)];
      right[static_cast<std::size_t>(j)] = padded_[static_cast<std::size_t>(span + j)] - x;
      double saved = 0.0;
      for (int r = 0; r < j; ++r) {
        const double denom = right[static_cast<std::size_t>(r + 1)] + left[static_cast<std::size_t>(j - r)];
        const double temp = denom == 0.0 ? 0.0 : vals[static_cast<std::size_t>(r)] / denom;
        vals[static_cast<std::size_t>(r)] = saved + right[static_cast<std::size_t>(r + 1)] * temp;
        saved = left[static_cast<std::size_t>(j - r)] * temp;
      }
      vals[static_cast<std::size_t>(j)] = saved;
    }
    return span - d;
  }

 private:
  static std::vector<double>& scratch_values() {
    thread_local std::vector<double> v;
    return v;
  }

  KnotVector knots_;
  std::vector<double> padded_;
};

inline Eigen::VectorXd eval_basis(const SplineBasis& basis, double x) { return basis(x); }

// Row i is eval_basis(basis, xs[i]).
inline Eigen::MatrixXd basis_matrix(const SplineBasis& basis, std::span<const double> xs) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(xs.size()), basis.size());
  for (std::size_t i = 0; i < xs.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = basis(xs[i]).transpose();
  return m;
}

inline Eigen::MatrixXd basis_matrix(const SplineBasis& basis, const std::vector<double>& xs) {
  return basis_matrix(basis, std::span<const double>(xs));
}

// Basis over the integer grid {0, 1, ..., max_value}, the construction used
// for both study time and exposure time.
inline SplineBasis integer_grid_basis(int max_value, int n_quantiles = 6, int degree = 3) {
  std::vector<double> grid(static_cast<std::size_t>(max_value + 1));
  for (int i = 0; i <= max_value; ++i) grid[static_cast<std::size_t>(i)] = i;
  return SplineBasis(make_knots(grid, n_quantiles, degree));
}

}  // namespace swedge
