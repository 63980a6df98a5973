#pragma once

// Test-only numerical oracles: central finite differences and simple grid
// quadrature. These stay independent of the analytic paths they check.

#include <functional>

#include <Eigen/Dense>

namespace flowlab::testing {

inline Eigen::MatrixXd numerical_jacobian(
    const std::function<Eigen::VectorXd(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& x,
    double h = 1e-6) {
  const Eigen::VectorXd f0 = f(x);
  Eigen::MatrixXd jac(f0.size(), x.size());
  for (int j = 0; j < x.size(); ++j) {
    Eigen::VectorXd xp = x, xm = x;
    xp[j] += h;
    xm[j] -= h;
    jac.col(j) = (f(xp) - f(xm)) / (2.0 * h);
  }
  return jac;
}

inline Eigen::VectorXd central_diff_gradient(
    const std::function<double(const Eigen::VectorXd&)>& f, const Eigen::VectorXd& p,
    double h = 1e-5) {
  Eigen::VectorXd g(p.size());
  for (int j = 0; j < p.size(); ++j) {
    Eigen::VectorXd pp = p, pm = p;
    pp[j] += h;
    pm[j] -= h;
    g[j] = (f(pp) - f(pm)) / (2.0 * h);
  }
  return g;
}

// max_i |a_i - b_i| / max(1, |a_i|, |b_i|)
inline double max_relative_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double worst = 0.0;
  for (int i = 0; i < a.size(); ++i) {
    const double denom = std::max({1.0, std::abs(a[i]), std::abs(b[i])});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

// Midpoint-rule integral of exp(log_density) over [lo, hi]^2.
inline double grid_integral_2d(const std::function<double(const Eigen::VectorXd&)>& log_density,
                               double lo, double hi, int n_cells) {
  const double h = (hi - lo) / n_cells;
  double total = 0.0;
  Eigen::VectorXd x(2);
  for (int i = 0; i < n_cells; ++i) {
    x[0] = lo + (i + 0.5) * h;
    for (int j = 0; j < n_cells; ++j) {
      x[1] = lo + (j + 0.5) * h;
      const double ld = log_density(x);
      if (std::isfinite(ld)) total += std::exp(ld);
    }
  }
  return total * h * h;
}

inline double grid_integral_1d(const std::function<double(double)>& log_density, double lo,
                               double hi, int n_cells) {
  const double h = (hi - lo) / n_cells;
  double total = 0.0;
  for (int i = 0; i < n_cells; ++i) {
    const double ld = log_density(lo + (i + 0.5) * h);
    if (std::isfinite(ld)) total += std::exp(ld);
  }
  return total * h;
}

}  // namespace flowlab::testing
