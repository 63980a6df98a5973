#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <vector>

#include <Eigen/Core>

#include "flowlab/common.hpp"
#include "flowlab/rng.hpp"

// Analytic counter-example machinery: two-class mixtures of uniform annulus
// densities, their closed-form posteriors and KL divergences, a solver for
// the smallest dimension making the construction feasible, and a Monte-Carlo
// verifier for the undetectable-attack claim.

namespace flowlab {

// Uniform distribution support {x : inner <= |x| <= outer} in R^dim.
struct AnnulusSpec {
  double inner = 0.0;
  double outer = 1.0;
  int dim = 1;

  void validate() const {
    if (dim < 1) throw std::invalid_argument("annulus dimension must be >= 1");
    if (!(outer > inner) || inner < 0.0)
      throw std::invalid_argument("annulus radii must satisfy 0 <= inner < outer");
  }
};

// Parameters of the construction. `shell_width` is the attack radius (the
// paper's capital Delta), `kl_bound` the divergence budget epsilon, and
// `confidence_slack` the classifier-confidence delta.
struct CounterexampleParams {
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double shell_width = 0.0;
  int dim = 1;
  double kl_bound = 0.0;
  double confidence_slack = 0.0;

  void validate() const {
    if (lambda1 < 0.0 || lambda1 > 1.0 || lambda2 < 0.0 || lambda2 > 1.0)
      throw std::invalid_argument("mixture weights must lie in [0,1]");
    if (!(shell_width > 0.0)) throw std::invalid_argument("shell width must be positive");
    if (dim < 1) throw std::invalid_argument("dimension must be >= 1");
    if (!(kl_bound > 0.0)) throw std::invalid_argument("kl bound must be positive");
    if (!(confidence_slack > 0.0) || !(confidence_slack < 0.5))
      throw std::invalid_argument("confidence slack must lie in (0, 1/2)");
  }
};

// log of the unit-ball volume pi^(d/2) / Gamma(d/2 + 1).
inline double log_unit_ball_volume(int dim) {
  return 0.5 * dim * std::log(std::numbers::pi) - std::lgamma(0.5 * dim + 1.0);
}

// log of the annulus volume C_d (b^d - a^d), all in log space; d can be large.
inline double annulus_log_volume(const AnnulusSpec& spec) {
  spec.validate();
  const double d = spec.dim;
  double log_radial;
  if (spec.inner == 0.0) {
    log_radial = d * std::log(spec.outer);
  } else {
    const double log_ratio = d * (std::log(spec.inner) - std::log(spec.outer));
    log_radial = d * std::log(spec.outer) + log1m_exp(log_ratio);
  }
  return log_unit_ball_volume(spec.dim) + log_radial;
}

// Uniform density on the annulus; -inf outside the support.
inline double annulus_log_density(const AnnulusSpec& spec, const Eigen::VectorXd& x) {
  spec.validate();
  if (x.size() != spec.dim) throw std::invalid_argument("point dimension mismatch");
  const double r = x.norm();
  if (r < spec.inner || r > spec.outer) return kNegInf;
  return -annulus_log_volume(spec);
}

// One uniform draw: direction uniform on the sphere, radius from the volume
// CDF, r = (u (b^d - a^d) + a^d)^(1/d), evaluated in log space.
inline Eigen::VectorXd sample_annulus_point(const AnnulusSpec& spec, Rng& rng) {
  spec.validate();
  const double d = spec.dim;
  const double u = rng.uniform();
  double log_r;
  if (spec.inner == 0.0) {
    log_r = std::log(spec.outer) + (u > 0.0 ? std::log(u) / d : kNegInf);
  } else {
    const double log_shell = d * std::log(spec.outer) +
                             log1m_exp(d * (std::log(spec.inner) - std::log(spec.outer)));
    const double log_mass =
        log_add_exp(u > 0.0 ? std::log(u) + log_shell : kNegInf, d * std::log(spec.inner));
    log_r = log_mass / d;
  }
  double r = std::exp(log_r);
  r = std::clamp(r, spec.inner, spec.outer);
  return r * rng.unit_vector(spec.dim);
}

inline std::vector<Eigen::VectorXd> sample_annulus(const AnnulusSpec& spec, long n, Rng& rng) {
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  std::vector<Eigen::VectorXd> out;
  out.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) out.push_back(sample_annulus_point(spec, rng));
  return out;
}

namespace detail {

inline AnnulusSpec ball(const CounterexampleParams& c) { return {0.0, 1.0, c.dim}; }
inline AnnulusSpec inner_shell(const CounterexampleParams& c) {
  return {1.0, 1.0 + c.shell_width, c.dim};
}
inline AnnulusSpec outer_shell(const CounterexampleParams& c) { return {2.0, 3.0, c.dim}; }
inline AnnulusSpec full_ball(const CounterexampleParams& c) {
  return {0.0, 1.0 + c.shell_width, c.dim};
}

inline double mix_log_density(double w, const AnnulusSpec& a, const AnnulusSpec& b,
                              const Eigen::VectorXd& x) {
  const double la = w > 0.0 ? std::log(w) + annulus_log_density(a, x) : kNegInf;
  const double lb = w < 1.0 ? std::log1p(-w) + annulus_log_density(b, x) : kNegInf;
  return log_add_exp(la, lb);
}

}  // namespace detail

// Data conditionals: p(x|0) = l1 U(0,1) + (1-l1) U(1,1+w),
//                    p(x|1) = l2 U(0,1) + (1-l2) U(2,3).
inline double data_class_log_density(const CounterexampleParams& c, const Eigen::VectorXd& x,
                                     int y) {
  c.validate();
  if (y == 0) return detail::mix_log_density(c.lambda1, detail::ball(c), detail::inner_shell(c), x);
  if (y == 1) return detail::mix_log_density(c.lambda2, detail::ball(c), detail::outer_shell(c), x);
  throw std::invalid_argument("class index must be 0 or 1");
}

// Model conditionals: q(x|0) = U(0,1+w), q(x|1) = p(x|1).
inline double model_class_log_density(const CounterexampleParams& c, const Eigen::VectorXd& x,
                                      int y) {
  c.validate();
  if (y == 0) return annulus_log_density(detail::full_ball(c), x);
  if (y == 1) return detail::mix_log_density(c.lambda2, detail::ball(c), detail::outer_shell(c), x);
  throw std::invalid_argument("class index must be 0 or 1");
}

// Marginals with the uniform label prior p(y=0) = p(y=1) = 1/2.
inline double data_log_marginal(const CounterexampleParams& c, const Eigen::VectorXd& x) {
  return log_add_exp(data_class_log_density(c, x, 0), data_class_log_density(c, x, 1)) -
         std::log(2.0);
}
inline double model_log_marginal(const CounterexampleParams& c, const Eigen::VectorXd& x) {
  return log_add_exp(model_class_log_density(c, x, 0), model_class_log_density(c, x, 1)) -
         std::log(2.0);
}

// Bayes posteriors of class 0 computed from raw densities; the independent
// route against which the closed forms are checked.
inline double data_posterior0(const CounterexampleParams& c, const Eigen::VectorXd& x) {
  const double l0 = data_class_log_density(c, x, 0);
  const double l1 = data_class_log_density(c, x, 1);
  if (l0 == kNegInf && l1 == kNegInf)
    throw std::invalid_argument("posterior undefined outside the support");
  return std::exp(l0 - log_add_exp(l0, l1));
}
inline double model_posterior0(const CounterexampleParams& c, const Eigen::VectorXd& x) {
  const double l0 = model_class_log_density(c, x, 0);
  const double l1 = model_class_log_density(c, x, 1);
  if (l0 == kNegInf && l1 == kNegInf)
    throw std::invalid_argument("posterior undefined outside the support");
  return std::exp(l0 - log_add_exp(l0, l1));
}

struct UnitBallPosteriors {
  double data_posterior = 0.0;   // p(0|x) = l1 / (l1 + l2)
  double model_posterior = 0.0;  // q(0|x) = 1 / (1 + l2 (1+w)^d)
};

// Closed forms, constant over |x| < 1.
inline UnitBallPosteriors posteriors_in_unit_ball(const CounterexampleParams& c) {
  c.validate();
  if (c.lambda1 == 0.0 && c.lambda2 == 0.0)
    throw std::invalid_argument("posterior undefined: no mass in the unit ball");
  UnitBallPosteriors out;
  out.data_posterior = c.lambda1 / (c.lambda1 + c.lambda2);
  const double log_k = c.dim * std::log1p(c.shell_width);
  if (c.lambda2 == 0.0) {
    out.model_posterior = 1.0;
  } else {
    const double t = std::log(c.lambda2) + log_k;
    out.model_posterior = t > 700.0 ? 0.0 : 1.0 / (1.0 + std::exp(t));
  }
  return out;
}

// KL(q(x|0) || p(x|0)): two-region closed form. The class-1 conditionals are
// identical and the label marginals match, so this is the only nonzero term
// in the chain-rule expansion of the joint KL.
inline double kl_model_vs_data(const CounterexampleParams& c) {
  c.validate();
  if (c.lambda1 >= 1.0 || c.lambda1 <= 0.0) return kPosInf;  // support mismatch
  const double log_k = c.dim * std::log1p(c.shell_width);
  const double ball_mass = std::exp(-log_k);  // under q
  const double t1 = -ball_mass * (std::log(c.lambda1) + log_k);
  const double t2 = (1.0 - ball_mass) * (std::log1p(-ball_mass) - std::log1p(-c.lambda1));
  return std::max(0.0, t1 + t2);
}

// KL(p(x|0) || q(x|0)); finite for every lambda1 since q covers the support.
inline double kl_data_vs_model(const CounterexampleParams& c) {
  c.validate();
  const double log_k = c.dim * std::log1p(c.shell_width);
  const double ball_mass = std::exp(-log_k);
  double total = 0.0;
  if (c.lambda1 > 0.0) total += c.lambda1 * (std::log(c.lambda1) + log_k);
  if (c.lambda1 < 1.0)
    total += (1.0 - c.lambda1) * (std::log1p(-c.lambda1) - std::log1p(-ball_mass));
  return std::max(0.0, total);
}

enum class KlDirection {
  kDataVsModel,  // KL(p || q), sampling from p(x|0)
  kModelVsData,  // KL(q || p), sampling from q(x|0)
};

struct McEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
  long n = 0;
};

// Monte-Carlo estimate of the class-0 conditional KL: draw from the first
// argument of the divergence and average the log-density ratio. Support
// violations surface as a +inf estimate rather than an error.
inline McEstimate mc_kl(const CounterexampleParams& c, KlDirection direction, long n, Rng& rng) {
  c.validate();
  if (n < 1000) throw std::invalid_argument("mc_kl needs at least 10^3 samples");
  const AnnulusSpec ball = detail::ball(c);
  const AnnulusSpec shell = detail::inner_shell(c);
  const AnnulusSpec full = detail::full_ball(c);

  double mean = 0.0, m2 = 0.0;
  bool infinite = false;
  for (long i = 0; i < n; ++i) {
    Eigen::VectorXd x;
    if (direction == KlDirection::kDataVsModel) {
      x = rng.bernoulli(c.lambda1) ? sample_annulus_point(ball, rng)
                                   : sample_annulus_point(shell, rng);
    } else {
      x = sample_annulus_point(full, rng);
    }
    const double lp = data_class_log_density(c, x, 0);
    const double lq = model_class_log_density(c, x, 0);
    const double ratio = direction == KlDirection::kDataVsModel ? lp - lq : lq - lp;
    if (!std::isfinite(ratio)) {
      infinite = true;
      break;
    }
    const double delta = ratio - mean;
    mean += delta / static_cast<double>(i + 1);
    m2 += delta * (ratio - mean);
  }
  if (infinite) return {kPosInf, kPosInf, n};
  const double var = m2 / static_cast<double>(n - 1);
  return {mean, std::sqrt(std::max(0.0, var) / static_cast<double>(n)), n};
}

// The five sufficient conditions from the feasibility proof, evaluated on
// concrete parameters. A tiny slack absorbs the exact-equality boundary that
// the canonical lambda2 = slack/(1-slack) * lambda1 choice produces.
inline std::array<bool, 5> proof_conditions(const CounterexampleParams& c) {
  constexpr double tol = 1e-12;
  const double log_k = c.dim * std::log1p(c.shell_width);
  const double log_w = std::log1p(c.shell_width);
  std::array<bool, 5> ok{};
  ok[0] = c.lambda1 / (c.lambda1 + c.lambda2) >= 1.0 - c.confidence_slack - tol;
  const double t = c.lambda2 > 0.0 ? std::log(c.lambda2) + log_k : kNegInf;
  ok[1] = t >= std::log1p(-c.confidence_slack) - std::log(c.confidence_slack) - tol;
  ok[2] = c.lambda1 <= -std::expm1(-c.kl_bound) + tol;
  ok[3] = c.lambda1 > 0.0 && std::log(c.lambda1) > -log_k;
  ok[4] = c.lambda1 < c.kl_bound / (c.dim * log_w);
  return ok;
}

struct DimensionSolution {
  int dim = 0;
  double lambda1_lo = 0.0;
  double lambda1_hi = 0.0;
  double lambda1 = 0.0;  // midpoint of the interval
  double lambda2 = 0.0;  // slack/(1-slack) * lambda1
  std::array<bool, 5> conditions{};
  bool feasible = false;

  CounterexampleParams params(double kl_bound, double confidence_slack,
                              double shell_width) const {
    return {lambda1, lambda2, shell_width, dim, kl_bound, confidence_slack};
  }
};

// Smallest dimension for which the lambda1 window
//   ((1-s)/s)^2 (1+w)^-d  <  lambda1  <  min(eps/2, eps/(d log(1+w)), 1-e^-eps)
// opens up. The lower end makes the model confidently wrong inside the ball;
// the upper end keeps both KL divergences under eps.
inline DimensionSolution solve_dimension(double kl_bound, double confidence_slack,
                                         double shell_width) {
  if (!(kl_bound > 0.0)) throw std::invalid_argument("kl bound must be positive");
  if (!(confidence_slack > 0.0) || !(confidence_slack < 0.5))
    throw std::invalid_argument("confidence slack must lie in (0, 1/2)");
  if (!(shell_width > 0.0)) throw std::invalid_argument("shell width must be positive");

  const double log_w = std::log1p(shell_width);
  const double log_ratio_sq =
      2.0 * (std::log1p(-confidence_slack) - std::log(confidence_slack));
  const double cap = std::min(0.5 * kl_bound, -std::expm1(-kl_bound));

  constexpr int kMaxDim = 1000000;
  for (int d = 1; d <= kMaxDim; ++d) {
    const double log_lo = log_ratio_sq - d * log_w;
    const double hi = std::min(cap, kl_bound / (d * log_w));
    if (hi <= 0.0) continue;
    if (log_lo < std::log(hi)) {
      DimensionSolution sol;
      sol.dim = d;
      sol.lambda1_lo = std::exp(log_lo);
      sol.lambda1_hi = hi;
      sol.lambda1 = 0.5 * (sol.lambda1_lo + sol.lambda1_hi);
      sol.lambda2 = confidence_slack / (1.0 - confidence_slack) * sol.lambda1;
      sol.conditions =
          proof_conditions(sol.params(kl_bound, confidence_slack, shell_width));
      sol.feasible = sol.conditions[0] && sol.conditions[1] && sol.conditions[2] &&
                     sol.conditions[3] && sol.conditions[4];
      return sol;
    }
  }
  throw numeric_error("solve_dimension: no feasible dimension below 10^6");
}

// Offset keeping the attacked point strictly inside the open unit ball.
inline constexpr double kInteriorOffset = 1e-6;

// Radially project a shell point just inside the unit sphere. Distance moved
// is |x| - 1 + offset <= shell_width + offset.
inline Eigen::VectorXd construct_adversarial(const Eigen::VectorXd& x, double shell_width) {
  const double r = x.norm();
  if (r < 1.0 - 1e-12 || r > (1.0 + shell_width) * (1.0 + 1e-12))
    throw std::invalid_argument("adversarial construction requires a point in the shell");
  return x * ((1.0 - kInteriorOffset) / r);
}

// Joint draw (x, y) from the data distribution p.
inline std::pair<Eigen::VectorXd, int> sample_from_data(const CounterexampleParams& c, Rng& rng) {
  const int y = rng.bernoulli(0.5) ? 0 : 1;
  Eigen::VectorXd x;
  if (y == 0) {
    x = rng.bernoulli(c.lambda1) ? sample_annulus_point(detail::ball(c), rng)
                                 : sample_annulus_point(detail::inner_shell(c), rng);
  } else {
    x = rng.bernoulli(c.lambda2) ? sample_annulus_point(detail::ball(c), rng)
                                 : sample_annulus_point(detail::outer_shell(c), rng);
  }
  return {std::move(x), y};
}

struct WilsonInterval {
  double lo = 0.0;
  double hi = 0.0;
};

inline WilsonInterval wilson_interval(long successes, long n, double z = 1.959963984540054) {
  if (n <= 0) return {0.0, 1.0};
  const double nn = static_cast<double>(n);
  const double phat = static_cast<double>(successes) / nn;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / nn;
  const double center = (phat + z2 / (2.0 * nn)) / denom;
  const double half =
      z * std::sqrt(phat * (1.0 - phat) / nn + z2 / (4.0 * nn * nn)) / denom;
  return {center - half, center + half};
}

struct PropositionReport {
  CounterexampleParams params;
  long n = 0;
  long n_eligible = 0;           // class 0 and inside the attack shell
  long n_confident_at_origin = 0;  // both models confident and correct at x
  long n_flip_confident = 0;     // model flips confidently, data model does not
  long n_within_distance = 0;    // |x - xbar| <= shell_width + offset
  long n_above_median = 0;       // q(xbar) >= median q over the sample
  long n_success = 0;            // all of the above
  double fraction = 0.0;
  WilsonInterval interval;
  double median_model_log_density = 0.0;
  bool feasible = false;
  bool pass = false;  // Wilson lower bound > 1/3
  // Empirical ball-mass probe for the no-degenerate-ball condition; only
  // computed in low dimension where it is informative.
  bool ball_mass_checked = false;
  double max_ball_mass = 0.0;
};

// Fraction of p-samples within distance shell_width of any of a few sampled
// centers; probes the "small mass in every Delta-ball" condition.
inline double estimate_max_ball_mass(const CounterexampleParams& c, long n, int n_centers,
                                     Rng& rng) {
  std::vector<Eigen::VectorXd> pts;
  pts.reserve(static_cast<std::size_t>(n));
  for (long i = 0; i < n; ++i) pts.push_back(sample_from_data(c, rng).first);
  double worst = 0.0;
  for (int k = 0; k < n_centers; ++k) {
    const Eigen::VectorXd& center = pts[static_cast<std::size_t>(rng.uniform_int(
        static_cast<int>(pts.size())))];
    long inside = 0;
    for (const auto& p : pts)
      if ((p - center).norm() <= c.shell_width) ++inside;
    worst = std::max(worst, static_cast<double>(inside) / static_cast<double>(n));
  }
  return worst;
}

// Sample n points from p and measure how often a correctly and confidently
// classified shell point admits the radial attack: the model flips to a
// confident wrong class, the data posterior stays put, the move is short,
// and the model density does not drop below its sample median.
inline PropositionReport verify_proposition(const CounterexampleParams& c, long n, Rng& rng) {
  c.validate();
  if (n < 1) throw std::invalid_argument("sample count must be >= 1");
  constexpr double conf_tol = 1e-9;

  PropositionReport report;
  report.params = c;
  report.n = n;
  const auto conds = proof_conditions(c);
  report.feasible = conds[0] && conds[1] && conds[2] && conds[3] && conds[4];

  struct PerSample {
    bool eligible_chain = false;  // conditions up to distance hold
    double model_log_density_adv = 0.0;
  };
  std::vector<PerSample> partial;
  partial.reserve(static_cast<std::size_t>(n));
  std::vector<double> model_log_densities;
  model_log_densities.reserve(static_cast<std::size_t>(n));

  const double confident = 1.0 - c.confidence_slack - conf_tol;
  for (long i = 0; i < n; ++i) {
    const auto [x, y] = sample_from_data(c, rng);
    model_log_densities.push_back(model_log_marginal(c, x));

    PerSample s;
    const double r = x.norm();
    const bool eligible = (y == 0) && r >= 1.0 && r <= 1.0 + c.shell_width;
    if (eligible) {
      ++report.n_eligible;
      const bool conf_origin =
          data_posterior0(c, x) >= confident && model_posterior0(c, x) >= confident;
      if (conf_origin) {
        ++report.n_confident_at_origin;
        const Eigen::VectorXd adv = construct_adversarial(x, c.shell_width);
        const bool flips = model_posterior0(c, adv) <= c.confidence_slack + conf_tol &&
                           data_posterior0(c, adv) >= confident;
        if (flips) {
          ++report.n_flip_confident;
          const bool close = (x - adv).norm() <= c.shell_width + kInteriorOffset + 1e-12;
          if (close) {
            ++report.n_within_distance;
            s.eligible_chain = true;
            s.model_log_density_adv = model_log_marginal(c, adv);
          }
        }
      }
    }
    partial.push_back(s);
  }

  std::vector<double> sorted = model_log_densities;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t half = sorted.size() / 2;
  report.median_model_log_density = sorted.size() % 2 == 1
                                        ? sorted[half]
                                        : 0.5 * (sorted[half - 1] + sorted[half]);

  for (const auto& s : partial) {
    if (!s.eligible_chain) continue;
    if (s.model_log_density_adv >= report.median_model_log_density - 1e-12) {
      ++report.n_above_median;
      ++report.n_success;
    }
  }

  report.fraction = static_cast<double>(report.n_success) / static_cast<double>(n);
  report.interval = wilson_interval(report.n_success, n);
  report.pass = report.interval.lo > 1.0 / 3.0;

  if (c.dim <= 20) {
    report.ball_mass_checked = true;
    const long probe_n = std::min<long>(n, 20000);
    report.max_ball_mass = estimate_max_ball_mass(c, probe_n, 20, rng);
  }
  return report;
}

}  // namespace flowlab
