#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "flowlab/common.hpp"
#include "flowlab/mlp.hpp"
#include "flowlab/rng.hpp"

// Class-conditional latent densities. Every family provides exact log
// densities, sampling, and analytic gradients with respect to the latent
// point and its own trainable parameters.

namespace flowlab {

inline constexpr double kLogTwoPi = 1.8378770664093453;  // log(2 pi)

namespace detail {
inline double gauss_log_density(double x, double mean, double log_std) {
  const double u = (x - mean) * std::exp(-log_std);
  return -0.5 * kLogTwoPi - log_std - 0.5 * u * u;
}
}  // namespace detail

// Diagonal Gaussian per class: p(z|y) = N(mu_y, diag(sigma_y^2)).
struct GMMPrior {
  Eigen::MatrixXd means;     // C x D
  Eigen::MatrixXd log_stds;  // C x D

  static GMMPrior standard_normal(int n_classes, int dim) {
    GMMPrior p;
    p.means = Eigen::MatrixXd::Zero(n_classes, dim);
    p.log_stds = Eigen::MatrixXd::Zero(n_classes, dim);
    return p;
  }

  static GMMPrior random_means(int n_classes, int dim, double mean_std, Rng& rng) {
    GMMPrior p = standard_normal(n_classes, dim);
    for (int c = 0; c < n_classes; ++c)
      for (int d = 0; d < dim; ++d) p.means(c, d) = mean_std * rng.normal();
    return p;
  }

  int dim() const { return static_cast<int>(means.cols()); }
  int n_classes() const { return static_cast<int>(means.rows()); }

  void validate() const {
    if (means.rows() != log_stds.rows() || means.cols() != log_stds.cols())
      throw std::invalid_argument("gmm prior shape mismatch");
    if (!means.allFinite() || !log_stds.allFinite())
      throw std::invalid_argument("gmm prior parameters must be finite");
  }

  void check_class(int y) const {
    if (y < 0 || y >= n_classes()) throw std::invalid_argument("invalid class index");
  }

  double component_logprob(const Eigen::VectorXd& z, int c) const {
    double lp = 0.0;
    for (int d = 0; d < dim(); ++d)
      lp += detail::gauss_log_density(z[d], means(c, d), log_stds(c, d));
    return lp;
  }

  double logprob(const Eigen::VectorXd& z, int y) const {
    check_class(y);
    return component_logprob(z, y);
  }

  Eigen::VectorXd sample(int y, Rng& rng) const {
    check_class(y);
    Eigen::VectorXd z(dim());
    for (int d = 0; d < dim(); ++d)
      z[d] = means(y, d) + std::exp(log_stds(y, d)) * rng.normal();
    return z;
  }

  // Flat layout: [means row-major, log_stds row-major].
  int n_params() const { return 2 * n_classes() * dim(); }

  void component_grads(const Eigen::VectorXd& z, int c, double w, Eigen::VectorXd& gz,
                       double* gparams) const {
    const int D = dim();
    for (int d = 0; d < D; ++d) {
      const double inv_var = std::exp(-2.0 * log_stds(c, d));
      const double centered = z[d] - means(c, d);
      gz[d] += w * (-centered * inv_var);
      if (gparams) {
        gparams[c * D + d] += w * centered * inv_var;
        gparams[n_classes() * D + c * D + d] += w * (centered * centered * inv_var - 1.0);
      }
    }
  }

  void accumulate_grads(const Eigen::VectorXd& z, int y, double w, Eigen::VectorXd& gz,
                        double* gparams) const {
    check_class(y);
    component_grads(z, y, w, gz, gparams);
  }

  void write_params(double* out) const {
    for (int c = 0; c < n_classes(); ++c)
      for (int d = 0; d < dim(); ++d) *out++ = means(c, d);
    for (int c = 0; c < n_classes(); ++c)
      for (int d = 0; d < dim(); ++d) *out++ = log_stds(c, d);
  }
  void read_params(const double* in) {
    for (int c = 0; c < n_classes(); ++c)
      for (int d = 0; d < dim(); ++d) means(c, d) = *in++;
    for (int c = 0; c < n_classes(); ++c)
      for (int d = 0; d < dim(); ++d) log_stds(c, d) = *in++;
  }
};

// Split prior, z = (z_s, z_n): the first block carries the class through a
// fixed one-hot anchor, the rest is a Gaussian head conditioned on (z_s, y).
struct SplitPrior {
  int total_dim = 0;
  int n_class = 0;
  int d_disc = 0;             // size of z_s; anchors need d_disc >= n_class
  double anchor_scale = 5.0;  // anchor mean is anchor_scale * e_y
  double disc_sigma = 1.0;    // shared std of z_s around its anchor
  MLPNet head;                // (z_s, one-hot y) -> (mean, log_std) of z_n

  static SplitPrior create(int dim, int n_classes, int d_disc,
                           const std::vector<int>& head_hidden, Rng& rng,
                           double anchor_scale = 5.0, double disc_sigma = 1.0) {
    SplitPrior p;
    p.total_dim = dim;
    p.n_class = n_classes;
    p.d_disc = d_disc;
    p.anchor_scale = anchor_scale;
    p.disc_sigma = disc_sigma;
    std::vector<int> widths;
    widths.push_back(d_disc + n_classes);
    for (int h : head_hidden) widths.push_back(h);
    widths.push_back(2 * (dim - d_disc));
    p.head = MLPNet::create(widths, rng, 1.0, /*zero_last_layer=*/true);
    p.validate();
    return p;
  }

  int dim() const { return total_dim; }
  int n_classes() const { return n_class; }
  int d_noise() const { return total_dim - d_disc; }

  void validate() const {
    if (d_disc <= 0 || d_disc >= total_dim)
      throw std::invalid_argument("split prior needs 0 < d_disc < dim");
    if (d_disc < n_class)
      throw std::invalid_argument("split prior anchors need d_disc >= class count");
    if (!(disc_sigma > 0.0)) throw std::invalid_argument("split prior sigma must be positive");
    if (head.input_dim() != d_disc + n_class || head.output_dim() != 2 * d_noise())
      throw std::invalid_argument("split prior head shape mismatch");
    head.validate();
  }

  void check_class(int y) const {
    if (y < 0 || y >= n_class) throw std::invalid_argument("invalid class index");
  }

  Eigen::VectorXd head_input(const Eigen::VectorXd& z_s, int y) const {
    Eigen::VectorXd in = Eigen::VectorXd::Zero(d_disc + n_class);
    in.head(d_disc) = z_s;
    in[d_disc + y] = 1.0;
    return in;
  }

  double logprob_disc(const Eigen::VectorXd& z_s, int y) const {
    const double ls = std::log(disc_sigma);
    double lp = 0.0;
    for (int d = 0; d < d_disc; ++d) {
      const double mean = d == y ? anchor_scale : 0.0;
      lp += detail::gauss_log_density(z_s[d], mean, ls);
    }
    return lp;
  }

  double logprob_noise(const Eigen::VectorXd& z_s, const Eigen::VectorXd& z_n, int y) const {
    const Eigen::VectorXd out = head.forward(head_input(z_s, y));
    double lp = 0.0;
    for (int d = 0; d < d_noise(); ++d)
      lp += detail::gauss_log_density(z_n[d], out[d], out[d_noise() + d]);
    return lp;
  }

  double logprob(const Eigen::VectorXd& z, int y) const {
    check_class(y);
    return logprob_disc(z.head(d_disc), y) + logprob_noise(z.head(d_disc), z.tail(d_noise()), y);
  }

  Eigen::VectorXd sample(int y, Rng& rng) const {
    check_class(y);
    Eigen::VectorXd z(total_dim);
    for (int d = 0; d < d_disc; ++d)
      z[d] = (d == y ? anchor_scale : 0.0) + disc_sigma * rng.normal();
    const Eigen::VectorXd out = head.forward(head_input(z.head(d_disc), y));
    for (int d = 0; d < d_noise(); ++d)
      z[d_disc + d] = out[d] + std::exp(out[d_noise() + d]) * rng.normal();
    return z;
  }

  int n_params() const { return head.n_params(); }

  void accumulate_grads(const Eigen::VectorXd& z, int y, double w, Eigen::VectorXd& gz,
                        double* gparams) const {
    check_class(y);
    const Eigen::VectorXd z_s = z.head(d_disc);
    const Eigen::VectorXd z_n = z.tail(d_noise());
    const double inv_var_s = 1.0 / (disc_sigma * disc_sigma);
    for (int d = 0; d < d_disc; ++d) {
      const double mean = d == y ? anchor_scale : 0.0;
      gz[d] += w * (-(z_s[d] - mean) * inv_var_s);
    }
    MLPNet::Trace trace;
    const Eigen::VectorXd out = head.forward(head_input(z_s, y), &trace);
    Eigen::VectorXd dout(2 * d_noise());
    for (int d = 0; d < d_noise(); ++d) {
      const double ls = out[d_noise() + d];
      const double inv_var = std::exp(-2.0 * ls);
      const double centered = z_n[d] - out[d];
      gz[d_disc + d] += w * (-centered * inv_var);
      dout[d] = w * centered * inv_var;                                 // d lp / d mean
      dout[d_noise() + d] = w * (centered * centered * inv_var - 1.0);  // d lp / d log_std
    }
    const Eigen::VectorXd din = head.backward(trace, dout, gparams);
    gz.head(d_disc) += din.head(d_disc);
  }

  void write_params(double* out) const { head.write_params(out); }
  void read_params(const double* in) { head.read_params(in); }
};

// Heavy-tailed / robust alternatives to the Gaussian prior. The mixture
// family shares one location and one scale between its two components.
enum class RobustFamily { kLaplace, kCauchy, kGaussLaplaceMix };

inline std::string robust_family_name(RobustFamily f) {
  switch (f) {
    case RobustFamily::kLaplace: return "laplace";
    case RobustFamily::kCauchy: return "cauchy";
    case RobustFamily::kGaussLaplaceMix: return "gausslaplace";
  }
  throw std::invalid_argument("unknown robust family");
}

inline RobustFamily robust_family_from_name(const std::string& name) {
  if (name == "laplace") return RobustFamily::kLaplace;
  if (name == "cauchy") return RobustFamily::kCauchy;
  if (name == "gausslaplace") return RobustFamily::kGaussLaplaceMix;
  throw std::invalid_argument("unknown robust family: " + name);
}

struct RobustPrior {
  RobustFamily family = RobustFamily::kLaplace;
  Eigen::MatrixXd locations;   // C x D
  Eigen::MatrixXd log_scales;  // C x D
  double mix_weight = 0.5;     // Gaussian weight in the mixture family

  static RobustPrior create(RobustFamily family, int n_classes, int dim, double mean_std,
                            Rng& rng, double mix_weight = 0.5) {
    RobustPrior p;
    p.family = family;
    p.locations = Eigen::MatrixXd::Zero(n_classes, dim);
    p.log_scales = Eigen::MatrixXd::Zero(n_classes, dim);
    p.mix_weight = mix_weight;
    for (int c = 0; c < n_classes; ++c)
      for (int d = 0; d < dim; ++d) p.locations(c, d) = mean_std * rng.normal();
    p.validate();
    return p;
  }

  int dim() const { return static_cast<int>(locations.cols()); }
  int n_classes() const { return static_cast<int>(locations.rows()); }

  void validate() const {
    if (locations.rows() != log_scales.rows() || locations.cols() != log_scales.cols())
      throw std::invalid_argument("robust prior shape mismatch");
    if (!locations.allFinite() || !log_scales.allFinite())
      throw std::invalid_argument("robust prior parameters must be finite");
    if (mix_weight < 0.0 || mix_weight > 1.0)
      throw std::invalid_argument("mixture weight must lie in [0,1]");
  }

  void check_class(int y) const {
    if (y < 0 || y >= n_classes()) throw std::invalid_argument("invalid class index");
  }

  bool heavy_tailed() const { return family == RobustFamily::kCauchy; }

  // Per-dimension log density and its derivatives wrt (z, log_scale).
  void dim_logprob(double z, double loc, double ls, double& lp, double& dz, double& dls) const {
    const double s = std::exp(ls);
    const double centered = z - loc;
    switch (family) {
      case RobustFamily::kLaplace: {
        const double a = std::abs(centered) / s;
        lp = -a - std::log(2.0) - ls;
        dz = -sign(centered) / s;
        dls = a - 1.0;
        return;
      }
      case RobustFamily::kCauchy: {
        const double t = centered / s;
        lp = -std::log(std::numbers::pi) - ls - std::log1p(t * t);
        dz = -2.0 * t / (s * (1.0 + t * t));
        dls = -1.0 + 2.0 * t * t / (1.0 + t * t);
        return;
      }
      case RobustFamily::kGaussLaplaceMix: {
        const double t = centered / s;
        const double lg = -0.5 * kLogTwoPi - ls - 0.5 * t * t;
        const double ll = -std::log(2.0) - ls - std::abs(t);
        const double lwg = mix_weight > 0.0 ? std::log(mix_weight) + lg : kNegInf;
        const double lwl = mix_weight < 1.0 ? std::log1p(-mix_weight) + ll : kNegInf;
        lp = log_add_exp(lwg, lwl);
        const double rg = lwg == kNegInf ? 0.0 : std::exp(lwg - lp);
        const double rl = 1.0 - rg;
        dz = rg * (-t / s) + rl * (-sign(centered) / s);
        dls = rg * (t * t - 1.0) + rl * (std::abs(t) - 1.0);
        return;
      }
    }
    throw std::invalid_argument("unknown robust family");
  }

  double logprob(const Eigen::VectorXd& z, int y) const {
    check_class(y);
    double total = 0.0, lp, dz, dls;
    for (int d = 0; d < dim(); ++d) {
      dim_logprob(z[d], locations(y, d), log_scales(y, d), lp, dz, dls);
      total += lp;
    }
    return total;
  }

  Eigen::VectorXd sample(int y, Rng& rng) const {
    check_class(y);
    Eigen::VectorXd z(dim());
    for (int d = 0; d < dim(); ++d) {
      const double s = std::exp(log_scales(y, d));
      const double loc = locations(y, d);
      switch (family) {
        case RobustFamily::kLaplace: {
          const double u = rng.uniform() - 0.5;
          z[d] = loc - s * sign(u) * std::log1p(-2.0 * std::abs(u));
          break;
        }
        case RobustFamily::kCauchy: {
          z[d] = loc + s * std::tan(std::numbers::pi * (rng.uniform() - 0.5));
          break;
        }
        case RobustFamily::kGaussLaplaceMix: {
          if (rng.bernoulli(mix_weight)) {
            z[d] = loc + s * rng.normal();
          } else {
            const double u = rng.uniform() - 0.5;
            z[d] = loc - s * sign(u) * std::log1p(-2.0 * std::abs(u));
          }
          break;
        }
      }
    }
    return z;
  }

  // Flat layout: [locations row-major, log_scales row-major].
  int n_params() const { return 2 * n_classes() * dim(); }

  void accumulate_grads(const Eigen::VectorXd& z, int y, double w, Eigen::VectorXd& gz,
                        double* gparams) const {
    check_class(y);
    const int D = dim();
    double lp, dz, dls;
    for (int d = 0; d < D; ++d) {
      dim_logprob(z[d], locations(y, d), log_scales(y, d), lp, dz, dls);
      gz[d] += w * dz;
      if (gparams) {
        gparams[y * D + d] += w * (-dz);  // location shifts opposite to z
        gparams[n_classes() * D + y * D + d] += w * dls;
      }
    }
  }

  void write_params(double* out) const {
    for (int c = 0; c < n_classes(); ++c)
      for (int d = 0; d < dim(); ++d) *out++ = locations(c, d);
    for (int c = 0; c < n_classes(); ++c)
      for (int d = 0; d < dim(); ++d) *out++ = log_scales(c, d);
  }
  void read_params(const double* in) {
    for (int c = 0; c < n_classes(); ++c)
      for (int d = 0; d < dim(); ++d) locations(c, d) = *in++;
    for (int c = 0; c < n_classes(); ++c)
      for (int d = 0; d < dim(); ++d) log_scales(c, d) = *in++;
  }
};

// Label smoothing over a GMM base: the latent cluster equals the label with
// probability 1 - smoothing and is uniform over the other labels otherwise.
struct SmoothedPrior {
  GMMPrior base;
  double smoothing = 0.0;

  int dim() const { return base.dim(); }
  int n_classes() const { return base.n_classes(); }

  void validate() const {
    base.validate();
    if (smoothing < 0.0 || smoothing >= 1.0)
      throw std::invalid_argument("smoothing mass must lie in [0,1)");
    if (smoothing > 0.0 && n_classes() < 2)
      throw std::invalid_argument("smoothing needs at least two classes");
  }

  double log_cluster_weight(int c, int y) const {
    if (c == y) return std::log1p(-smoothing);
    return std::log(smoothing) - std::log(static_cast<double>(n_classes() - 1));
  }

  double logprob(const Eigen::VectorXd& z, int y) const {
    base.check_class(y);
    if (smoothing == 0.0) return base.component_logprob(z, y);
    double total = kNegInf;
    for (int c = 0; c < n_classes(); ++c)
      total = log_add_exp(total, log_cluster_weight(c, y) + base.component_logprob(z, c));
    return total;
  }

  Eigen::VectorXd sample(int y, Rng& rng) const {
    base.check_class(y);
    int cluster = y;
    if (smoothing > 0.0 && rng.bernoulli(smoothing)) {
      int other = rng.uniform_int(n_classes() - 1);
      cluster = other >= y ? other + 1 : other;
    }
    return base.sample(cluster, rng);
  }

  int n_params() const { return base.n_params(); }

  void accumulate_grads(const Eigen::VectorXd& z, int y, double w, Eigen::VectorXd& gz,
                        double* gparams) const {
    base.check_class(y);
    if (smoothing == 0.0) {
      base.component_grads(z, y, w, gz, gparams);
      return;
    }
    std::vector<double> terms(static_cast<std::size_t>(n_classes()));
    double total = kNegInf;
    for (int c = 0; c < n_classes(); ++c) {
      terms[static_cast<std::size_t>(c)] =
          log_cluster_weight(c, y) + base.component_logprob(z, c);
      total = log_add_exp(total, terms[static_cast<std::size_t>(c)]);
    }
    for (int c = 0; c < n_classes(); ++c) {
      const double resp = std::exp(terms[static_cast<std::size_t>(c)] - total);
      if (resp > 0.0) base.component_grads(z, c, w * resp, gz, gparams);
    }
  }

  void write_params(double* out) const { base.write_params(out); }
  void read_params(const double* in) { base.read_params(in); }
};

using Prior = std::variant<GMMPrior, SplitPrior, RobustPrior, SmoothedPrior>;

inline int prior_dim(const Prior& p) {
  return std::visit([](const auto& v) { return v.dim(); }, p);
}
inline int prior_classes(const Prior& p) {
  return std::visit([](const auto& v) { return v.n_classes(); }, p);
}
inline void prior_validate(const Prior& p) {
  std::visit([](const auto& v) { v.validate(); }, p);
}
inline double prior_logprob(const Prior& p, const Eigen::VectorXd& z, int y) {
  return std::visit([&](const auto& v) { return v.logprob(z, y); }, p);
}
inline Eigen::VectorXd prior_sample(const Prior& p, int y, Rng& rng) {
  return std::visit([&](const auto& v) { return v.sample(y, rng); }, p);
}
inline int prior_n_params(const Prior& p) {
  return std::visit([](const auto& v) { return v.n_params(); }, p);
}
inline void prior_accumulate_grads(const Prior& p, const Eigen::VectorXd& z, int y, double w,
                                   Eigen::VectorXd& gz, double* gparams) {
  std::visit([&](const auto& v) { v.accumulate_grads(z, y, w, gz, gparams); }, p);
}
inline void prior_write_params(const Prior& p, double* out) {
  std::visit([&](const auto& v) { v.write_params(out); }, p);
}
inline void prior_read_params(Prior& p, const double* in) {
  std::visit([&](auto& v) { v.read_params(in); }, p);
}
// Samplers with no mean-convergence contract (Cauchy tails).
inline bool prior_heavy_tailed(const Prior& p) {
  if (const auto* r = std::get_if<RobustPrior>(&p)) return r->heavy_tailed();
  return false;
}

// (z_s, z_n) split of a latent vector; concatenation restores z exactly.
inline std::pair<Eigen::VectorXd, Eigen::VectorXd> split_partition(const Eigen::VectorXd& z,
                                                                   int d_disc) {
  if (d_disc <= 0 || d_disc >= z.size())
    throw std::invalid_argument("split point must satisfy 0 < d_disc < dim");
  return {z.head(d_disc), z.tail(z.size() - d_disc)};
}

}  // namespace flowlab
