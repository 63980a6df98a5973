#pragma once

#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "flowlab/common.hpp"
#include "flowlab/mlp.hpp"
#include "flowlab/priors.hpp"
#include "flowlab/rng.hpp"
#include "flowlab/textio.hpp"

// Bijective flow layers with exact log-determinants and analytic gradients,
// the conditional flow model p(x|y) = p(f(x)|y) |det J|, and a versioned
// text serialization of the whole thing.

namespace flowlab {

// Per-dimension affine normalization, y_i = exp(s_i) x_i + b_i. Data-dependent
// initialization sets the first batch to zero mean, unit variance.
struct ActNormLayer {
  Eigen::VectorXd log_scale;
  Eigen::VectorXd bias;
  bool initialized = false;

  static ActNormLayer identity(int dim, bool pending_init) {
    ActNormLayer l;
    l.log_scale = Eigen::VectorXd::Zero(dim);
    l.bias = Eigen::VectorXd::Zero(dim);
    l.initialized = !pending_init;
    return l;
  }

  int dim() const { return static_cast<int>(log_scale.size()); }

  void validate() const {
    if (log_scale.size() != bias.size())
      throw std::invalid_argument("actnorm shape mismatch");
    if (!log_scale.allFinite() || !bias.allFinite())
      throw std::invalid_argument("actnorm parameters must be finite");
  }

  void check_ready() const {
    if (!initialized) throw std::invalid_argument("actnorm layer used before initialization");
  }

  void initialize(const std::vector<Eigen::VectorXd>& batch) {
    if (batch.size() < 2) throw std::invalid_argument("actnorm init needs a batch of >= 2");
    const int d = dim();
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(d);
    for (const auto& z : batch) mean += z;
    mean /= static_cast<double>(batch.size());
    Eigen::VectorXd var = Eigen::VectorXd::Zero(d);
    for (const auto& z : batch) var += (z - mean).cwiseProduct(z - mean);
    var /= static_cast<double>(batch.size());
    for (int i = 0; i < d; ++i) {
      if (!(var[i] > 0.0)) throw std::invalid_argument("degenerate init batch");
      log_scale[i] = -0.5 * std::log(var[i]);
      bias[i] = -mean[i] * std::exp(log_scale[i]);
    }
    initialized = true;
  }

  void forward(const Eigen::VectorXd& in, Eigen::VectorXd& out, double& logdet) const {
    check_ready();
    out = log_scale.array().exp().matrix().cwiseProduct(in) + bias;
    logdet = log_scale.sum();
  }

  Eigen::VectorXd inverse(const Eigen::VectorXd& out) const {
    check_ready();
    return (out - bias).cwiseProduct((-log_scale).array().exp().matrix());
  }

  Eigen::VectorXd backward(const Eigen::VectorXd& in, const Eigen::VectorXd& g,
                           double logdet_weight, double* gparams) const {
    const Eigen::VectorXd scale = log_scale.array().exp().matrix();
    if (gparams) {
      for (int i = 0; i < dim(); ++i) {
        gparams[i] += g[i] * scale[i] * in[i] + logdet_weight;
        gparams[dim() + i] += g[i];
      }
    }
    return g.cwiseProduct(scale);
  }

  int n_params() const { return 2 * dim(); }
  void write_params(double* out) const {
    for (int i = 0; i < dim(); ++i) *out++ = log_scale[i];
    for (int i = 0; i < dim(); ++i) *out++ = bias[i];
  }
  void read_params(const double* in) {
    for (int i = 0; i < dim(); ++i) log_scale[i] = *in++;
    for (int i = 0; i < dim(); ++i) bias[i] = *in++;
  }
};

// Affine coupling: dims in part_a pass through and drive a network producing
// (raw scale, shift) for part_b. The effective scale exp(c tanh(raw)) is
// bounded away from zero, which is what makes the map invertible.
struct CouplingLayer {
  std::vector<int> part_a;
  std::vector<int> part_b;
  MLPNet net;  // |A| -> 2|B|
  double scale_clamp = 2.0;

  int dim() const { return static_cast<int>(part_a.size() + part_b.size()); }

  void validate() const {
    if (part_a.empty() || part_b.empty())
      throw std::invalid_argument("coupling partition sides must be non-empty");
    std::vector<char> seen(static_cast<std::size_t>(dim()), 0);
    for (int i : part_a) {
      if (i < 0 || i >= dim() || seen[static_cast<std::size_t>(i)]++)
        throw std::invalid_argument("coupling partition is not a partition");
    }
    for (int i : part_b) {
      if (i < 0 || i >= dim() || seen[static_cast<std::size_t>(i)]++)
        throw std::invalid_argument("coupling partition is not a partition");
    }
    if (net.input_dim() != static_cast<int>(part_a.size()) ||
        net.output_dim() != 2 * static_cast<int>(part_b.size()))
      throw std::invalid_argument("coupling net shape mismatch");
    if (!(scale_clamp > 0.0)) throw std::invalid_argument("scale clamp must be positive");
    net.validate();
  }

  Eigen::VectorXd gather(const Eigen::VectorXd& v, const std::vector<int>& idx) const {
    Eigen::VectorXd out(static_cast<int>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) out[static_cast<int>(i)] = v[idx[i]];
    return out;
  }

  void forward(const Eigen::VectorXd& in, Eigen::VectorXd& out, double& logdet) const {
    const Eigen::VectorXd raw = net.forward(gather(in, part_a));
    const int nb = static_cast<int>(part_b.size());
    out = in;
    logdet = 0.0;
    for (int j = 0; j < nb; ++j) {
      const double th = std::tanh(raw[j]);
      const double s = std::exp(scale_clamp * th);
      out[part_b[static_cast<std::size_t>(j)]] =
          s * in[part_b[static_cast<std::size_t>(j)]] + raw[nb + j];
      logdet += scale_clamp * th;
    }
  }

  Eigen::VectorXd inverse(const Eigen::VectorXd& out) const {
    const Eigen::VectorXd raw = net.forward(gather(out, part_a));
    const int nb = static_cast<int>(part_b.size());
    Eigen::VectorXd in = out;
    for (int j = 0; j < nb; ++j) {
      const double s = std::exp(scale_clamp * std::tanh(raw[j]));
      in[part_b[static_cast<std::size_t>(j)]] =
          (out[part_b[static_cast<std::size_t>(j)]] - raw[nb + j]) / s;
    }
    return in;
  }

  Eigen::VectorXd backward(const Eigen::VectorXd& in, const Eigen::VectorXd& g,
                           double logdet_weight, double* gparams) const {
    MLPNet::Trace trace;
    const Eigen::VectorXd raw = net.forward(gather(in, part_a), &trace);
    const int nb = static_cast<int>(part_b.size());
    Eigen::VectorXd g_raw(2 * nb);
    Eigen::VectorXd g_in = g;
    for (int j = 0; j < nb; ++j) {
      const int bj = part_b[static_cast<std::size_t>(j)];
      const double th = std::tanh(raw[j]);
      const double s = std::exp(scale_clamp * th);
      const double dth = scale_clamp * (1.0 - th * th);
      g_raw[j] = (g[bj] * in[bj] * s + logdet_weight) * dth;
      g_raw[nb + j] = g[bj];
      g_in[bj] = g[bj] * s;
    }
    const Eigen::VectorXd g_a = net.backward(trace, g_raw, gparams);
    for (std::size_t i = 0; i < part_a.size(); ++i) g_in[part_a[i]] += g_a[static_cast<int>(i)];
    return g_in;
  }

  int n_params() const { return net.n_params(); }
  void write_params(double* out) const { net.write_params(out); }
  void read_params(const double* in) { net.read_params(in); }
};

// Invertible channel mixing: a fixed permutation, or a trainable LU-factored
// matrix out = P L U in with the U diagonal kept away from zero through
// sign * (softplus(raw) + floor).
struct InvLinearLayer {
  bool is_lu = false;
  std::vector<int> perm;  // plain layer: the map itself; LU: applied last
  Eigen::MatrixXd lower;  // unit lower, strict part trainable
  Eigen::MatrixXd upper;  // strict part trainable, diagonal derived
  Eigen::VectorXd diag_raw;
  Eigen::VectorXd diag_sign;

  static constexpr double kDiagFloor = 1e-6;

  static InvLinearLayer permutation(std::vector<int> p) {
    InvLinearLayer l;
    l.is_lu = false;
    l.perm = std::move(p);
    l.validate();
    return l;
  }

  static InvLinearLayer random_permutation(int dim, Rng& rng) {
    std::vector<int> p(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i) p[static_cast<std::size_t>(i)] = i;
    rng.shuffle(p);
    return permutation(std::move(p));
  }

  // LU factors of a random rotation.
  static InvLinearLayer random_lu(int dim, Rng& rng) {
    Eigen::MatrixXd gauss(dim, dim);
    for (int r = 0; r < dim; ++r)
      for (int c = 0; c < dim; ++c) gauss(r, c) = rng.normal();
    const Eigen::HouseholderQR<Eigen::MatrixXd> qr(gauss);
    Eigen::MatrixXd q = qr.householderQ();
    const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int c = 0; c < dim; ++c)
      if (r(c, c) < 0.0) q.col(c) = -q.col(c);

    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(q);
    InvLinearLayer l;
    l.is_lu = true;
    l.lower = Eigen::MatrixXd(lu.matrixLU().triangularView<Eigen::UnitLower>());
    Eigen::MatrixXd u = lu.matrixLU().triangularView<Eigen::Upper>();
    const Eigen::MatrixXd pt =
        Eigen::MatrixXd(lu.permutationP().transpose());  // q = P^T L U
    l.perm.resize(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim; ++i)
      for (int j = 0; j < dim; ++j)
        if (pt(i, j) > 0.5) l.perm[static_cast<std::size_t>(i)] = j;
    l.diag_sign.resize(dim);
    l.diag_raw.resize(dim);
    for (int i = 0; i < dim; ++i) {
      const double d = u(i, i);
      l.diag_sign[i] = sign(d);
      const double mag = std::max(std::abs(d) - kDiagFloor, 1e-9);
      l.diag_raw[i] = softplus_inverse(mag);
    }
    l.upper = u;
    l.refresh_diagonal();
    l.validate();
    return l;
  }

  int dim() const { return static_cast<int>(perm.size()); }

  void refresh_diagonal() {
    for (int i = 0; i < dim(); ++i)
      upper(i, i) = diag_sign[i] * (softplus(diag_raw[i]) + kDiagFloor);
  }

  void validate() const {
    std::vector<char> seen(perm.size(), 0);
    for (int i : perm) {
      if (i < 0 || i >= dim() || seen[static_cast<std::size_t>(i)]++)
        throw std::invalid_argument("invlinear permutation is not a bijection");
    }
    if (is_lu) {
      if (lower.rows() != dim() || lower.cols() != dim() || upper.rows() != dim() ||
          upper.cols() != dim() || diag_raw.size() != dim() || diag_sign.size() != dim())
        throw std::invalid_argument("invlinear LU shape mismatch");
      if (!lower.allFinite() || !upper.allFinite() || !diag_raw.allFinite())
        throw std::invalid_argument("invlinear parameters must be finite");
      for (int i = 0; i < dim(); ++i)
        if (std::abs(upper(i, i)) < kDiagFloor * (1.0 - 1e-9))
          throw std::invalid_argument("invlinear U diagonal below floor");
    }
  }

  void forward(const Eigen::VectorXd& in, Eigen::VectorXd& out, double& logdet) const {
    if (!is_lu) {
      out.resize(dim());
      for (int i = 0; i < dim(); ++i) out[i] = in[perm[static_cast<std::size_t>(i)]];
      logdet = 0.0;
      return;
    }
    const Eigen::VectorXd u = upper.triangularView<Eigen::Upper>() * in;
    const Eigen::VectorXd v = lower.triangularView<Eigen::UnitLower>() * u;
    out.resize(dim());
    for (int i = 0; i < dim(); ++i) out[i] = v[perm[static_cast<std::size_t>(i)]];
    logdet = 0.0;
    for (int i = 0; i < dim(); ++i) logdet += std::log(softplus(diag_raw[i]) + kDiagFloor);
  }

  Eigen::VectorXd inverse(const Eigen::VectorXd& out) const {
    Eigen::VectorXd v(dim());
    for (int i = 0; i < dim(); ++i) v[perm[static_cast<std::size_t>(i)]] = out[i];
    if (!is_lu) return v;
    const Eigen::VectorXd u = lower.triangularView<Eigen::UnitLower>().solve(v);
    return upper.triangularView<Eigen::Upper>().solve(u);
  }

  Eigen::VectorXd backward(const Eigen::VectorXd& in, const Eigen::VectorXd& g,
                           double logdet_weight, double* gparams) const {
    Eigen::VectorXd g_v(dim());
    for (int i = 0; i < dim(); ++i) g_v[perm[static_cast<std::size_t>(i)]] = g[i];
    if (!is_lu) return g_v;

    const Eigen::VectorXd u = upper.triangularView<Eigen::Upper>() * in;
    const Eigen::VectorXd g_u = lower.triangularView<Eigen::UnitLower>().transpose() * g_v;
    const Eigen::VectorXd g_in = upper.triangularView<Eigen::Upper>().transpose() * g_u;
    if (gparams) {
      const int d = dim();
      int off = 0;
      for (int i = 0; i < d; ++i)
        for (int j = 0; j < i; ++j) gparams[off++] += g_v[i] * u[j];
      for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) gparams[off++] += g_u[i] * in[j];
      for (int i = 0; i < d; ++i) {
        const double mag = softplus(diag_raw[i]) + kDiagFloor;
        gparams[off++] +=
            (g_u[i] * in[i] * diag_sign[i] + logdet_weight / mag) * sigmoid(diag_raw[i]);
      }
    }
    return g_in;
  }

  int n_params() const { return is_lu ? dim() * (dim() - 1) + dim() : 0; }

  void write_params(double* out) const {
    if (!is_lu) return;
    const int d = dim();
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < i; ++j) *out++ = lower(i, j);
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) *out++ = upper(i, j);
    for (int i = 0; i < d; ++i) *out++ = diag_raw[i];
  }
  void read_params(const double* in) {
    if (!is_lu) return;
    const int d = dim();
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < i; ++j) lower(i, j) = *in++;
    for (int i = 0; i < d; ++i)
      for (int j = i + 1; j < d; ++j) upper(i, j) = *in++;
    for (int i = 0; i < d; ++i) diag_raw[i] = *in++;
    refresh_diagonal();
  }
};

using FlowLayer = std::variant<ActNormLayer, CouplingLayer, InvLinearLayer>;

inline int layer_n_params(const FlowLayer& l) {
  return std::visit([](const auto& v) { return v.n_params(); }, l);
}

struct FlowModel {
  int dim = 0;
  int n_classes = 0;
  std::vector<FlowLayer> layers;
  Prior prior = GMMPrior::standard_normal(1, 1);
  Eigen::VectorXd class_log_prior;  // log p(y)
  std::uint64_t construction_seed = 0;

  void validate() const {
    if (dim < 1 || n_classes < 1) throw std::invalid_argument("model dimensions invalid");
    for (const auto& l : layers) {
      const int d = std::visit([](const auto& v) { return v.dim(); }, l);
      if (d != dim) throw std::invalid_argument("layer dimension mismatch");
      std::visit([](const auto& v) { v.validate(); }, l);
    }
    if (prior_dim(prior) != dim || prior_classes(prior) != n_classes)
      throw std::invalid_argument("prior shape mismatch");
    prior_validate(prior);
    if (class_log_prior.size() != n_classes)
      throw std::invalid_argument("class prior size mismatch");
    double total = 0.0;
    for (int c = 0; c < n_classes; ++c) total += std::exp(class_log_prior[c]);
    if (std::abs(total - 1.0) > 1e-12)
      throw std::invalid_argument("class prior must sum to 1");
  }
};

struct FlowTrace {
  std::vector<Eigen::VectorXd> zs;  // zs[0] = x, zs[i] = output of layer i-1
  std::vector<double> layer_logdets;
  double logdet = 0.0;

  const Eigen::VectorXd& latent() const { return zs.back(); }
};

inline FlowTrace flow_forward(const FlowModel& m, const Eigen::VectorXd& x) {
  if (x.size() != m.dim) throw std::invalid_argument("input dimension mismatch");
  if (!x.allFinite()) throw std::invalid_argument("input must be finite");
  FlowTrace trace;
  trace.zs.reserve(m.layers.size() + 1);
  trace.zs.push_back(x);
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    Eigen::VectorXd out;
    double ld = 0.0;
    std::visit([&](const auto& l) { l.forward(trace.zs.back(), out, ld); }, m.layers[i]);
    if (!out.allFinite() || !std::isfinite(ld))
      throw numeric_error("numerical overflow in layer " + std::to_string(i));
    trace.zs.push_back(std::move(out));
    trace.layer_logdets.push_back(ld);
    trace.logdet += ld;
  }
  return trace;
}

inline Eigen::VectorXd flow_inverse(const FlowModel& m, const Eigen::VectorXd& z) {
  if (z.size() != m.dim) throw std::invalid_argument("input dimension mismatch");
  if (!z.allFinite()) throw std::invalid_argument("input must be finite");
  Eigen::VectorXd x = z;
  for (std::size_t i = m.layers.size(); i-- > 0;) {
    x = std::visit([&](const auto& l) { return l.inverse(x); }, m.layers[i]);
    if (!x.allFinite())
      throw numeric_error("numerical overflow in layer " + std::to_string(i) + " (inverse)");
  }
  return x;
}

inline double log_likelihood(const FlowModel& m, const Eigen::VectorXd& x, int y) {
  if (y < 0 || y >= m.n_classes) throw std::invalid_argument("invalid class index");
  const FlowTrace trace = flow_forward(m, x);
  return prior_logprob(m.prior, trace.latent(), y) + trace.logdet;
}

// log p(x|y) + log p(y) for every class, sharing one forward pass.
inline Eigen::VectorXd class_log_joint(const FlowModel& m, const Eigen::VectorXd& x) {
  const FlowTrace trace = flow_forward(m, x);
  Eigen::VectorXd out(m.n_classes);
  for (int y = 0; y < m.n_classes; ++y)
    out[y] = prior_logprob(m.prior, trace.latent(), y) + trace.logdet + m.class_log_prior[y];
  return out;
}

// Gradient of sum_y weights[y] log p(x|y) with respect to x and, when
// grad_params is non-null, every model parameter (flat layout: layers in
// order, then the prior).
inline Eigen::VectorXd flow_backward(const FlowModel& m, const FlowTrace& trace,
                                     const Eigen::VectorXd& class_weights,
                                     double* grad_params = nullptr) {
  if (class_weights.size() != m.n_classes)
    throw std::invalid_argument("class weight size mismatch");
  const double logdet_weight = class_weights.sum();

  int prior_offset = 0;
  for (const auto& l : m.layers) prior_offset += layer_n_params(l);

  Eigen::VectorXd gz = Eigen::VectorXd::Zero(m.dim);
  for (int y = 0; y < m.n_classes; ++y) {
    if (class_weights[y] == 0.0) continue;
    prior_accumulate_grads(m.prior, trace.latent(), y, class_weights[y], gz,
                           grad_params ? grad_params + prior_offset : nullptr);
  }

  int offset = prior_offset;
  for (std::size_t i = m.layers.size(); i-- > 0;) {
    offset -= layer_n_params(m.layers[i]);
    gz = std::visit(
        [&](const auto& l) {
          return l.backward(trace.zs[i], gz, logdet_weight,
                            grad_params ? grad_params + offset : nullptr);
        },
        m.layers[i]);
  }
  return gz;
}

struct ParamBlock {
  std::string path;
  int offset = 0;
  int size = 0;
};

inline std::vector<ParamBlock> parameter_layout(const FlowModel& m) {
  std::vector<ParamBlock> blocks;
  int off = 0;
  auto add = [&](const std::string& path, int size) {
    if (size > 0) blocks.push_back({path, off, size});
    off += size;
  };
  for (std::size_t i = 0; i < m.layers.size(); ++i) {
    const std::string base = "layer" + std::to_string(i);
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, ActNormLayer>) {
            add(base + ".actnorm", l.n_params());
          } else if constexpr (std::is_same_v<T, CouplingLayer>) {
            add(base + ".coupling.net", l.n_params());
          } else {
            add(base + ".invlinear", l.n_params());
          }
        },
        m.layers[i]);
  }
  add("prior", prior_n_params(m.prior));
  return blocks;
}

inline int n_parameters(const FlowModel& m) {
  int total = 0;
  for (const auto& l : m.layers) total += layer_n_params(l);
  return total + prior_n_params(m.prior);
}

inline Eigen::VectorXd get_parameters(const FlowModel& m) {
  Eigen::VectorXd out(n_parameters(m));
  int off = 0;
  for (const auto& l : m.layers) {
    std::visit([&](const auto& v) { v.write_params(out.data() + off); }, l);
    off += layer_n_params(l);
  }
  prior_write_params(m.prior, out.data() + off);
  return out;
}

inline void set_parameters(FlowModel& m, const Eigen::VectorXd& params) {
  if (params.size() != n_parameters(m))
    throw std::invalid_argument("parameter vector size mismatch");
  int off = 0;
  for (auto& l : m.layers) {
    std::visit([&](auto& v) { v.read_params(params.data() + off); }, l);
    off += layer_n_params(l);
  }
  prior_read_params(m.prior, params.data() + off);
}

// Walks the layers in order and data-initializes any uninitialized actnorm
// on the activations the batch produces at that depth.
inline void initialize_actnorms(FlowModel& m, const std::vector<Eigen::VectorXd>& batch) {
  std::vector<Eigen::VectorXd> current = batch;
  for (auto& layer : m.layers) {
    if (auto* an = std::get_if<ActNormLayer>(&layer)) {
      if (!an->initialized) an->initialize(current);
    }
    for (auto& z : current) {
      Eigen::VectorXd out;
      double ld = 0.0;
      std::visit([&](const auto& l) { l.forward(z, out, ld); }, layer);
      z = std::move(out);
    }
  }
}

inline bool has_uninitialized_actnorm(const FlowModel& m) {
  for (const auto& layer : m.layers)
    if (const auto* an = std::get_if<ActNormLayer>(&layer))
      if (!an->initialized) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Builder

enum class MixKind { kNone, kPermutation, kLu };

struct FlowArchitecture {
  int n_couplings = 6;
  std::vector<int> hidden{64};
  MixKind mix = MixKind::kLu;
  bool use_actnorm = true;
  double scale_clamp = 2.0;
  double weight_scale = 1.0;
  bool actnorm_pending_init = true;  // false: start as identity, already usable
};

struct PriorSpec {
  std::string kind = "gmm";  // gmm | split | laplace | cauchy | gausslaplace | smoothed
  double init_mean_std = 0.1;
  double smoothing = 0.05;     // smoothed
  int d_disc = 0;              // split; 0 means class count
  std::vector<int> head_hidden{32};
  double anchor_scale = 5.0;   // split
  double disc_sigma = 1.0;     // split
  double mix_weight = 0.5;     // gausslaplace
};

inline Prior build_prior(int dim, int n_classes, const PriorSpec& spec, Rng& rng) {
  if (spec.kind == "gmm") return GMMPrior::random_means(n_classes, dim, spec.init_mean_std, rng);
  if (spec.kind == "smoothed") {
    SmoothedPrior p;
    p.base = GMMPrior::random_means(n_classes, dim, spec.init_mean_std, rng);
    p.smoothing = spec.smoothing;
    p.validate();
    return p;
  }
  if (spec.kind == "split") {
    const int d_disc = spec.d_disc > 0 ? spec.d_disc : n_classes;
    return SplitPrior::create(dim, n_classes, d_disc, spec.head_hidden, rng, spec.anchor_scale,
                              spec.disc_sigma);
  }
  if (spec.kind == "laplace" || spec.kind == "cauchy" || spec.kind == "gausslaplace")
    return RobustPrior::create(robust_family_from_name(spec.kind), n_classes, dim,
                               spec.init_mean_std, rng, spec.mix_weight);
  throw config_error("unknown prior kind: " + spec.kind);
}

inline FlowModel build_flow_model(int dim, int n_classes, const FlowArchitecture& arch,
                                  const PriorSpec& prior_spec, std::uint64_t seed) {
  if (arch.n_couplings > 0 && dim < 2)
    throw std::invalid_argument("couplings need dimension >= 2");
  Rng rng(seed);
  FlowModel m;
  m.dim = dim;
  m.n_classes = n_classes;
  m.construction_seed = seed;
  m.class_log_prior =
      Eigen::VectorXd::Constant(n_classes, -std::log(static_cast<double>(n_classes)));

  const int half = dim / 2;
  std::vector<int> first, second;
  for (int i = 0; i < half; ++i) first.push_back(i);
  for (int i = half; i < dim; ++i) second.push_back(i);

  for (int k = 0; k < arch.n_couplings; ++k) {
    if (arch.use_actnorm)
      m.layers.emplace_back(ActNormLayer::identity(dim, arch.actnorm_pending_init));
    if (arch.mix == MixKind::kPermutation)
      m.layers.emplace_back(InvLinearLayer::random_permutation(dim, rng));
    else if (arch.mix == MixKind::kLu)
      m.layers.emplace_back(InvLinearLayer::random_lu(dim, rng));

    CouplingLayer coupling;
    coupling.part_a = (k % 2 == 0) ? first : second;
    coupling.part_b = (k % 2 == 0) ? second : first;
    coupling.scale_clamp = arch.scale_clamp;
    std::vector<int> widths;
    widths.push_back(static_cast<int>(coupling.part_a.size()));
    for (int h : arch.hidden) widths.push_back(h);
    widths.push_back(2 * static_cast<int>(coupling.part_b.size()));
    coupling.net = MLPNet::create(widths, rng, arch.weight_scale, /*zero_last_layer=*/true);
    m.layers.emplace_back(std::move(coupling));
  }

  m.prior = build_prior(dim, n_classes, prior_spec, rng);
  m.validate();
  return m;
}

// Adds scale * N(0,1) noise to every parameter; test helper for "random
// model" properties.
inline void perturb_parameters(FlowModel& m, double scale, Rng& rng) {
  Eigen::VectorXd p = get_parameters(m);
  for (int i = 0; i < p.size(); ++i) p[i] += scale * rng.normal();
  set_parameters(m, p);
}

// ---------------------------------------------------------------------------
// Serialization (versioned text format, float64 round-trip exact)

namespace detail {

inline void write_mlp(std::ostream& os, const MLPNet& net) {
  os << "mlp " << net.activation << " " << net.widths.size();
  for (int w : net.widths) os << " " << w;
  std::vector<double> params(static_cast<std::size_t>(net.n_params()));
  net.write_params(params.data());
  for (double v : params) os << " " << format_double(v);
  os << "\n";
}

inline void expect_token(std::istream& is, const std::string& expected) {
  std::string tok;
  if (!(is >> tok) || tok != expected)
    throw config_error("model file: expected '" + expected + "', got '" + tok + "'");
}

inline double read_double(std::istream& is) {
  std::string tok;
  if (!(is >> tok)) throw config_error("model file: unexpected end of input");
  return parse_double(tok, "model file field");
}

inline long read_long(std::istream& is) {
  std::string tok;
  if (!(is >> tok)) throw config_error("model file: unexpected end of input");
  return parse_long(tok, "model file field");
}

inline MLPNet read_mlp(std::istream& is) {
  expect_token(is, "mlp");
  MLPNet net;
  if (!(is >> net.activation)) throw config_error("model file: missing activation");
  if (net.activation != "tanh")
    throw config_error("model file: unsupported activation " + net.activation);
  const long n_widths = read_long(is);
  for (long i = 0; i < n_widths; ++i) net.widths.push_back(static_cast<int>(read_long(is)));
  for (std::size_t l = 0; l + 1 < net.widths.size(); ++l) {
    net.weights.emplace_back(Eigen::MatrixXd::Zero(net.widths[l + 1], net.widths[l]));
    net.biases.emplace_back(Eigen::VectorXd::Zero(net.widths[l + 1]));
  }
  std::vector<double> params(static_cast<std::size_t>(net.n_params()));
  for (double& v : params) v = read_double(is);
  net.read_params(params.data());
  net.validate();
  return net;
}

}  // namespace detail

inline void write_model(std::ostream& os, const FlowModel& m) {
  os << "flowlab-model v1\n";
  os << "dim " << m.dim << " classes " << m.n_classes << " seed " << m.construction_seed
     << "\n";
  os << "class_log_prior";
  for (int c = 0; c < m.n_classes; ++c) os << " " << format_double(m.class_log_prior[c]);
  os << "\nlayers " << m.layers.size() << "\n";
  for (const auto& layer : m.layers) {
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, ActNormLayer>) {
            os << "actnorm " << (l.initialized ? 1 : 0);
            for (int i = 0; i < l.dim(); ++i) os << " " << format_double(l.log_scale[i]);
            for (int i = 0; i < l.dim(); ++i) os << " " << format_double(l.bias[i]);
            os << "\n";
          } else if constexpr (std::is_same_v<T, CouplingLayer>) {
            os << "coupling " << format_double(l.scale_clamp) << " " << l.part_a.size();
            for (int i : l.part_a) os << " " << i;
            os << " " << l.part_b.size();
            for (int i : l.part_b) os << " " << i;
            os << "\n";
            detail::write_mlp(os, l.net);
          } else {
            if (!l.is_lu) {
              os << "permutation " << l.dim();
              for (int i : l.perm) os << " " << i;
              os << "\n";
            } else {
              os << "invlu " << l.dim();
              for (int i : l.perm) os << " " << i;
              for (int i = 0; i < l.dim(); ++i) os << " " << format_double(l.diag_sign[i]);
              std::vector<double> params(static_cast<std::size_t>(l.n_params()));
              l.write_params(params.data());
              for (double v : params) os << " " << format_double(v);
              os << "\n";
            }
          }
        },
        layer);
  }
  std::visit(
      [&](const auto& p) {
        using T = std::decay_t<decltype(p)>;
        if constexpr (std::is_same_v<T, GMMPrior>) {
          os << "prior gmm " << p.n_classes() << " " << p.dim();
        } else if constexpr (std::is_same_v<T, SmoothedPrior>) {
          os << "prior smoothed " << format_double(p.smoothing) << " " << p.n_classes() << " "
             << p.dim();
        } else if constexpr (std::is_same_v<T, RobustPrior>) {
          os << "prior robust " << robust_family_name(p.family) << " "
             << format_double(p.mix_weight) << " " << p.n_classes() << " " << p.dim();
        } else {
          os << "prior split " << p.n_classes() << " " << p.dim() << " " << p.d_disc << " "
             << format_double(p.anchor_scale) << " " << format_double(p.disc_sigma) << "\n";
          detail::write_mlp(os, p.head);
        }
        if constexpr (!std::is_same_v<T, SplitPrior>) {
          std::vector<double> params(static_cast<std::size_t>(p.n_params()));
          p.write_params(params.data());
          for (double v : params) os << " " << format_double(v);
          os << "\n";
        }
      },
      m.prior);
  os << "end\n";
}

inline FlowModel read_model(std::istream& is) {
  detail::expect_token(is, "flowlab-model");
  detail::expect_token(is, "v1");
  FlowModel m;
  detail::expect_token(is, "dim");
  m.dim = static_cast<int>(detail::read_long(is));
  detail::expect_token(is, "classes");
  m.n_classes = static_cast<int>(detail::read_long(is));
  detail::expect_token(is, "seed");
  std::string seed_tok;
  if (!(is >> seed_tok)) throw config_error("model file: missing seed");
  m.construction_seed = std::stoull(seed_tok);
  detail::expect_token(is, "class_log_prior");
  m.class_log_prior.resize(m.n_classes);
  for (int c = 0; c < m.n_classes; ++c) m.class_log_prior[c] = detail::read_double(is);
  detail::expect_token(is, "layers");
  const long n_layers = detail::read_long(is);
  for (long i = 0; i < n_layers; ++i) {
    std::string kind;
    if (!(is >> kind)) throw config_error("model file: missing layer kind");
    if (kind == "actnorm") {
      ActNormLayer l;
      l.initialized = detail::read_long(is) != 0;
      l.log_scale.resize(m.dim);
      l.bias.resize(m.dim);
      for (int d = 0; d < m.dim; ++d) l.log_scale[d] = detail::read_double(is);
      for (int d = 0; d < m.dim; ++d) l.bias[d] = detail::read_double(is);
      m.layers.emplace_back(std::move(l));
    } else if (kind == "coupling") {
      CouplingLayer l;
      l.scale_clamp = detail::read_double(is);
      const long na = detail::read_long(is);
      for (long j = 0; j < na; ++j) l.part_a.push_back(static_cast<int>(detail::read_long(is)));
      const long nb = detail::read_long(is);
      for (long j = 0; j < nb; ++j) l.part_b.push_back(static_cast<int>(detail::read_long(is)));
      l.net = detail::read_mlp(is);
      m.layers.emplace_back(std::move(l));
    } else if (kind == "permutation") {
      const long d = detail::read_long(is);
      std::vector<int> perm;
      for (long j = 0; j < d; ++j) perm.push_back(static_cast<int>(detail::read_long(is)));
      m.layers.emplace_back(InvLinearLayer::permutation(std::move(perm)));
    } else if (kind == "invlu") {
      InvLinearLayer l;
      l.is_lu = true;
      const long d = detail::read_long(is);
      for (long j = 0; j < d; ++j) l.perm.push_back(static_cast<int>(detail::read_long(is)));
      l.diag_sign.resize(d);
      for (long j = 0; j < d; ++j) l.diag_sign[j] = detail::read_double(is);
      l.lower = Eigen::MatrixXd::Identity(d, d);
      l.upper = Eigen::MatrixXd::Zero(d, d);
      l.diag_raw = Eigen::VectorXd::Zero(d);
      std::vector<double> params(static_cast<std::size_t>(l.n_params()));
      for (double& v : params) v = detail::read_double(is);
      l.read_params(params.data());
      m.layers.emplace_back(std::move(l));
    } else {
      throw config_error("model file: unknown layer kind " + kind);
    }
  }
  detail::expect_token(is, "prior");
  std::string kind;
  if (!(is >> kind)) throw config_error("model file: missing prior kind");
  if (kind == "gmm" || kind == "smoothed" || kind == "robust") {
    double smoothing = 0.0, mix_weight = 0.5;
    RobustFamily family = RobustFamily::kLaplace;
    if (kind == "smoothed") smoothing = detail::read_double(is);
    if (kind == "robust") {
      std::string fam;
      if (!(is >> fam)) throw config_error("model file: missing robust family");
      family = robust_family_from_name(fam);
      mix_weight = detail::read_double(is);
    }
    const long c = detail::read_long(is);
    const long d = detail::read_long(is);
    if (kind == "robust") {
      RobustPrior p;
      p.family = family;
      p.mix_weight = mix_weight;
      p.locations = Eigen::MatrixXd::Zero(c, d);
      p.log_scales = Eigen::MatrixXd::Zero(c, d);
      std::vector<double> params(static_cast<std::size_t>(p.n_params()));
      for (double& v : params) v = detail::read_double(is);
      p.read_params(params.data());
      m.prior = std::move(p);
    } else {
      GMMPrior base;
      base.means = Eigen::MatrixXd::Zero(c, d);
      base.log_stds = Eigen::MatrixXd::Zero(c, d);
      std::vector<double> params(static_cast<std::size_t>(base.n_params()));
      for (double& v : params) v = detail::read_double(is);
      base.read_params(params.data());
      if (kind == "gmm") {
        m.prior = std::move(base);
      } else {
        SmoothedPrior p;
        p.base = std::move(base);
        p.smoothing = smoothing;
        m.prior = std::move(p);
      }
    }
  } else if (kind == "split") {
    SplitPrior p;
    p.n_class = static_cast<int>(detail::read_long(is));
    p.total_dim = static_cast<int>(detail::read_long(is));
    p.d_disc = static_cast<int>(detail::read_long(is));
    p.anchor_scale = detail::read_double(is);
    p.disc_sigma = detail::read_double(is);
    p.head = detail::read_mlp(is);
    m.prior = std::move(p);
  } else {
    throw config_error("model file: unknown prior kind " + kind);
  }
  detail::expect_token(is, "end");
  m.validate();
  return m;
}

inline void save_model(const FlowModel& m, const std::string& path) {
  std::ostringstream os;
  write_model(os, m);
  write_text_file(path, os.str());
}

inline FlowModel load_model(const std::string& path) {
  std::istringstream is(read_text_file(path));
  return read_model(is);
}

}  // namespace flowlab
