#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "flowlab/common.hpp"
#include "flowlab/rng.hpp"

namespace flowlab {

// Small dense network with tanh hidden units and a linear output layer.
// Backward pass and flat parameter access are hand-rolled: the flow needs
// exact analytic gradients with respect to both inputs and parameters.
struct MLPNet {
  std::vector<int> widths;  // input, hidden..., output
  std::vector<Eigen::MatrixXd> weights;
  std::vector<Eigen::VectorXd> biases;
  std::string activation = "tanh";

  static MLPNet create(const std::vector<int>& widths, Rng& rng, double weight_scale = 1.0,
                       bool zero_last_layer = true) {
    if (widths.size() < 2) throw std::invalid_argument("mlp needs at least two widths");
    MLPNet net;
    net.widths = widths;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
      const int fan_in = widths[l];
      const int fan_out = widths[l + 1];
      if (fan_in < 1 || fan_out < 1) throw std::invalid_argument("mlp widths must be positive");
      Eigen::MatrixXd w(fan_out, fan_in);
      const bool zero = zero_last_layer && l + 2 == widths.size();
      const double scale = weight_scale / std::sqrt(static_cast<double>(fan_in));
      for (int r = 0; r < fan_out; ++r)
        for (int c = 0; c < fan_in; ++c) w(r, c) = zero ? 0.0 : scale * rng.normal();
      net.weights.push_back(std::move(w));
      net.biases.push_back(Eigen::VectorXd::Zero(fan_out));
    }
    return net;
  }

  int input_dim() const { return widths.front(); }
  int output_dim() const { return widths.back(); }
  int n_layers() const { return static_cast<int>(weights.size()); }

  void validate() const {
    if (widths.size() < 2 || weights.size() + 1 != widths.size())
      throw std::invalid_argument("mlp structure inconsistent");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (weights[l].rows() != widths[l + 1] || weights[l].cols() != widths[l] ||
          biases[l].size() != widths[l + 1])
        throw std::invalid_argument("mlp layer shapes inconsistent");
      if (!weights[l].allFinite() || !biases[l].allFinite())
        throw std::invalid_argument("mlp parameters must be finite");
    }
  }

  struct Trace {
    std::vector<Eigen::VectorXd> acts;  // acts[0] = input, acts[l+1] = output of layer l
  };

  Eigen::VectorXd forward(const Eigen::VectorXd& in, Trace* trace = nullptr) const {
    Eigen::VectorXd a = in;
    if (trace) {
      trace->acts.clear();
      trace->acts.push_back(a);
    }
    const int last = n_layers() - 1;
    for (int l = 0; l <= last; ++l) {
      a = weights[static_cast<std::size_t>(l)] * a + biases[static_cast<std::size_t>(l)];
      if (l != last) a = a.array().tanh().matrix();
      if (trace) trace->acts.push_back(a);
    }
    return a;
  }

  // Given dL/doutput, returns dL/dinput. When grad_out is non-null the
  // parameter gradients are accumulated there in flat layout order
  // (per layer: weight rows, then bias).
  Eigen::VectorXd backward(const Trace& trace, const Eigen::VectorXd& dout,
                           double* grad_out = nullptr) const {
    Eigen::VectorXd g = dout;
    const int last = n_layers() - 1;
    for (int l = last; l >= 0; --l) {
      const auto& a_in = trace.acts[static_cast<std::size_t>(l)];
      Eigen::VectorXd gz;
      if (l == last) {
        gz = g;
      } else {
        const auto& a_out = trace.acts[static_cast<std::size_t>(l + 1)];
        gz = (g.array() * (1.0 - a_out.array().square())).matrix();
      }
      if (grad_out) {
        double* seg = grad_out + layer_param_offset(l);
        const auto& w = weights[static_cast<std::size_t>(l)];
        for (int r = 0; r < w.rows(); ++r)
          for (int c = 0; c < w.cols(); ++c) seg[r * w.cols() + c] += gz[r] * a_in[c];
        double* bseg = seg + w.rows() * w.cols();
        for (int r = 0; r < w.rows(); ++r) bseg[r] += gz[r];
      }
      g = weights[static_cast<std::size_t>(l)].transpose() * gz;
    }
    return g;
  }

  int layer_param_offset(int layer) const {
    int off = 0;
    for (int l = 0; l < layer; ++l)
      off += static_cast<int>(weights[static_cast<std::size_t>(l)].size() +
                              biases[static_cast<std::size_t>(l)].size());
    return off;
  }

  int n_params() const { return layer_param_offset(n_layers()); }

  void write_params(double* out) const {
    for (int l = 0; l < n_layers(); ++l) {
      const auto& w = weights[static_cast<std::size_t>(l)];
      const auto& b = biases[static_cast<std::size_t>(l)];
      for (int r = 0; r < w.rows(); ++r)
        for (int c = 0; c < w.cols(); ++c) *out++ = w(r, c);
      for (int r = 0; r < b.size(); ++r) *out++ = b[r];
    }
  }

  void read_params(const double* in) {
    for (int l = 0; l < n_layers(); ++l) {
      auto& w = weights[static_cast<std::size_t>(l)];
      auto& b = biases[static_cast<std::size_t>(l)];
      for (int r = 0; r < w.rows(); ++r)
        for (int c = 0; c < w.cols(); ++c) w(r, c) = *in++;
      for (int r = 0; r < b.size(); ++r) b[r] = *in++;
    }
  }
};

}  // namespace flowlab
