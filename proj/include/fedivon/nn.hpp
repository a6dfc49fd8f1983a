#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fedivon/core.hpp"
#include "fedivon/random.hpp"

/// Minimal multilayer perceptron classifier over a flat parameter vector.
///
/// Parameter layout, per consecutive layer pair (n_in -> n_out): the weight
/// matrix W as n_out rows of n_in entries, followed by the n_out biases.
namespace fedivon::nn {

enum class Activation { kRelu, kTanh };

struct ModelSpec {
  std::vector<int> layer_sizes;  // input dim, hidden dims..., classes
  Activation activation = Activation::kRelu;

  int input_dim() const { return layer_sizes.front(); }
  int n_classes() const { return layer_sizes.back(); }
  bool operator==(const ModelSpec&) const = default;
};

struct Batch {
  Matrix inputs;            // B x input_dim
  std::vector<int> labels;  // B entries in [0, C)
};

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

inline void validate_layers(const ModelSpec& spec) {
  require(spec.layer_sizes.size() >= 2, "ModelSpec: need at least input and output sizes");
  for (int n : spec.layer_sizes) require(n > 0, "ModelSpec: layer sizes must be positive");
}

/// Full classifier check: layer structure plus at least two classes.
inline void validate(const ModelSpec& spec) {
  validate_layers(spec);
  require(spec.n_classes() >= 2, "ModelSpec: need at least 2 classes");
}

/// Depends on the layer structure only.
inline std::size_t param_count(const ModelSpec& spec) {
  validate_layers(spec);
  std::size_t p = 0;
  for (std::size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l)
    p += static_cast<std::size_t>(spec.layer_sizes[l] + 1) * spec.layer_sizes[l + 1];
  return p;
}

/// Weights ~ N(0, 1/fan_in), biases zero.
inline ParamVector init_params(const ModelSpec& spec, std::uint64_t seed) {
  ParamVector params(param_count(spec), 0.0);
  Rng rng = make_rng(seed, "init_params");
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l) {
    const int n_in = spec.layer_sizes[l];
    const int n_out = spec.layer_sizes[l + 1];
    const double scale = 1.0 / std::sqrt(static_cast<double>(n_in));
    for (int i = 0; i < n_in * n_out; ++i) params[off + i] = scale * standard_normal(rng);
    off += static_cast<std::size_t>(n_in + 1) * n_out;
  }
  return params;
}

namespace detail {

inline double activate(Activation a, double z) {
  return a == Activation::kRelu ? (z > 0.0 ? z : 0.0) : std::tanh(z);
}

// Derivative expressed through the activation output.
inline double activate_grad(Activation a, double z, double out) {
  return a == Activation::kRelu ? (z > 0.0 ? 1.0 : 0.0) : 1.0 - out * out;
}

// Per-example scratch space: pre-activations and outputs for every layer.
struct Trace {
  std::vector<std::vector<double>> pre;
  std::vector<std::vector<double>> out;  // out[0] is the input
  std::vector<double> delta;
  std::vector<double> delta_prev;

  explicit Trace(const ModelSpec& spec) {
    const std::size_t layers = spec.layer_sizes.size();
    out.resize(layers);
    pre.resize(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      out[l].resize(spec.layer_sizes[l]);
      pre[l].resize(spec.layer_sizes[l]);
    }
  }
};

// Runs one example forward; leaves log-probabilities in trace.out.back().
inline void forward_example(const ModelSpec& spec, std::span<const double> params,
                            std::span<const double> x, Trace& t) {
  std::copy(x.begin(), x.end(), t.out[0].begin());
  const std::size_t last = spec.layer_sizes.size() - 1;
  std::size_t off = 0;
  for (std::size_t l = 0; l < last; ++l) {
    const int n_in = spec.layer_sizes[l];
    const int n_out = spec.layer_sizes[l + 1];
    const double* w = params.data() + off;
    const double* b = w + static_cast<std::size_t>(n_in) * n_out;
    const std::vector<double>& a = t.out[l];
    std::vector<double>& z = t.pre[l + 1];
    for (int o = 0; o < n_out; ++o) {
      double s = b[o];
      const double* wr = w + static_cast<std::size_t>(o) * n_in;
      for (int i = 0; i < n_in; ++i) s += wr[i] * a[i];
      z[o] = s;
    }
    if (l + 1 < last) {
      for (int o = 0; o < n_out; ++o) t.out[l + 1][o] = activate(spec.activation, z[o]);
    } else {
      const double zmax = *std::max_element(z.begin(), z.end());
      double sum = 0.0;
      for (double v : z) sum += std::exp(v - zmax);
      const double log_norm = zmax + std::log(sum);
      for (int o = 0; o < n_out; ++o) t.out[l + 1][o] = z[o] - log_norm;
    }
    off += static_cast<std::size_t>(n_in + 1) * n_out;
  }
}

// Accumulates scale * d(-log p(label))/d(params) into grad. Requires a prior
// forward_example on the same trace.
inline void backward_example(const ModelSpec& spec, std::span<const double> params, int label,
                             double scale, Trace& t, std::span<double> grad) {
  const std::size_t last = spec.layer_sizes.size() - 1;
  t.delta.assign(t.out[last].size(), 0.0);
  for (std::size_t c = 0; c < t.delta.size(); ++c)
    t.delta[c] = std::exp(t.out[last][c]) - (static_cast<int>(c) == label ? 1.0 : 0.0);

  std::vector<std::size_t> offsets(last);
  std::size_t off = 0;
  for (std::size_t l = 0; l < last; ++l) {
    offsets[l] = off;
    off += static_cast<std::size_t>(spec.layer_sizes[l] + 1) * spec.layer_sizes[l + 1];
  }

  for (std::size_t l = last; l-- > 0;) {
    const int n_in = spec.layer_sizes[l];
    const int n_out = spec.layer_sizes[l + 1];
    const double* w = params.data() + offsets[l];
    double* gw = grad.data() + offsets[l];
    double* gb = gw + static_cast<std::size_t>(n_in) * n_out;
    const std::vector<double>& a = t.out[l];
    for (int o = 0; o < n_out; ++o) {
      const double d = scale * t.delta[o];
      double* gwr = gw + static_cast<std::size_t>(o) * n_in;
      for (int i = 0; i < n_in; ++i) gwr[i] += d * a[i];
      gb[o] += d;
    }
    if (l == 0) break;
    t.delta_prev.assign(n_in, 0.0);
    for (int o = 0; o < n_out; ++o) {
      const double* wr = w + static_cast<std::size_t>(o) * n_in;
      for (int i = 0; i < n_in; ++i) t.delta_prev[i] += wr[i] * t.delta[o];
    }
    for (int i = 0; i < n_in; ++i)
      t.delta_prev[i] *= activate_grad(spec.activation, t.pre[l][i], t.out[l][i]);
    std::swap(t.delta, t.delta_prev);
  }
}

inline void check_shapes(const ModelSpec& spec, std::span<const double> params,
                         const Matrix& inputs) {
  validate(spec);
  require_same_size(params.size(), param_count(spec), "params");
  require_same_size(inputs.cols, static_cast<std::size_t>(spec.input_dim()), "input dim");
}

}  // namespace detail

/// Class probabilities for every input row. Throws NumericError naming the
/// row when an input is not finite.
inline Matrix forward(const ModelSpec& spec, std::span<const double> params, const Matrix& inputs) {
  detail::check_shapes(spec, params, inputs);
  Matrix probs(inputs.rows, spec.n_classes());
  detail::Trace t(spec);
  for (std::size_t i = 0; i < inputs.rows; ++i) {
    auto x = inputs.row(i);
    if (first_non_finite(x) != x.size()) throw NumericError("forward: non-finite input", i);
    detail::forward_example(spec, params, x, t);
    auto p = probs.row(i);
    for (std::size_t c = 0; c < p.size(); ++c) p[c] = std::exp(t.out.back()[c]);
  }
  return probs;
}

/// Mean cross-entropy over the batch and its exact gradient.
inline LossAndGrad loss_and_grad(const ModelSpec& spec, std::span<const double> params,
                                 const Batch& batch) {
  detail::check_shapes(spec, params, batch.inputs);
  require(batch.inputs.rows >= 1, "loss_and_grad: empty batch");
  require_same_size(batch.labels.size(), batch.inputs.rows, "labels");

  LossAndGrad out{0.0, ParamVector(params.size(), 0.0)};
  const double scale = 1.0 / static_cast<double>(batch.inputs.rows);
  detail::Trace t(spec);
  for (std::size_t i = 0; i < batch.inputs.rows; ++i) {
    const int y = batch.labels[i];
    require(y >= 0 && y < spec.n_classes(), "loss_and_grad: label out of range");
    detail::forward_example(spec, params, batch.inputs.row(i), t);
    const double logp = t.out.back()[y];
    if (!std::isfinite(logp)) throw NumericError("loss_and_grad: non-finite loss", i);
    out.loss -= scale * logp;
    detail::backward_example(spec, params, y, scale, t, out.grad);
  }
  return out;
}

/// Per-example gradients of -log p(y_i | x_i), one row per batch entry.
inline Matrix example_gradients(const ModelSpec& spec, std::span<const double> params,
                                const Batch& batch) {
  detail::check_shapes(spec, params, batch.inputs);
  Matrix g(batch.inputs.rows, params.size());
  detail::Trace t(spec);
  for (std::size_t i = 0; i < batch.inputs.rows; ++i) {
    detail::forward_example(spec, params, batch.inputs.row(i), t);
    if (!std::isfinite(t.out.back()[batch.labels[i]]))
      throw NumericError("example_gradients: non-finite loss", i);
    detail::backward_example(spec, params, batch.labels[i], 1.0, t, g.row(i));
  }
  return g;
}

inline std::string to_string(Activation a) { return a == Activation::kRelu ? "relu" : "tanh"; }

inline Activation activation_from_string(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw std::invalid_argument("unknown activation '" + s + "'");
}

}  // namespace fedivon::nn
