#pragma once

#include <cmath>
#include <span>

#include "fedivon/core.hpp"
#include "fedivon/random.hpp"

// Variational Online Newton (VON) and its Gauss-Newton variant (VOGN).
// They exist as independent cross-checks for IVON and are not used by the
// federated protocol. Prior precision is written as weight_decay, the same
// quantity IVON calls delta.
namespace fedivon::reference {

struct NewtonState {
  ParamVector mean;
  ParamVector hessian;  // may go negative under VON
  double ess = 1.0;
  double weight_decay = 1e-3;
};

inline ParamVector sample_theta(const NewtonState& s, Rng& rng) {
  ParamVector theta(s.mean.size());
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double prec = s.ess * (s.hessian[j] + s.weight_decay);
    if (!(prec > 0.0)) throw NumericError("reference: nonpositive precision", j);
    theta[j] = s.mean[j] + standard_normal(rng) / std::sqrt(prec);
  }
  return theta;
}

/// h <- (1 - rate) h + rate * hess_diag;  m <- m - rate (g + wd m) / (h + wd).
/// A curvature estimate that drives h + wd to or below zero is reported as a
/// NumericError at the first such coordinate; the state is left unchanged.
inline void von_step(NewtonState& s, std::span<const double> grad, std::span<const double> hess_diag,
                     double rate) {
  require_same_size(grad.size(), s.mean.size(), "von_step grad");
  require_same_size(hess_diag.size(), s.mean.size(), "von_step hessian");
  ParamVector h(s.mean.size()), m(s.mean.size());
  for (std::size_t j = 0; j < h.size(); ++j) {
    h[j] = (1.0 - rate) * s.hessian[j] + rate * hess_diag[j];
    if (!(h[j] + s.weight_decay > 0.0)) throw NumericError("von_step: negative precision", j);
    m[j] = s.mean[j] - rate * (grad[j] + s.weight_decay * s.mean[j]) / (h[j] + s.weight_decay);
  }
  s.hessian = std::move(h);
  s.mean = std::move(m);
}

/// Mean of squared per-example gradients (rows of `example_grads`).
inline ParamVector gauss_newton_diag(const Matrix& example_grads) {
  ParamVector h(example_grads.cols, 0.0);
  const double inv = 1.0 / static_cast<double>(example_grads.rows);
  for (std::size_t i = 0; i < example_grads.rows; ++i) {
    auto g = example_grads.row(i);
    for (std::size_t j = 0; j < h.size(); ++j) h[j] += inv * g[j] * g[j];
  }
  return h;
}

inline void vogn_step(NewtonState& s, std::span<const double> grad, const Matrix& example_grads,
                      double rate) {
  require_same_size(example_grads.cols, s.mean.size(), "vogn_step example grads");
  von_step(s, grad, gauss_newton_diag(example_grads), rate);
}

}  // namespace fedivon::reference
