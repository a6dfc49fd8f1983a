#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <utility>
#include <vector>

#include "fedivon/core.hpp"
#include "fedivon/ivon.hpp"

namespace fedivon {

/// What a client sends to the server: its posterior mean and curvature, and
/// how many examples it trained on. The server never sees client data.
struct ClientContribution {
  ParamVector mean;
  ParamVector hessian;  // >= 0
  std::size_t n_examples = 0;
};

namespace detail {

inline std::vector<double> example_weights(std::span<const std::size_t> counts) {
  double total = 0.0;
  for (auto n : counts) {
    require(n > 0, "aggregation: every contribution needs n_examples > 0");
    total += static_cast<double>(n);
  }
  std::vector<double> w;
  w.reserve(counts.size());
  for (auto n : counts) w.push_back(static_cast<double>(n) / total);
  return w;
}

}  // namespace detail

/// Precision-weighted product of diagonal Gaussians:
///   h = sum_k w_k h_k,  m = (sum_k w_k h_k m_k) / h,  w_k = N_k / sum N.
/// Coordinates with h = 0 fall back to the w-weighted mean of the m_k.
///
/// Sums are formed relative to the first contribution and clamped to the
/// interval hull of the inputs, so a single contribution (or identical
/// ones) comes back bit-for-bit.
inline GlobalModel aggregate(std::span<const ClientContribution> contribs) {
  require(!contribs.empty(), "aggregate: no contributions");
  const std::size_t p = contribs.front().mean.size();
  std::vector<std::size_t> counts;
  for (const auto& c : contribs) {
    require_same_size(c.mean.size(), p, "aggregate mean");
    require_same_size(c.hessian.size(), p, "aggregate hessian");
    counts.push_back(c.n_examples);
  }
  const std::vector<double> w = detail::example_weights(counts);
  const ClientContribution& first = contribs.front();

  GlobalModel out{ParamVector(p), ParamVector(p)};
  for (std::size_t j = 0; j < p; ++j) {
    double h = first.hessian[j];
    double h_lo = h, h_hi = h;
    double m_lo = first.mean[j], m_hi = first.mean[j];
    for (std::size_t k = 1; k < contribs.size(); ++k) {
      const double hk = contribs[k].hessian[j];
      const double mk = contribs[k].mean[j];
      h += w[k] * (hk - first.hessian[j]);
      h_lo = std::min(h_lo, hk);
      h_hi = std::max(h_hi, hk);
      m_lo = std::min(m_lo, mk);
      m_hi = std::max(m_hi, mk);
    }
    h = std::clamp(h, h_lo, h_hi);

    double m = first.mean[j];
    for (std::size_t k = 1; k < contribs.size(); ++k) {
      const double coef = h > 0.0 ? w[k] * contribs[k].hessian[j] / h : w[k];
      m += coef * (contribs[k].mean[j] - first.mean[j]);
    }
    // The first contribution's own coefficient multiplies (m_1 - m_1) = 0.
    out.hessian[j] = h;
    out.mean[j] = std::clamp(m, m_lo, m_hi);
    if (!std::isfinite(out.mean[j]) || !std::isfinite(out.hessian[j]))
      throw NumericError("aggregate: non-finite result", j);
  }
  return out;
}

/// Example-count-weighted average of client means (FedAvg).
inline ParamVector fedavg_aggregate(std::span<const std::pair<ParamVector, std::size_t>> models) {
  require(!models.empty(), "fedavg_aggregate: no models");
  const std::size_t p = models.front().first.size();
  std::vector<std::size_t> counts;
  for (const auto& [m, n] : models) {
    require_same_size(m.size(), p, "fedavg_aggregate");
    counts.push_back(n);
  }
  const std::vector<double> w = detail::example_weights(counts);
  const ParamVector& first = models.front().first;
  ParamVector out(first);
  for (std::size_t j = 0; j < p; ++j) {
    double lo = first[j], hi = first[j];
    for (std::size_t k = 1; k < models.size(); ++k) {
      const double v = models[k].first[j];
      out[j] += w[k] * (v - first[j]);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    out[j] = std::clamp(out[j], lo, hi);
  }
  return out;
}

/// sum_k w_k log N(point | m_k, 1/(ess h_k)) - log N(point | m, 1/(ess h))
/// where (m, h) = aggregate(contribs). The weighted sum of Gaussian
/// log-densities is itself a Gaussian log-density up to a constant, so the
/// result does not depend on `point` when the aggregate is correct.
/// Requires every h_k > 0.
inline double product_of_gaussians_density_check(std::span<const ClientContribution> contribs,
                                                 std::span<const double> point, double ess = 1.0) {
  const GlobalModel agg = aggregate(contribs);
  require_same_size(point.size(), agg.mean.size(), "density check point");
  std::vector<std::size_t> counts;
  for (const auto& c : contribs) counts.push_back(c.n_examples);
  const std::vector<double> w = detail::example_weights(counts);
  auto log_normal = [ess](double x, double mu, double h) {
    const double prec = ess * h;
    return 0.5 * std::log(prec / (2.0 * std::numbers::pi)) - 0.5 * prec * (x - mu) * (x - mu);
  };
  double diff = 0.0;
  for (std::size_t j = 0; j < point.size(); ++j) {
    for (std::size_t k = 0; k < contribs.size(); ++k)
      diff += w[k] * log_normal(point[j], contribs[k].mean[j], contribs[k].hessian[j]);
    diff -= log_normal(point[j], agg.mean[j], agg.hessian[j]);
  }
  return diff;
}

}  // namespace fedivon
