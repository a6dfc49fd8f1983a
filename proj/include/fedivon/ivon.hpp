#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedivon/core.hpp"
#include "fedivon/data.hpp"
#include "fedivon/nn.hpp"
#include "fedivon/random.hpp"

namespace fedivon {

/// Diagonal Gaussian q(theta) = N(mean, sigma^2) with
/// sigma_j^2 = 1 / (ess * (hessian_j + decay_j)).
///
/// decay_j is `weight_decay` unless `elementwise_decay` is non-empty, in which
/// case it overrides the scalar per coordinate. Personalized training uses
/// the override to carry the prior-derived precision.
struct VariationalPosterior {
  ParamVector mean;
  ParamVector hessian;  // >= 0
  double ess = 1.0;
  double weight_decay = 2e-4;
  ParamVector elementwise_decay;

  std::size_t size() const { return mean.size(); }
  double decay(std::size_t j) const {
    return elementwise_decay.empty() ? weight_decay : elementwise_decay[j];
  }
  bool operator==(const VariationalPosterior&) const = default;
};

/// Server-side (mean, hessian) pair broadcast every round.
struct GlobalModel {
  ParamVector mean;
  ParamVector hessian;
  bool operator==(const GlobalModel&) const = default;
};

struct IvonConfig {
  double beta1 = 0.9;
  double beta2 = 0.99999;
  double lr_initial = 0.1;
  double lr_final = 0.01;
  double weight_decay = 2e-4;
  std::optional<double> ess;  // nullopt: use the local dataset size
  double h_init = 1.0;
  int batch_size = 32;
  int epochs = 2;
  int train_mc_samples = 1;
  std::optional<double> clip_grad_norm;

  bool operator==(const IvonConfig&) const = default;
};

inline void validate(const IvonConfig& c) {
  require(c.beta1 >= 0.0 && c.beta1 < 1.0, "ivon.beta1 must be in [0, 1)");
  require(c.beta2 >= 0.0 && c.beta2 < 1.0, "ivon.beta2 must be in [0, 1)");
  require(c.lr_initial > 0.0 && c.lr_final > 0.0, "ivon learning rates must be positive");
  require(c.lr_final <= c.lr_initial, "ivon.lr_final must not exceed ivon.lr_initial");
  require(c.weight_decay >= 0.0, "ivon.weight_decay must be nonnegative");
  require(!c.ess || *c.ess > 0.0, "ivon.ess must be positive");
  require(c.h_init >= 0.0, "ivon.h_init must be nonnegative");
  require(c.batch_size >= 1, "ivon.batch_size must be >= 1");
  require(c.epochs >= 0, "ivon.epochs must be >= 0");
  require(c.train_mc_samples >= 1, "ivon.train_mc_samples must be >= 1");
  require(!c.clip_grad_norm || *c.clip_grad_norm > 0.0, "ivon.clip_grad_norm must be positive");
}

struct IvonState {
  VariationalPosterior posterior;
  ParamVector momentum;
  std::int64_t step = 0;
  IvonConfig config;
  ParamVector anchor;  // regularization centre; empty means zero

  double anchor_at(std::size_t j) const { return anchor.empty() ? 0.0 : anchor[j]; }
};

/// Prior N(mean, 1/(ess*(hessian + weight_decay))) and personalization strength.
struct PriorSpec {
  ParamVector mean;
  ParamVector hessian;
  double beta = 1.0;
};

struct ClientUpdateResult {
  VariationalPosterior posterior;
  double mean_loss = 0.0;  // average minibatch loss over all steps
  std::int64_t steps = 0;
};

inline ParamVector sigma_sq(const VariationalPosterior& post) {
  ParamVector s(post.size());
  for (std::size_t j = 0; j < s.size(); ++j)
    s[j] = 1.0 / (post.ess * (post.hessian[j] + post.decay(j)));
  return s;
}

/// theta = mean + sigma * eps, eps ~ N(0, I) drawn from `rng`.
inline ParamVector sample_theta(const VariationalPosterior& post, Rng& rng) {
  ParamVector theta(post.size());
  for (std::size_t j = 0; j < theta.size(); ++j) {
    const double sigma = 1.0 / std::sqrt(post.ess * (post.hessian[j] + post.decay(j)));
    theta[j] = post.mean[j] + sigma * standard_normal(rng);
  }
  return theta;
}

/// Reparameterized curvature estimate grad * (theta - mean) / sigma^2. Unbiased
/// for the diagonal Hessian; individual draws can be negative.
inline ParamVector hessian_estimate(std::span<const double> grad_hat, std::span<const double> theta,
                                    const VariationalPosterior& post) {
  require_same_size(grad_hat.size(), post.size(), "hessian_estimate grad");
  require_same_size(theta.size(), post.size(), "hessian_estimate theta");
  const ParamVector s2 = sigma_sq(post);
  ParamVector h(post.size());
  for (std::size_t j = 0; j < h.size(); ++j) h[j] = grad_hat[j] * (theta[j] - post.mean[j]) / s2[j];
  return h;
}

/// One IVON update, in place. On a non-finite result the state is left
/// untouched and NumericError names the first bad coordinate.
inline void apply_ivon_step(IvonState& state, std::span<const double> grad_hat,
                            std::span<const double> h_hat, double lr) {
  VariationalPosterior& post = state.posterior;
  const std::size_t n = post.size();
  require_same_size(grad_hat.size(), n, "ivon_step grad");
  require_same_size(h_hat.size(), n, "ivon_step hessian estimate");
  require(lr > 0.0, "ivon_step: lr must be positive");
  if (state.momentum.empty()) state.momentum.assign(n, 0.0);

  const double b1 = state.config.beta1;
  const double b2 = state.config.beta2;
  const std::int64_t e = state.step + 1;
  const double debias = 1.0 - std::pow(b1, static_cast<double>(e));

  ParamVector g(n), h(n), m(n);
  for (std::size_t j = 0; j < n; ++j) {
    const double d = post.decay(j);
    g[j] = b1 * state.momentum[j] + (1.0 - b1) * grad_hat[j];
    const double h_old = post.hessian[j];
    const double diff = h_old - h_hat[j];
    double h_new = b2 * h_old + (1.0 - b2) * h_hat[j] +
                   0.5 * (1.0 - b2) * (1.0 - b2) * diff * diff / (h_old + d);
    h[j] = std::max(h_new, 0.0);
    const double g_bar = g[j] / debias;
    m[j] = post.mean[j] - lr * (g_bar + d * (post.mean[j] - state.anchor_at(j))) / (h[j] + d);
    if (!std::isfinite(g[j]) || !std::isfinite(h[j]) || !std::isfinite(m[j]) ||
        !std::isfinite(1.0 / (post.ess * (h[j] + d))))
      throw NumericError("ivon_step: non-finite update", j);
  }
  state.momentum = std::move(g);
  post.hessian = std::move(h);
  post.mean = std::move(m);
  state.step = e;
}

inline IvonState ivon_step(IvonState state, std::span<const double> grad_hat,
                           std::span<const double> h_hat, double lr) {
  apply_ivon_step(state, grad_hat, h_hat, lr);
  return state;
}

/// Linear decay from lr_initial (step 0) to lr_final (last step).
inline double scheduled_lr(const IvonConfig& c, std::int64_t t, std::int64_t total) {
  if (total <= 1) return c.lr_initial;
  const double frac = static_cast<double>(t) / static_cast<double>(total - 1);
  return c.lr_initial + (c.lr_final - c.lr_initial) * frac;
}

inline void clip_to_norm(std::span<double> v, std::optional<double> max_norm) {
  if (!max_norm) return;
  double sq = 0.0;
  for (double x : v) sq += x * x;
  const double norm = std::sqrt(sq);
  if (norm > *max_norm)
    for (double& x : v) x *= *max_norm / norm;
}

namespace detail {

inline std::int64_t steps_per_epoch(std::size_t n, int batch_size) {
  return static_cast<std::int64_t>((n + batch_size - 1) / batch_size);
}

// Shared minibatch loop of the standard and personalized client updates.
// The random stream drives both the per-epoch shuffles and the posterior draws.
inline ClientUpdateResult run_ivon(const data::Dataset& dataset, const nn::ModelSpec& spec,
                                   IvonState state, std::uint64_t seed) {
  const IvonConfig& cfg = state.config;
  const std::size_t n = dataset.size();
  const std::int64_t per_epoch = steps_per_epoch(n, cfg.batch_size);
  const std::int64_t total = per_epoch * cfg.epochs;
  const double inv_mc = 1.0 / cfg.train_mc_samples;

  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  double loss_sum = 0.0;
  std::int64_t t = 0;
  const std::size_t p = state.posterior.size();
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t b = 0; b < per_epoch; ++b, ++t) {
      const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch_size;
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      const nn::Batch batch =
          data::make_batch(dataset, std::span<const std::size_t>(order.data() + begin, end - begin));

      ParamVector g_hat(p, 0.0), h_hat(p, 0.0);
      for (int s = 0; s < cfg.train_mc_samples; ++s) {
        const ParamVector theta = sample_theta(state.posterior, rng);
        const nn::LossAndGrad lg = nn::loss_and_grad(spec, theta, batch);
        const ParamVector h_s = hessian_estimate(lg.grad, theta, state.posterior);
        for (std::size_t j = 0; j < p; ++j) {
          g_hat[j] += inv_mc * lg.grad[j];
          h_hat[j] += inv_mc * h_s[j];
        }
        loss_sum += inv_mc * lg.loss;
      }
      clip_to_norm(g_hat, cfg.clip_grad_norm);
      apply_ivon_step(state, g_hat, h_hat, scheduled_lr(cfg, t, total));
    }
  }
  return {std::move(state.posterior), total > 0 ? loss_sum / static_cast<double>(total) : 0.0, total};
}

inline void check_client_inputs(const data::Dataset& dataset, const nn::ModelSpec& spec,
                                const GlobalModel& init, const IvonConfig& config) {
  validate(config);
  if (dataset.size() == 0) throw std::invalid_argument("client_update: empty dataset");
  const std::size_t p = nn::param_count(spec);
  require_same_size(init.mean.size(), p, "client_update init mean");
  require_same_size(init.hessian.size(), p, "client_update init hessian");
}

}  // namespace detail

/// Local variational training of one client starting from the broadcast
/// (mean, hessian). Momentum starts at zero; the learning rate decays
/// linearly over this call's steps.
inline ClientUpdateResult client_update(const data::Dataset& dataset, const nn::ModelSpec& spec,
                                        const GlobalModel& init, const IvonConfig& config,
                                        std::uint64_t seed) {
  detail::check_client_inputs(dataset, spec, init, config);
  IvonState state;
  state.config = config;
  state.posterior.mean = init.mean;
  state.posterior.hessian = init.hessian;
  state.posterior.ess = config.ess.value_or(static_cast<double>(dataset.size()));
  state.posterior.weight_decay = config.weight_decay;
  return detail::run_ivon(dataset, spec, std::move(state), seed);
}

/// Client training against a prior with strength beta. The isotropic weight
/// decay is replaced by decay_p = beta * (h_prior + weight_decay) centred at
/// the prior mean; beta = 1 with a zero prior reproduces client_update.
inline ClientUpdateResult personalized_client_update(const data::Dataset& dataset,
                                                     const nn::ModelSpec& spec,
                                                     const GlobalModel& init, const PriorSpec& prior,
                                                     const IvonConfig& config, std::uint64_t seed) {
  detail::check_client_inputs(dataset, spec, init, config);
  require(prior.beta >= 0.0, "personalized_client_update: beta must be nonnegative");
  require_same_size(prior.mean.size(), init.mean.size(), "prior mean");
  require_same_size(prior.hessian.size(), init.mean.size(), "prior hessian");
  IvonState state;
  state.config = config;
  state.anchor = prior.mean;
  state.posterior.mean = init.mean;
  state.posterior.hessian = init.hessian;
  state.posterior.ess = config.ess.value_or(static_cast<double>(dataset.size()));
  state.posterior.weight_decay = config.weight_decay;
  state.posterior.elementwise_decay.resize(init.mean.size());
  for (std::size_t j = 0; j < init.mean.size(); ++j)
    state.posterior.elementwise_decay[j] = prior.beta * (prior.hessian[j] + config.weight_decay);
  return detail::run_ivon(dataset, spec, std::move(state), seed);
}

/// Starts from the prior itself.
inline ClientUpdateResult personalized_client_update(const data::Dataset& dataset,
                                                     const nn::ModelSpec& spec, const PriorSpec& prior,
                                                     const IvonConfig& config, std::uint64_t seed) {
  return personalized_client_update(dataset, spec, GlobalModel{prior.mean, prior.hessian}, prior,
                                    config, seed);
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const VariationalPosterior& p) {
  nlohmann::json j = {{"dtype", "float64"},  {"length", p.size()},
                      {"ess", p.ess},        {"weight_decay", p.weight_decay},
                      {"mean", p.mean},      {"hessian", p.hessian}};
  if (!p.elementwise_decay.empty()) j["elementwise_decay"] = p.elementwise_decay;
  return j;
}

namespace detail {

inline ParamVector read_array(const nlohmann::json& j, const char* key, std::size_t length) {
  if (!j.contains(key) || !j.at(key).is_array())
    throw std::runtime_error(std::string("serialized record: missing array '") + key + "'");
  ParamVector v = j.at(key).get<ParamVector>();
  if (v.size() != length)
    throw std::runtime_error(std::string("serialized record: '") + key + "' has " +
                             std::to_string(v.size()) + " entries, length says " + std::to_string(length));
  return v;
}

inline std::size_t read_length(const nlohmann::json& j) {
  if (j.value("dtype", std::string()) != "float64")
    throw std::runtime_error("serialized record: dtype must be float64");
  return j.at("length").get<std::size_t>();
}

}  // namespace detail

inline VariationalPosterior posterior_from_json(const nlohmann::json& j) {
  const std::size_t n = detail::read_length(j);
  VariationalPosterior p;
  p.mean = detail::read_array(j, "mean", n);
  p.hessian = detail::read_array(j, "hessian", n);
  p.ess = j.at("ess").get<double>();
  p.weight_decay = j.at("weight_decay").get<double>();
  if (j.contains("elementwise_decay")) p.elementwise_decay = detail::read_array(j, "elementwise_decay", n);
  return p;
}

inline nlohmann::json to_json(const GlobalModel& g) {
  return {{"dtype", "float64"}, {"length", g.mean.size()}, {"mean", g.mean}, {"hessian", g.hessian}};
}

inline GlobalModel global_model_from_json(const nlohmann::json& j) {
  const std::size_t n = detail::read_length(j);
  return {detail::read_array(j, "mean", n), detail::read_array(j, "hessian", n)};
}

}  // namespace fedivon
