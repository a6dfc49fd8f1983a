#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>

#include "fedivon/data.hpp"
#include "fedivon/ivon.hpp"
#include "fedivon/nn.hpp"

// Point-estimate client training for the FedAvg baseline.
namespace fedivon {

enum class FirstOrderKind { kSgd, kAdam };

struct FirstOrderConfig {
  FirstOrderKind kind = FirstOrderKind::kSgd;
  double lr_initial = 0.1;
  double lr_final = 0.01;
  double weight_decay = 2e-4;
  double momentum = 0.0;  // SGD only
  double beta1 = 0.9;     // Adam only
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 32;
  int epochs = 2;

  bool operator==(const FirstOrderConfig&) const = default;
};

inline void validate(const FirstOrderConfig& c) {
  require(c.lr_initial > 0.0 && c.lr_final > 0.0 && c.lr_final <= c.lr_initial,
          "first_order: need 0 < lr_final <= lr_initial");
  require(c.weight_decay >= 0.0, "first_order.weight_decay must be nonnegative");
  require(c.momentum >= 0.0 && c.momentum < 1.0, "first_order.momentum must be in [0, 1)");
  require(c.batch_size >= 1 && c.epochs >= 0, "first_order: bad batch_size/epochs");
}

struct FirstOrderResult {
  ParamVector params;
  double mean_loss = 0.0;
};

/// Minibatch SGD (optionally with heavy-ball momentum) or Adam on the mean
/// cross-entropy plus L2 weight decay, with the same linear learning-rate
/// decay and shuffling scheme as the IVON client update.
inline FirstOrderResult first_order_update(const data::Dataset& dataset, const nn::ModelSpec& spec,
                                           ParamVector params, const FirstOrderConfig& cfg,
                                           std::uint64_t seed) {
  validate(cfg);
  if (dataset.size() == 0) throw std::invalid_argument("first_order_update: empty dataset");
  require_same_size(params.size(), nn::param_count(spec), "first_order_update params");
  const std::size_t n = dataset.size();
  const std::size_t p = params.size();
  const std::int64_t per_epoch = static_cast<std::int64_t>((n + cfg.batch_size - 1) / cfg.batch_size);
  const std::int64_t total = per_epoch * cfg.epochs;

  IvonConfig sched;
  sched.lr_initial = cfg.lr_initial;
  sched.lr_final = cfg.lr_final;

  ParamVector m1(p, 0.0), m2(p, 0.0);
  Rng rng(seed);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  double loss_sum = 0.0;
  std::int64_t t = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t b = 0; b < per_epoch; ++b, ++t) {
      const std::size_t begin = static_cast<std::size_t>(b) * cfg.batch_size;
      const std::size_t end = std::min(n, begin + cfg.batch_size);
      const nn::Batch batch =
          data::make_batch(dataset, std::span<const std::size_t>(order.data() + begin, end - begin));
      const nn::LossAndGrad lg = nn::loss_and_grad(spec, params, batch);
      loss_sum += lg.loss;
      const double lr = scheduled_lr(sched, t, total);
      for (std::size_t j = 0; j < p; ++j) {
        const double g = lg.grad[j] + cfg.weight_decay * params[j];
        if (cfg.kind == FirstOrderKind::kSgd) {
          m1[j] = cfg.momentum * m1[j] + g;
          params[j] -= lr * m1[j];
        } else {
          m1[j] = cfg.beta1 * m1[j] + (1.0 - cfg.beta1) * g;
          m2[j] = cfg.beta2 * m2[j] + (1.0 - cfg.beta2) * g * g;
          const double mh = m1[j] / (1.0 - std::pow(cfg.beta1, static_cast<double>(t + 1)));
          const double vh = m2[j] / (1.0 - std::pow(cfg.beta2, static_cast<double>(t + 1)));
          params[j] -= lr * mh / (std::sqrt(vh) + cfg.eps);
        }
      }
      if (const auto bad = first_non_finite(params); bad != p)
        throw NumericError("first_order_update: non-finite parameter", bad);
    }
  }
  return {std::move(params), total > 0 ? loss_sum / static_cast<double>(total) : 0.0};
}

inline std::string to_string(FirstOrderKind k) { return k == FirstOrderKind::kSgd ? "sgd" : "adam"; }

inline FirstOrderKind first_order_kind_from_string(const std::string& s) {
  if (s == "sgd") return FirstOrderKind::kSgd;
  if (s == "adam") return FirstOrderKind::kAdam;
  throw std::invalid_argument("unknown first-order optimizer '" + s + "'");
}

}  // namespace fedivon
