// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails. Run from anywhere; scratch files go to the temp directory.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>

#include <unistd.h>

#include "fedivon/experiment.hpp"
#include "oracles.hpp"
#include "quadratic.hpp"

namespace {

using namespace fedivon;
namespace fs = std::filesystem;

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. IVON on quadratics with a closed-form Gaussian posterior

void conjugate_oracle(Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> curv(0.5, 4.0), centre(-2.0, 2.0);
  const double delta = 1e-3;
  double worst_m = 0.0, worst_h = 0.0;
  int max_steps = 0;
  for (int instance = 0; instance < 3; ++instance) {
    testing::Quadratic q;
    for (int j = 0; j < 4; ++j) {
      q.a.push_back(curv(rng));
      q.b.push_back(centre(rng));
    }
    IvonState s;
    s.config.beta2 = 0.999;
    s.config.weight_decay = delta;
    s.posterior = {ParamVector(4, 0.0), ParamVector(4, 1.0), 10000.0, delta, {}};
    const testing::QuadraticRun run;
    max_steps = std::max(max_steps, run.steps);
    s = testing::run_ivon_on_quadratic(q, s, run, 100 + instance);
    for (std::size_t j = 0; j < 4; ++j) {
      worst_m = std::max(worst_m, std::abs(s.posterior.mean[j] - q.optimum(j, delta)));
      worst_h = std::max(worst_h, std::abs(s.posterior.hessian[j] - q.a[j]) / q.a[j]);
    }
  }
  const double secs = seconds_since(t0);
  v.detail << "max |m - m*| = " << worst_m << ", max |h - a|/a = " << worst_h << ", " << max_steps
           << " steps per instance, " << secs << " s";
  v.require(worst_m <= 1e-3, "mean within 1e-3");
  v.require(worst_h <= 0.05, "hessian within 5%");
  v.require(max_steps <= 10000, "at most 10k steps");
  v.require(secs < 10.0, "runtime under 10 s");
}

// ---------------------------------------------------------------------------
// 2. ivon_step against a scalar line-by-line transcription

void scalar_transcription(Verdict& v) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  int step_mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    const double m = 3 * n(rng), h = 5 * u(rng), g = n(rng);
    const long e = static_cast<long>(u(rng) * 50);
    const double beta1 = 0.5 + 0.499 * u(rng), beta2 = 0.9 + 0.09999 * u(rng);
    const double delta = 1e-3 + u(rng), lr = 1e-3 + 0.5 * u(rng);
    const double g_hat = 2 * n(rng), h_hat = 4 * n(rng);

    IvonState s;
    s.posterior = {ParamVector{m}, ParamVector{h}, 100.0, delta, {}};
    s.momentum = ParamVector{g};
    s.step = e;
    s.config.beta1 = beta1;
    s.config.beta2 = beta2;
    s.config.weight_decay = delta;
    const IvonState out = ivon_step(s, ParamVector{g_hat}, ParamVector{h_hat}, lr);
    const oracle::ScalarIvon ref = oracle::scalar_ivon_step({m, h, g, e}, g_hat, h_hat, lr, beta1, beta2, delta);
    worst = std::max({worst, std::abs(out.posterior.mean[0] - ref.m), std::abs(out.posterior.hessian[0] - ref.h),
                      std::abs(out.momentum[0] - ref.g)});
    step_mismatches += out.step != ref.e;
  }
  v.detail << "1000 random scalar states, max abs difference " << worst << ", step counter mismatches "
           << step_mismatches;
  v.require(worst <= 1e-12, "agreement to 1e-12");
  v.require(step_mismatches == 0, "step counter");
}

// ---------------------------------------------------------------------------
// 3. Aggregation against the textbook product of Gaussians

std::vector<ClientContribution> random_contributions(std::mt19937_64& rng, std::size_t k, std::size_t p) {
  std::normal_distribution<double> n(0.0, 2.0);
  std::uniform_real_distribution<double> h(0.01, 10.0);
  std::uniform_int_distribution<int> count(1, 500);
  std::vector<ClientContribution> out(k);
  for (auto& c : out) {
    for (std::size_t j = 0; j < p; ++j) {
      c.mean.push_back(n(rng));
      c.hessian.push_back(h(rng));
    }
    c.n_examples = count(rng);
  }
  return out;
}

void aggregation_oracle(Verdict& v) {
  std::mt19937_64 rng(11);
  double oracle_err = 0.0, perm_err = 0.0, scale_err = 0.0;
  int hull_violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto c = random_contributions(rng, 1 + trial % 10, 6);
    std::vector<std::vector<double>> means, precs;
    std::vector<double> counts;
    for (const auto& x : c) {
      means.push_back(x.mean);
      precs.push_back(x.hessian);
      counts.push_back(static_cast<double>(x.n_examples));
    }
    std::vector<double> mu, lambda;
    oracle::gaussian_product(means, precs, counts, mu, lambda);
    const GlobalModel g = aggregate(c);
    for (std::size_t j = 0; j < 6; ++j) {
      oracle_err = std::max({oracle_err, std::abs(g.mean[j] - mu[j]), std::abs(g.hessian[j] - lambda[j])});
      double lo = 1e300, hi = -1e300, hlo = 1e300, hhi = -1e300;
      for (const auto& x : c) {
        lo = std::min(lo, x.mean[j]);
        hi = std::max(hi, x.mean[j]);
        hlo = std::min(hlo, x.hessian[j]);
        hhi = std::max(hhi, x.hessian[j]);
      }
      hull_violations += g.mean[j] < lo || g.mean[j] > hi || g.hessian[j] < hlo || g.hessian[j] > hhi;
    }
    auto shuffled = c;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const GlobalModel gp = aggregate(shuffled);
    auto rescaled = c;
    for (auto& x : rescaled) x.n_examples *= 3;
    const GlobalModel gs = aggregate(rescaled);
    for (std::size_t j = 0; j < 6; ++j) {
      perm_err = std::max({perm_err, std::abs(gp.mean[j] - g.mean[j]), std::abs(gp.hessian[j] - g.hessian[j])});
      scale_err = std::max({scale_err, std::abs(gs.mean[j] - g.mean[j]), std::abs(gs.hessian[j] - g.hessian[j])});
    }
  }

  // Grid search of sum_k w_k log q_k(m) on scalar instances.
  const double step = 1e-3;
  double grid_err = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto c = random_contributions(rng, 2 + trial % 5, 1);
    double total = 0.0, lo = 1e300, hi = -1e300;
    for (const auto& x : c) {
      total += static_cast<double>(x.n_examples);
      lo = std::min(lo, x.mean[0]);
      hi = std::max(hi, x.mean[0]);
    }
    auto objective = [&](double m) {
      double s = 0.0;
      for (const auto& x : c) {
        const double log_q = 0.5 * std::log(x.hessian[0] / (2 * M_PI)) - 0.5 * x.hessian[0] * (m - x.mean[0]) * (m - x.mean[0]);
        s += x.n_examples / total * log_q;
      }
      return s;
    };
    double best_m = lo - 1.0, best = objective(best_m);
    for (double m = lo - 1.0; m <= hi + 1.0; m += step)
      if (const double f = objective(m); f > best) {
        best = f;
        best_m = m;
      }
    grid_err = std::max(grid_err, std::abs(best_m - aggregate(c).mean[0]));
  }

  v.detail << "oracle max err " << oracle_err << " (1000 cases), permutation " << perm_err << ", count rescaling "
           << scale_err << ", hull violations " << hull_violations << ", grid argmax offset " << grid_err
           << " (step " << step << ")";
  v.require(oracle_err <= 1e-10, "oracle to 1e-10");
  v.require(perm_err <= 1e-12, "permutation invariance");
  v.require(scale_err <= 1e-12, "count rescaling invariance");
  v.require(hull_violations == 0, "convex hull");
  v.require(grid_err <= step, "grid search within resolution");
}

// ---------------------------------------------------------------------------
// 4. One client, full participation: the protocol is local IVON restarted
//    every E epochs

void protocol_collapse(Verdict& v) {
  const data::Dataset ds = data::synth_blobs(4, 40, 3, 4.0, 21);
  FederationConfig c;
  c.n_clients = 1;
  c.rounds = 4;
  c.participation_fraction = 1.0;
  c.model = {{3, 8, 4}};
  c.ivon.batch_size = 16;
  c.ivon.epochs = 2;
  c.ivon.train_mc_samples = 2;
  c.seed = 99;
  c.eval_every = c.rounds;
  const std::vector<ClientHandle> clients{{0, ds, std::nullopt}};
  const EvalData eval{ds, std::nullopt};
  const FederationResult fed = run_federation(c, clients, eval);

  // Route 1: chained client updates with the per-round seeds.
  GlobalModel chained = initial_global_model(c);
  for (std::uint64_t r = 1; r <= static_cast<std::uint64_t>(c.rounds); ++r) {
    const auto res = client_update(ds, c.model, chained, c.ivon, derive_seed(c.seed, "client_update", {r, 0}));
    chained = {res.posterior.mean, res.posterior.hessian};
  }

  // Route 2: a hand-written R * E epoch loop over the IVON primitives that
  // resets momentum, step count and learning-rate schedule every E epochs.
  GlobalModel manual = initial_global_model(c);
  const std::size_t n = ds.size();
  const std::int64_t per_epoch = static_cast<std::int64_t>((n + c.ivon.batch_size - 1) / c.ivon.batch_size);
  const std::int64_t block_steps = per_epoch * c.ivon.epochs;
  Rng rng(0);
  IvonState s;
  std::vector<std::size_t> order;
  std::int64_t t = 0;
  for (int epoch = 0; epoch < c.rounds * c.ivon.epochs; ++epoch) {
    if (epoch % c.ivon.epochs == 0) {
      const std::uint64_t round = static_cast<std::uint64_t>(epoch / c.ivon.epochs + 1);
      rng.seed(derive_seed(c.seed, "client_update", {round, 0}));
      s = IvonState{};
      s.config = c.ivon;
      s.posterior = {manual.mean, manual.hessian, c.ivon.ess.value_or(static_cast<double>(n)), c.ivon.weight_decay, {}};
      order.resize(n);
      for (std::size_t i = 0; i < n; ++i) order[i] = i;
      t = 0;
    }
    std::shuffle(order.begin(), order.end(), rng);
    for (std::int64_t b = 0; b < per_epoch; ++b, ++t) {
      const std::size_t begin = static_cast<std::size_t>(b) * c.ivon.batch_size;
      const std::size_t end = std::min(n, begin + c.ivon.batch_size);
      const nn::Batch batch = data::make_batch(ds, std::span<const std::size_t>(order.data() + begin, end - begin));
      const std::size_t p = s.posterior.size();
      ParamVector g(p, 0.0), h(p, 0.0);
      for (int k = 0; k < c.ivon.train_mc_samples; ++k) {
        const ParamVector theta = sample_theta(s.posterior, rng);
        const nn::LossAndGrad lg = nn::loss_and_grad(c.model, theta, batch);
        const ParamVector hk = hessian_estimate(lg.grad, theta, s.posterior);
        for (std::size_t j = 0; j < p; ++j) {
          g[j] += lg.grad[j] / c.ivon.train_mc_samples;
          h[j] += hk[j] / c.ivon.train_mc_samples;
        }
      }
      clip_to_norm(g, c.ivon.clip_grad_norm);
      apply_ivon_step(s, g, h, scheduled_lr(c.ivon, t, block_steps));
    }
    if ((epoch + 1) % c.ivon.epochs == 0) manual = {s.posterior.mean, s.posterior.hessian};
  }

  const bool chained_equal = fed.state.global.mean == chained.mean && fed.state.global.hessian == chained.hessian;
  const bool manual_equal = fed.state.global.mean == manual.mean && fed.state.global.hessian == manual.hessian;
  v.detail << c.rounds << " rounds x " << c.ivon.epochs << " epochs, " << fed.state.global.mean.size()
           << " parameters: chained client updates " << (chained_equal ? "bit-identical" : "differ")
           << ", hand-written epoch loop " << (manual_equal ? "bit-identical" : "differ");
  v.require(chained_equal, "chained client updates");
  v.require(manual_equal, "hand-written loop");
}

// ---------------------------------------------------------------------------
// 5. Backprop against central finite differences

void gradient_check(Verdict& v) {
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<int> width(1, 6), depth(0, 3), classes(2, 5), batch_size(1, 5);
  std::normal_distribution<double> normal(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    nn::ModelSpec spec;
    spec.layer_sizes.push_back(width(rng));
    for (int l = depth(rng); l > 0; --l) spec.layer_sizes.push_back(width(rng));
    spec.layer_sizes.push_back(classes(rng));
    spec.activation = trial % 2 ? nn::Activation::kTanh : nn::Activation::kRelu;
    const int b = batch_size(rng);
    nn::Batch batch{Matrix(b, spec.layer_sizes.front()), std::vector<int>(b)};
    for (double& x : batch.inputs.data) x = normal(rng);
    for (int& y : batch.labels) y = std::uniform_int_distribution<int>(0, spec.layer_sizes.back() - 1)(rng);
    ParamVector params = nn::init_params(spec, trial);
    for (double& w : params) w += 0.1 * normal(rng);  // nonzero biases too
    const auto fd = oracle::finite_difference_grad(
        [&](const std::vector<double>& p) { return oracle::naive_mean_cross_entropy(spec, p, batch); }, params);
    const nn::LossAndGrad lg = nn::loss_and_grad(spec, params, batch);
    for (std::size_t j = 0; j < params.size(); ++j) worst = std::max(worst, std::abs(lg.grad[j] - fd[j]));
  }
  v.detail << "100 random (spec, batch) cases, max abs error " << worst;
  v.require(worst <= 1e-6, "max abs error <= 1e-6");
}

// ---------------------------------------------------------------------------
// 6. Shard-skewed federation: FedIvon accuracy vs FedAvg, MC vs @mean ECE

struct BlobFederation {
  std::vector<ClientHandle> clients;
  EvalData eval;
};

BlobFederation shard_blob_federation(std::uint64_t seed, int n_classes, int dim, double separation, int per_class) {
  const Matrix means = data::blob_means(n_classes, dim, separation, derive_seed(seed, "means"));
  const data::Dataset train = data::sample_clusters(means, per_class, 1.0, derive_seed(seed, "train"));
  BlobFederation out;
  out.eval.test = data::sample_clusters(means, 50, 1.0, derive_seed(seed, "test"));
  out.clients = make_clients(train, data::shard_partition(train, 20, 2, derive_seed(seed, "partition")));
  return out;
}

FederationConfig desk_config(std::uint64_t seed, int dim, int n_classes, nn::Activation act, int rounds) {
  FederationConfig c;
  c.n_clients = 20;
  c.rounds = rounds;
  c.participation_fraction = 0.25;
  c.model = {{dim, 32, n_classes}, act};
  c.ivon.ess.reset();  // local |D|
  c.ivon.batch_size = 8;
  c.ivon.epochs = 2;
  c.first_order.batch_size = 8;
  c.first_order.epochs = 2;
  c.eval_every = rounds;
  c.mc_test_samples = 64;
  c.seed = seed;
  c.parallel = 4;
  return c;
}

void table_ordering(Verdict& v) {
  const auto t0 = std::chrono::steady_clock::now();
  double acc_ivon = 0.0, acc_avg = 0.0, ece_mc = 0.0, ece_mean = 0.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const BlobFederation task = shard_blob_federation(seed, 10, 8, 2.5, 60);
    FederationConfig c = desk_config(seed, 8, 10, nn::Activation::kRelu, 150);
    const auto ivon = run_federation(c, task.clients, task.eval).history.rounds.back().evals;
    c.algorithm = Algorithm::kFedAvg;
    const auto avg = run_federation(c, task.clients, task.eval).history.rounds.back().evals;
    for (const auto& r : ivon) {
      if (r.mc_samples == 0) {
        acc_ivon += r.acc / 3;
        ece_mean += r.ece / 3;
      } else {
        ece_mc += r.ece / 3;
      }
    }
    acc_avg += avg.front().acc / 3;
  }
  const double secs = seconds_since(t0);
  v.detail << "mean over 3 seeds: FedIvon acc " << acc_ivon << " vs FedAvg " << acc_avg << "; ECE MC(S=64) " << ece_mc
           << " vs @mean " << ece_mean << "; " << secs << " s";
  v.require(acc_ivon >= acc_avg - 0.02, "FedIvon >= FedAvg - 2 points");
  v.require(ece_mc <= ece_mean, "MC ECE <= @mean ECE");
  v.require(secs <= 60.0, "runtime <= 60 s");
}

// ---------------------------------------------------------------------------
// 7. OOD detection by predictive entropy

void ood_detection(Verdict& v) {
  std::ostringstream per_seed;
  bool all = true;
  for (std::uint64_t seed : {1, 2, 3}) {
    const Matrix means = data::blob_means(10, 8, 6.0, derive_seed(seed, "means"));
    const data::Dataset train = data::sample_clusters(means, 60, 1.0, derive_seed(seed, "train"));
    EvalData eval{data::sample_clusters(means, 50, 1.0, derive_seed(seed, "test")),
                  data::ood_clusters(means, 10, 30, 15.0, derive_seed(seed, "ood"))};
    const auto clients = make_clients(train, data::shard_partition(train, 20, 2, derive_seed(seed, "partition")));
    const FederationConfig c = desk_config(seed, 8, 10, nn::Activation::kTanh, 100);
    const auto evals = run_federation(c, clients, eval).history.rounds.back().evals;
    for (const auto& r : evals)
      if (r.mc_samples == c.mc_test_samples) {
        per_seed << (per_seed.tellp() ? ", " : "") << *r.auroc;
        all = all && *r.auroc >= 0.9;
      }
  }

  std::mt19937_64 rng(3);
  std::uniform_int_distribution<int> size(1, 20), level(0, 8);
  int mismatches = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<double> a(size(rng)), b(size(rng));
    for (double& x : a) x = level(rng) * 0.25;
    for (double& x : b) x = level(rng) * 0.25 - 0.5;
    mismatches += metrics::auroc(a, b) != oracle::auroc_pairs(a, b);
  }
  v.detail << "FedIvon MC entropy AUROC per seed: " << per_seed.str() << "; pair-enumeration oracle mismatches "
           << mismatches << "/2000";
  v.require(all, "AUROC >= 0.9 for every seed");
  v.require(mismatches == 0, "exact agreement with pair enumeration");
}

// ---------------------------------------------------------------------------
// 8. Personalization: beta = 0 is local training; PM beats GM under class skew

void personalization(Verdict& v) {
  // Reduction.
  const data::Dataset pool = data::synth_blobs(4, 60, 3, 4.0, 31);
  FederationConfig c;
  c.n_clients = 6;
  c.rounds = 4;
  c.participation_fraction = 0.5;
  c.model = {{3, 8, 4}};
  c.ivon.batch_size = 16;
  c.ivon.epochs = 1;
  c.seed = 8;
  const auto clients = make_clients(pool, data::class_skew_partition(pool, 6, 2, 4));
  const EvalData eval{pool, std::nullopt};
  c.beta = 0.0;
  const FederationResult p = run_personalized(c, clients, eval);
  c.beta.reset();
  c.algorithm = Algorithm::kLocalOnly;
  const FederationResult l = run_federation(c, clients, eval);
  bool identical = p.state.personal.size() == l.state.personal.size();
  int trained = 0;
  for (std::size_t k = 0; identical && k < p.state.personal.size(); ++k) {
    identical = p.state.personal[k].has_value() == l.state.personal[k].has_value();
    if (identical && p.state.personal[k]) {
      ++trained;
      identical = p.state.personal[k]->mean == l.state.personal[k]->mean &&
                  p.state.personal[k]->hessian == l.state.personal[k]->hessian;
    }
  }

  // Ordering.
  std::ostringstream per_seed;
  bool ordered = true;
  for (std::uint64_t seed : {1, 2, 3}) {
    const Matrix means = data::blob_means(10, 8, 3.0, derive_seed(seed, "means"));
    const data::Dataset train = data::sample_clusters(means, 60, 1.0, derive_seed(seed, "train"));
    const EvalData test{data::sample_clusters(means, 50, 1.0, derive_seed(seed, "test")), std::nullopt};
    const data::PartitionPlan plan = data::class_skew_partition(train, 20, 3, derive_seed(seed, "partition"));
    auto skewed = make_clients(train, plan);
    const auto labels = data::client_label_sets(train, plan);
    for (std::size_t k = 0; k < skewed.size(); ++k) skewed[k].matched_test = data::filter_labels(test.test, labels[k]);
    FederationConfig pc;
    pc.n_clients = 20;
    pc.rounds = 60;
    pc.participation_fraction = 0.25;
    pc.model = {{8, 32, 10}};
    pc.beta = 1.0;
    pc.ivon.ess = 10000.0;
    pc.ivon.lr_final = 1e-3;
    pc.ivon.weight_decay = 1e-3;
    pc.ivon.batch_size = 8;
    pc.eval_every = pc.rounds;
    pc.mc_test_samples = 64;
    pc.seed = seed;
    pc.parallel = 4;
    double pm = -1.0, gm = -1.0;
    for (const auto& r : run_personalized(pc, skewed, test).history.rounds.back().evals) {
      if (r.mc_samples != pc.mc_test_samples) continue;
      (r.split == "pm_test" ? pm : gm) = r.acc;
    }
    per_seed << (per_seed.tellp() ? ", " : "") << "PM " << pm << " / GM " << gm;
    ordered = ordered && pm >= gm;
  }
  v.detail << "beta=0 vs local-only over " << trained << " trained clients: " << (identical ? "bit-identical" : "differ")
           << "; MC accuracy per seed: " << per_seed.str();
  v.require(identical && trained > 0, "beta = 0 reproduces local-only training");
  v.require(ordered, "PM >= GM for every seed");
}

// ---------------------------------------------------------------------------
// 9. Metric oracles

void metric_oracles(Verdict& v) {
  double worst = 0.0;
  for (int c : {2, 3, 10, 100}) {
    metrics::PredictiveBatch p{Matrix(7, c, 1.0 / c), std::vector<int>(7)};
    for (int i = 0; i < 7; ++i) p.labels[i] = i % c;
    worst = std::max({worst, std::abs(metrics::nll(p) - std::log(static_cast<double>(c))),
                      std::abs(metrics::brier(p) - (c - 1.0) / c)});
  }
  metrics::PredictiveBatch fixture{Matrix(4, 2), {0, 1, 0, 0}};
  const double rows[4][2] = {{0.6, 0.4}, {0.6, 0.4}, {0.9, 0.1}, {0.9, 0.1}};
  for (int i = 0; i < 4; ++i)
    for (int k = 0; k < 2; ++k) fixture.probs(i, k) = rows[i][k];
  const double ece_err = std::abs(metrics::ece(fixture) - 0.1);

  std::mt19937_64 rng(9);
  std::gamma_distribution<double> g(0.5, 1.0);
  double recompose = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 20 + trial, c = 2 + trial % 8;
    metrics::PredictiveBatch p{Matrix(n, c), std::vector<int>(n)};
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (double& x : p.probs.row(i)) s += (x = g(rng) + 1e-9);
      for (double& x : p.probs.row(i)) x /= s;
      p.labels[i] = static_cast<int>(rng() % c);
    }
    for (int bins : {1, 5, 10, 20}) {
      double weighted = 0.0;
      for (const auto& b : metrics::reliability_bins(p, bins))
        weighted += static_cast<double>(b.count) / n * std::abs(b.accuracy - b.mean_confidence);
      recompose = std::max(recompose, std::abs(weighted - metrics::ece(p, bins)));
    }
  }
  v.detail << "uniform NLL/Brier max err " << worst << ", ECE fixture err " << ece_err << ", bin recomposition err "
           << recompose;
  v.require(worst <= 1e-9, "uniform NLL = ln C and Brier = (C-1)/C");
  v.require(ece_err <= 1e-9, "ECE fixture = 0.1");
  v.require(recompose <= 1e-12, "bins recompose ECE");
}

// ---------------------------------------------------------------------------
// 10. Byte-identical metric streams

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void determinism(Verdict& v) {
  using experiment::json;
  const std::vector<json> configs{
      json::parse(R"({"name": "standard", "seed": 1, "algorithms": ["fedivon", "fedavg"],
        "dataset": {"kind": "blobs", "n_classes": 5, "n_per_class": 40, "dim": 4},
        "federation": {"n_clients": 8, "rounds": 4, "participation_fraction": 0.5, "eval_every": 2},
        "model": {"hidden": [16]}, "ivon": {"batch_size": 8}, "metrics": {"mc_test_samples": 16}})"),
      json::parse(R"({"name": "personalized", "seed": 2, "mode": "personalized",
        "algorithms": ["fedivon", "local_only"],
        "dataset": {"kind": "blobs", "n_classes": 6, "n_per_class": 40, "dim": 4},
        "partition": {"scheme": "class_skew", "classes_per_client": 2},
        "federation": {"n_clients": 8, "rounds": 3, "participation_fraction": 0.5, "beta": 1.0},
        "model": {"hidden": [16]}, "ivon": {"batch_size": 8}, "metrics": {"mc_test_samples": 16}})"),
      json::parse(R"({"name": "ood", "seed": 3, "mode": "ood",
        "dataset": {"kind": "superclass", "n_super": 3, "n_sub": 2, "n_per_sub": 30, "dim": 4},
        "partition": {"scheme": "concept_drift"},
        "federation": {"n_clients": 6, "rounds": 3, "participation_fraction": 0.5},
        "model": {"hidden": [16], "activation": "tanh"}, "metrics": {"mc_test_samples": 16},
        "ood": {"n_clusters": 2, "n_per_cluster": 20}})"),
      json::parse(R"({"name": "ablation", "seed": 4, "mode": "ablation", "algorithms": ["fedivon", "fedavg"],
        "dataset": {"kind": "blobs", "n_classes": 4, "n_per_class": 30, "dim": 3},
        "federation": {"n_clients": 6, "rounds": 2, "participation_fraction": 1.0},
        "model": {"hidden": [8]}, "metrics": {"mc_test_samples": 8}, "ablation": {"epochs": [1, 2]}})"),
  };
  const fs::path root = fs::temp_directory_path() / ("fedivon_acceptance_" + std::to_string(::getpid()));
  int identical = 0;
  std::size_t lines = 0;
  for (const auto& j : configs) {
    const experiment::ExperimentConfig c = experiment::parse_config_json(j);
    std::vector<std::string> streams;
    for (const auto& [label, threads] : {std::pair{"a", 1}, {"b", 1}, {"c", 4}}) {
      experiment::RunOptions o;
      o.output_dir = (root / label).string();
      o.parallel = threads;
      experiment::run_experiment(c, o);
      streams.push_back(read_text(root / label / c.name / "metrics.jsonl"));
    }
    const bool same = !streams[0].empty() && streams[0] == streams[1] && streams[0] == streams[2];
    identical += same;
    lines += static_cast<std::size_t>(std::count(streams[0].begin(), streams[0].end(), '\n'));
    v.require(same, c.name + " metrics.jsonl identical");
  }
  fs::remove_all(root);
  v.detail << identical << "/" << configs.size()
           << " configs (standard, personalized, ood, ablation) byte-identical across two serial runs and --parallel 4, "
           << lines << " metric records per pass";
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Verdict&)>>> criteria{
      {"conjugate-posterior oracle", conjugate_oracle},
      {"scalar update transcription", scalar_transcription},
      {"aggregation oracle and invariants", aggregation_oracle},
      {"protocol collapse (K=1)", protocol_collapse},
      {"gradient correctness", gradient_check},
      {"accuracy and calibration ordering", table_ordering},
      {"OOD detection", ood_detection},
      {"personalization reductions and ordering", personalization},
      {"metric oracles", metric_oracles},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      criteria[i].second(v);
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << " [exception: " << e.what() << "]";
    }
    failures += !v.pass;
    std::printf("%s %2zu %s: %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), v.detail.str().c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
