#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fedivon/aggregation.hpp"
#include "fedivon/data.hpp"
#include "fedivon/first_order.hpp"
#include "fedivon/ivon.hpp"
#include "fedivon/metrics.hpp"
#include "fedivon/nn.hpp"
#include "fedivon/random.hpp"

namespace fedivon {

enum class Algorithm { kFedIvon, kFedAvg, kLocalOnly };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::kFedIvon: return "fedivon";
    case Algorithm::kFedAvg: return "fedavg";
    case Algorithm::kLocalOnly: return "local_only";
  }
  return "?";
}

inline Algorithm algorithm_from_string(const std::string& s) {
  if (s == "fedivon") return Algorithm::kFedIvon;
  if (s == "fedavg") return Algorithm::kFedAvg;
  if (s == "local_only") return Algorithm::kLocalOnly;
  throw std::invalid_argument("unknown algorithm '" + s + "'");
}

struct FederationConfig {
  int n_clients = 1;
  int rounds = 1;
  double participation_fraction = 1.0;
  Algorithm algorithm = Algorithm::kFedIvon;
  std::optional<double> beta;  // set: personalized FedIvon
  IvonConfig ivon;
  FirstOrderConfig first_order;
  nn::ModelSpec model;
  int eval_every = 1;
  std::uint64_t seed = 0;
  int mc_test_samples = 64;
  int ece_bins = metrics::kDefaultEceBins;
  int parallel = 1;
  // When false every client in a round shares one random stream; only useful
  // for symmetry checks.
  bool client_streams_by_id = true;
};

inline int sampled_count(int n_clients, double fraction) {
  return std::clamp(static_cast<int>(std::lround(fraction * n_clients)), 1, n_clients);
}

inline void validate(const FederationConfig& c) {
  require(c.n_clients >= 1, "federation.n_clients must be >= 1");
  require(c.rounds >= 0, "federation.rounds must be >= 0");
  require(c.participation_fraction > 0.0 && c.participation_fraction <= 1.0,
          "federation.participation_fraction must be in (0, 1]");
  require(!c.beta || *c.beta >= 0.0, "federation.beta must be >= 0");
  require(!c.beta || c.algorithm == Algorithm::kFedIvon, "federation.beta requires algorithm fedivon");
  require(c.eval_every >= 1, "federation.eval_every must be >= 1");
  require(c.mc_test_samples >= 0, "metrics.mc_test_samples must be >= 0");
  require(c.ece_bins >= 1, "metrics.ece_bins must be >= 1");
  require(c.parallel >= 1, "parallel must be >= 1");
  validate(c.ivon);
  validate(c.first_order);
  nn::validate(c.model);
}

/// A simulated client: private training data plus, for personalized
/// evaluation, a test set matching its label distribution.
struct ClientHandle {
  int id = 0;
  data::Dataset train;
  std::optional<data::Dataset> matched_test;
};

/// One client per plan entry, ids 0..K-1.
inline std::vector<ClientHandle> make_clients(const data::Dataset& ds, const data::PartitionPlan& plan) {
  std::vector<ClientHandle> out;
  out.reserve(plan.n_clients());
  for (std::size_t k = 0; k < plan.n_clients(); ++k)
    out.push_back({static_cast<int>(k), data::subset(ds, plan.clients[k]), std::nullopt});
  return out;
}

struct EvalData {
  data::Dataset test;
  std::optional<data::Dataset> ood;  // scored as the positive class for AUROC
};

struct RoundRecord {
  std::int64_t round = 0;
  std::vector<int> sampled;
  std::vector<double> client_losses;  // aligned with `sampled`
  std::vector<metrics::MetricsRecord> evals;

  bool operator==(const RoundRecord&) const = default;
};

struct RoundHistory {
  std::vector<RoundRecord> rounds;

  std::size_t evaluation_count() const {
    return std::count_if(rounds.begin(), rounds.end(), [](const auto& r) { return !r.evals.empty(); });
  }
  bool operator==(const RoundHistory&) const = default;
};

/// Server-side state between rounds. `personal` holds the per-client
/// posteriors for personalized and local-only training (indexed like the
/// client list); the orchestrator is its only writer.
struct FederationState {
  GlobalModel global;
  std::int64_t round = 0;
  std::vector<std::optional<VariationalPosterior>> personal;
};

/// Error from a client update, tagged with the client id.
class ClientError : public std::runtime_error {
 public:
  ClientError(int client_id, const std::string& what)
      : std::runtime_error("client " + std::to_string(client_id) + ": " + what), client_id_(client_id) {}
  int client_id() const noexcept { return client_id_; }

 private:
  int client_id_;
};

/// Uniform sample without replacement of max(1, round(fraction * K)) client
/// ids, returned sorted.
inline std::vector<int> sample_clients(int n_clients, double fraction, std::int64_t round,
                                       std::uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, "sample_clients: fraction must be in (0, 1]");
  const int k = sampled_count(n_clients, fraction);
  std::vector<int> ids(n_clients);
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng = make_rng(seed, "sample_clients", {static_cast<std::uint64_t>(round)});
  for (int i = 0; i < k; ++i) {
    std::uniform_int_distribution<int> pick(i, n_clients - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline GlobalModel initial_global_model(const FederationConfig& c) {
  const ParamVector m = nn::init_params(c.model, derive_seed(c.seed, "initial_model"));
  return {m, ParamVector(m.size(), c.ivon.h_init)};
}

inline FederationState initial_state(const FederationConfig& c, std::size_t n_clients) {
  FederationState s;
  s.global = initial_global_model(c);
  if (c.beta || c.algorithm == Algorithm::kLocalOnly) s.personal.resize(n_clients);
  return s;
}

/// Runs fn(i) for i in [0, n) on up to `threads` threads. Exceptions are
/// collected per index and the lowest-index one is rethrown.
inline void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    const std::size_t workers = std::min<std::size_t>(threads, n);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) guarded(i);
      });
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace detail {

inline std::uint64_t client_seed(const FederationConfig& c, std::int64_t round, int client_id) {
  const auto r = static_cast<std::uint64_t>(round);
  return c.client_streams_by_id ? derive_seed(c.seed, "client_update", {r, static_cast<std::uint64_t>(client_id)})
                                : derive_seed(c.seed, "client_update", {r});
}

// Posterior view of the global model used for evaluation. Without a fixed
// ESS the global posterior counts every training example of the federation.
inline VariationalPosterior global_posterior(const FederationConfig& c, const GlobalModel& g,
                                             std::size_t total_examples) {
  VariationalPosterior p;
  p.mean = g.mean;
  p.hessian = g.hessian;
  p.ess = c.ivon.ess.value_or(static_cast<double>(total_examples));
  p.weight_decay = c.ivon.weight_decay;
  return p;
}

inline metrics::MetricsRecord score(const FederationConfig& c, const VariationalPosterior& post,
                                    const data::Dataset& test, const std::optional<data::Dataset>& ood,
                                    int samples, Rng& rng) {
  const Matrix probs = metrics::mc_predict(post, c.model, test.inputs, samples, rng);
  metrics::MetricsRecord r = metrics::evaluate({probs, test.labels}, c.ece_bins);
  if (ood) {
    const Matrix ood_probs = metrics::mc_predict(post, c.model, ood->inputs, samples, rng);
    r.auroc = metrics::auroc(metrics::predictive_entropy(ood_probs), metrics::predictive_entropy(probs));
  }
  r.mc_samples = samples;
  return r;
}

inline std::vector<int> eval_variants(const FederationConfig& c) {
  if (c.algorithm == Algorithm::kFedAvg || c.mc_test_samples == 0) return {0};
  return {0, c.mc_test_samples};
}

// Mean of per-client metrics over clients that hold a personalized model.
inline std::vector<metrics::MetricsRecord> evaluate_personal(const FederationConfig& c,
                                                             const FederationState& s,
                                                             std::span<const ClientHandle> clients,
                                                             const EvalData& eval) {
  std::vector<metrics::MetricsRecord> out;
  for (int samples : eval_variants(c)) {
    metrics::MetricsRecord sum;
    std::size_t n_models = 0;
    for (std::size_t k = 0; k < clients.size(); ++k) {
      if (!s.personal[k]) continue;
      const data::Dataset& test = clients[k].matched_test ? *clients[k].matched_test : eval.test;
      if (test.size() == 0) continue;
      Rng rng = make_rng(c.seed, "evaluate_personal",
                         {static_cast<std::uint64_t>(s.round), static_cast<std::uint64_t>(clients[k].id),
                          static_cast<std::uint64_t>(samples)});
      const metrics::MetricsRecord r = score(c, *s.personal[k], test, std::nullopt, samples, rng);
      sum.acc += r.acc;
      sum.nll += r.nll;
      sum.ece += r.ece;
      sum.brier += r.brier;
      sum.n += r.n;
      ++n_models;
    }
    if (n_models == 0) continue;
    const double inv = 1.0 / static_cast<double>(n_models);
    sum.acc *= inv;
    sum.nll *= inv;
    sum.ece *= inv;
    sum.brier *= inv;
    sum.mc_samples = samples;
    sum.split = "pm_test";
    out.push_back(sum);
  }
  return out;
}

}  // namespace detail

/// Global-model (and, where present, personalized-model) metrics for the
/// current state. Only evaluation data is touched.
inline std::vector<metrics::MetricsRecord> evaluate_state(const FederationConfig& c,
                                                          const FederationState& s,
                                                          std::span<const ClientHandle> clients,
                                                          const EvalData& eval) {
  std::vector<metrics::MetricsRecord> out;
  if (c.algorithm != Algorithm::kLocalOnly) {
    std::size_t total = 0;
    for (const auto& cl : clients) total += cl.train.size();
    const VariationalPosterior post = detail::global_posterior(c, s.global, total);
    for (int samples : detail::eval_variants(c)) {
      Rng rng = make_rng(c.seed, "evaluate_global",
                         {static_cast<std::uint64_t>(s.round), static_cast<std::uint64_t>(samples)});
      metrics::MetricsRecord r = detail::score(c, post, eval.test, eval.ood, samples, rng);
      r.split = "test";
      out.push_back(r);
    }
  }
  if (!s.personal.empty()) {
    auto pm = detail::evaluate_personal(c, s, clients, eval);
    out.insert(out.end(), pm.begin(), pm.end());
  }
  for (auto& r : out) {
    r.round = s.round;
    r.algorithm = to_string(c.algorithm);
  }
  return out;
}

/// One communication round: sample, train the sampled clients from the
/// broadcast model, aggregate in client-id order, optionally evaluate.
inline RoundRecord run_round(FederationState& s, const FederationConfig& c,
                             std::span<const ClientHandle> clients, const EvalData* eval = nullptr) {
  require(static_cast<int>(clients.size()) == c.n_clients, "run_round: client count != n_clients");
  const std::int64_t round = s.round + 1;
  RoundRecord rec;
  rec.round = round;
  rec.sampled = sample_clients(c.n_clients, c.participation_fraction, round, c.seed);
  const std::size_t k = rec.sampled.size();

  std::vector<ClientContribution> contribs(k);
  std::vector<std::pair<ParamVector, std::size_t>> point_models(k);
  std::vector<std::optional<VariationalPosterior>> new_personal(k);
  rec.client_losses.assign(k, 0.0);
  const bool personal = !s.personal.empty();

  // Personalized models start from the round-0 global model, independent of
  // anything the server has learned since.
  const GlobalModel fresh_personal = personal ? initial_global_model(c) : GlobalModel{};
  IvonConfig local_cfg = c.ivon;
  local_cfg.weight_decay = 0.0;  // local-only: likelihood plus nothing

  parallel_for(k, c.parallel, [&](std::size_t i) {
    const ClientHandle& client = clients[rec.sampled[i]];
    const std::uint64_t seed = detail::client_seed(c, round, client.id);
    try {
      if (c.algorithm == Algorithm::kFedAvg) {
        FirstOrderResult r = first_order_update(client.train, c.model, s.global.mean, c.first_order, seed);
        rec.client_losses[i] = r.mean_loss;
        point_models[i] = {std::move(r.params), client.train.size()};
        return;
      }
      GlobalModel start = personal ? fresh_personal : s.global;
      if (personal) {
        if (const auto& pm = s.personal[rec.sampled[i]]) start = {pm->mean, pm->hessian};
      }
      ClientUpdateResult r;
      if (c.algorithm == Algorithm::kLocalOnly) {
        r = client_update(client.train, c.model, start, local_cfg, seed);
      } else if (c.beta) {
        r = personalized_client_update(client.train, c.model, start,
                                       PriorSpec{s.global.mean, s.global.hessian, *c.beta}, c.ivon, seed);
      } else {
        r = client_update(client.train, c.model, start, c.ivon, seed);
      }
      rec.client_losses[i] = r.mean_loss;
      contribs[i] = {r.posterior.mean, r.posterior.hessian, client.train.size()};
      if (personal) new_personal[i] = std::move(r.posterior);
    } catch (const std::exception& e) {
      throw ClientError(client.id, e.what());
    }
  });

  switch (c.algorithm) {
    case Algorithm::kFedAvg: s.global.mean = fedavg_aggregate(point_models); break;
    case Algorithm::kFedIvon: s.global = aggregate(contribs); break;
    case Algorithm::kLocalOnly: break;
  }
  if (personal)
    for (std::size_t i = 0; i < k; ++i) s.personal[rec.sampled[i]] = std::move(new_personal[i]);
  s.round = round;
  if (eval && (round % c.eval_every == 0 || round == c.rounds)) rec.evals = evaluate_state(c, s, clients, *eval);
  return rec;
}

struct FederationResult {
  RoundHistory history;
  FederationState state;
};

using RoundCallback = std::function<void(const RoundRecord&, const FederationState&)>;

/// Runs rounds state.round+1 .. config.rounds. Passing a state restored from a
/// checkpoint resumes a run; rounds are seeded by index so the continuation
/// matches an uninterrupted run.
inline FederationResult run_federation(const FederationConfig& c, std::span<const ClientHandle> clients,
                                       const EvalData& eval, std::optional<FederationState> resume = {},
                                       const RoundCallback& on_round = {}) {
  validate(c);
  require(!clients.empty(), "run_federation: no clients");
  FederationResult out;
  out.state = resume ? std::move(*resume) : initial_state(c, clients.size());
  while (out.state.round < c.rounds) {
    out.history.rounds.push_back(run_round(out.state, c, clients, &eval));
    if (on_round) on_round(out.history.rounds.back(), out.state);
  }
  return out;
}

/// Personalized FedIvon: every sampled client trains its own posterior with
/// the current global model as prior; the server aggregates the personalized
/// posteriors into the global model.
inline FederationResult run_personalized(const FederationConfig& c, std::span<const ClientHandle> clients,
                                         const EvalData& eval, std::optional<FederationState> resume = {},
                                         const RoundCallback& on_round = {}) {
  require(c.beta.has_value(), "run_personalized: personalization beta not configured");
  return run_federation(c, clients, eval, std::move(resume), on_round);
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json checkpoint_json(const FederationState& s) {
  nlohmann::json j = {{"round", s.round}, {"global", to_json(s.global)}};
  if (!s.personal.empty()) {
    nlohmann::json p = nlohmann::json::array();
    for (const auto& pm : s.personal) p.push_back(pm ? to_json(*pm) : nlohmann::json(nullptr));
    j["personal"] = p;
  }
  return j;
}

inline FederationState state_from_checkpoint(const nlohmann::json& j) {
  FederationState s;
  s.round = j.at("round").get<std::int64_t>();
  s.global = global_model_from_json(j.at("global"));
  if (j.contains("personal"))
    for (const auto& p : j.at("personal"))
      s.personal.push_back(p.is_null() ? std::nullopt : std::optional(posterior_from_json(p)));
  return s;
}

inline void save_checkpoint(const std::string& path, const FederationState& s) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out << checkpoint_json(s).dump() << '\n';
}

inline FederationState load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  return state_from_checkpoint(nlohmann::json::parse(in));
}

}  // namespace fedivon
