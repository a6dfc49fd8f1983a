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
#include "fedivon/ivon.hpp"
#include "fedivon/nn.hpp"
#include "fedivon/random.hpp"

namespace fedivon::metrics {

struct PredictiveBatch {
  Matrix probs;             // N x C, rows are distributions
  std::vector<int> labels;  // N
};

struct ReliabilityBin {
  double lower = 0.0;
  double upper = 0.0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
  std::size_t count = 0;
};

inline constexpr double kProbFloor = 1e-12;
inline constexpr int kDefaultEceBins = 10;

/// Monte Carlo predictive distribution: the average of forward() over
/// `samples` posterior draws. samples == 0 evaluates at the posterior mean.
/// The per-draw average is accumulated in draw order.
inline Matrix mc_predict(const VariationalPosterior& post, const nn::ModelSpec& spec,
                         const Matrix& inputs, int samples, Rng& rng) {
  require(samples >= 0, "mc_predict: samples must be >= 0");
  if (samples == 0) return nn::forward(spec, post.mean, inputs);
  Matrix avg(inputs.rows, spec.n_classes());
  const double inv = 1.0 / samples;
  for (int s = 0; s < samples; ++s) {
    const ParamVector theta = sample_theta(post, rng);
    const Matrix p = nn::forward(spec, theta, inputs);
    for (std::size_t i = 0; i < avg.data.size(); ++i) avg.data[i] += inv * p.data[i];
  }
  return avg;
}

inline PredictiveBatch mc_predict(const VariationalPosterior& post, const nn::ModelSpec& spec,
                                  const Matrix& inputs, std::span<const int> labels, int samples,
                                  Rng& rng) {
  return {mc_predict(post, spec, inputs, samples, rng), {labels.begin(), labels.end()}};
}

/// Lowest index among the maxima.
inline int argmax(std::span<const double> row) {
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

inline double accuracy(const PredictiveBatch& pred) {
  require(!pred.labels.empty(), "accuracy: empty batch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i)
    if (argmax(pred.probs.row(i)) == pred.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.labels.size());
}

inline double nll(const PredictiveBatch& pred) {
  require(!pred.labels.empty(), "nll: empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i)
    s -= std::log(std::max(pred.probs(i, pred.labels[i]), kProbFloor));
  return s / static_cast<double>(pred.labels.size());
}

inline double brier(const PredictiveBatch& pred) {
  require(!pred.labels.empty(), "brier: empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    auto row = pred.probs.row(i);
    for (std::size_t c = 0; c < row.size(); ++c) {
      const double d = row[c] - (static_cast<int>(c) == pred.labels[i] ? 1.0 : 0.0);
      s += d * d;
    }
  }
  return s / static_cast<double>(pred.labels.size());
}

/// Equal-width bins over the top-class confidence. A confidence on a bin
/// boundary goes to the upper bin; 1.0 goes to the last bin.
inline std::vector<ReliabilityBin> reliability_bins(const PredictiveBatch& pred, int n_bins) {
  require(n_bins >= 1, "reliability_bins: n_bins must be >= 1");
  std::vector<ReliabilityBin> bins(n_bins);
  std::vector<double> conf_sum(n_bins, 0.0), hit_sum(n_bins, 0.0);
  for (int b = 0; b < n_bins; ++b) {
    bins[b].lower = static_cast<double>(b) / n_bins;
    bins[b].upper = static_cast<double>(b + 1) / n_bins;
  }
  for (std::size_t i = 0; i < pred.labels.size(); ++i) {
    auto row = pred.probs.row(i);
    const int top = argmax(row);
    const double conf = row[top];
    const int b = std::clamp(static_cast<int>(std::floor(conf * n_bins)), 0, n_bins - 1);
    conf_sum[b] += conf;
    hit_sum[b] += top == pred.labels[i] ? 1.0 : 0.0;
    ++bins[b].count;
  }
  for (int b = 0; b < n_bins; ++b) {
    if (bins[b].count == 0) continue;
    bins[b].mean_confidence = conf_sum[b] / static_cast<double>(bins[b].count);
    bins[b].accuracy = hit_sum[b] / static_cast<double>(bins[b].count);
  }
  return bins;
}

inline double ece_from_bins(std::span<const ReliabilityBin> bins) {
  std::size_t n = 0;
  for (const auto& b : bins) n += b.count;
  if (n == 0) return 0.0;
  double e = 0.0;
  for (const auto& b : bins)
    if (b.count > 0)
      e += static_cast<double>(b.count) / static_cast<double>(n) * std::abs(b.accuracy - b.mean_confidence);
  return e;
}

inline double ece(const PredictiveBatch& pred, int n_bins = kDefaultEceBins) {
  return ece_from_bins(reliability_bins(pred, n_bins));
}

/// Shannon entropy of each row, with 0 log 0 = 0.
inline std::vector<double> predictive_entropy(const Matrix& probs) {
  std::vector<double> h(probs.rows, 0.0);
  for (std::size_t i = 0; i < probs.rows; ++i)
    for (double p : probs.row(i))
      if (p > 0.0) h[i] -= p * std::log(p);
  return h;
}

/// P(pos > neg) + 0.5 P(pos == neg) via the Mann-Whitney rank statistic with
/// average ranks for ties.
inline double auroc(std::span<const double> positive, std::span<const double> negative) {
  require(!positive.empty() && !negative.empty(), "auroc: both score sets must be nonempty");
  struct Item {
    double score;
    bool pos;
  };
  std::vector<Item> items;
  items.reserve(positive.size() + negative.size());
  for (double s : positive) items.push_back({s, true});
  for (double s : negative) items.push_back({s, false});
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < items.size();) {
    std::size_t j = i;
    while (j < items.size() && items[j].score == items[i].score) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (items[k].pos) rank_sum += avg_rank;
    i = j;
  }
  const double np = static_cast<double>(positive.size());
  const double nn = static_cast<double>(negative.size());
  return (rank_sum - np * (np + 1.0) / 2.0) / (np * nn);
}

// ---------------------------------------------------------------------------

/// One evaluation line of the metrics stream. mc_samples == 0 marks a
/// prediction at the posterior mean.
struct MetricsRecord {
  std::int64_t round = 0;
  std::string split;
  std::string algorithm;
  double acc = 0.0;
  double nll = 0.0;
  double ece = 0.0;
  double brier = 0.0;
  std::optional<double> auroc;
  std::size_t n = 0;
  int mc_samples = 0;
  std::string run;  // tag distinguishing runs inside one experiment, may be empty

  bool operator==(const MetricsRecord&) const = default;
};

inline MetricsRecord evaluate(const PredictiveBatch& pred, int ece_bins) {
  MetricsRecord r;
  r.acc = accuracy(pred);
  r.nll = nll(pred);
  r.ece = ece(pred, ece_bins);
  r.brier = brier(pred);
  r.n = pred.labels.size();
  return r;
}

inline nlohmann::json to_json(const MetricsRecord& r) {
  nlohmann::json j = {{"round", r.round}, {"split", r.split}, {"algorithm", r.algorithm},
                      {"acc", r.acc},     {"nll", r.nll},     {"ece", r.ece},
                      {"brier", r.brier}, {"n", r.n},         {"mc_samples", r.mc_samples}};
  if (r.auroc) j["auroc"] = *r.auroc;
  if (!r.run.empty()) j["run"] = r.run;
  return j;
}

inline MetricsRecord record_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.round = j.at("round").get<std::int64_t>();
  r.split = j.at("split").get<std::string>();
  r.algorithm = j.at("algorithm").get<std::string>();
  r.acc = j.at("acc").get<double>();
  r.nll = j.at("nll").get<double>();
  r.ece = j.at("ece").get<double>();
  r.brier = j.at("brier").get<double>();
  r.n = j.at("n").get<std::size_t>();
  r.mc_samples = j.at("mc_samples").get<int>();
  if (j.contains("auroc")) r.auroc = j.at("auroc").get<double>();
  if (j.contains("run")) r.run = j.at("run").get<std::string>();
  return r;
}

}  // namespace fedivon::metrics
