#pragma once

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include <json.hpp>

#include "fedivon/data.hpp"
#include "fedivon/federation.hpp"

/// Experiment configuration, execution and reporting behind the command-line
/// tool. Configs are JSON; see the README for the full key reference.
namespace fedivon::experiment {

namespace fs = std::filesystem;
using nlohmann::json;

enum class Mode { kStandard, kPersonalized, kOod, kAblation };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::kStandard: return "standard";
    case Mode::kPersonalized: return "personalized";
    case Mode::kOod: return "ood";
    case Mode::kAblation: return "ablation";
  }
  return "?";
}

inline std::optional<Mode> mode_from_string(const std::string& s) {
  for (Mode m : {Mode::kStandard, Mode::kPersonalized, Mode::kOod, Mode::kAblation})
    if (to_string(m) == s) return m;
  return std::nullopt;
}

struct DatasetSpec {
  std::string kind = "blobs";  // blobs | superclass | idx | csv
  // blobs
  int n_classes = 10;
  int n_per_class = 60;
  int test_per_class = 30;
  double separation = 4.0;
  // superclass
  int n_super = 4;
  int n_sub = 5;
  int n_per_sub = 40;
  int test_per_sub = 20;
  double super_separation = 12.0;
  double sub_spread = 2.0;
  // blobs and superclass
  int dim = 8;
  // idx
  std::string train_images, train_labels, test_images, test_labels;
  // csv
  std::string train_csv, test_csv;

  bool operator==(const DatasetSpec&) const = default;
};

struct PartitionSpec {
  std::string scheme = "shard";  // shard | class_skew | concept_drift | iid
  int shards_per_client = 2;
  int classes_per_client = 2;

  bool operator==(const PartitionSpec&) const = default;
};

struct OodSpec {
  int n_clusters = 3;
  int n_per_cluster = 100;
  double min_distance = 20.0;

  bool operator==(const OodSpec&) const = default;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  Mode mode = Mode::kStandard;
  std::string output_dir = "runs";
  std::vector<std::string> algorithms{"fedivon"};
  DatasetSpec dataset;
  PartitionSpec partition;
  int n_clients = 20;
  int rounds = 20;
  double participation_fraction = 0.25;
  int eval_every = 5;
  std::optional<double> beta;
  std::vector<int> hidden{32};
  nn::Activation activation = nn::Activation::kRelu;
  IvonConfig ivon = default_ivon();
  FirstOrderConfig first_order;
  int mc_test_samples = 64;
  int ece_bins = metrics::kDefaultEceBins;
  OodSpec ood;
  std::vector<int> ablation_epochs{1, 2};

  static IvonConfig default_ivon() {
    IvonConfig c;
    c.ess = 5000.0;
    return c;
  }
  bool operator==(const ExperimentConfig&) const = default;
};

/// Every problem found in a config, one message per offending key.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::runtime_error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const noexcept { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "invalid config:";
    for (const auto& m : p) s += "\n  " + m;
    return s;
  }
  std::vector<std::string> problems_;
};

namespace detail {

// Reads one JSON object section, recording type errors and unknown keys
// instead of stopping at the first one.
class Section {
 public:
  Section(const json* obj, std::string path, std::vector<std::string>& errors)
      : obj_(obj), path_(std::move(path)), errors_(errors) {
    if (obj_ && !obj_->is_object()) {
      errors_.push_back(path_ + ": expected an object");
      obj_ = nullptr;
    }
  }

  std::string key_path(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  template <typename T>
  void get(const std::string& key, T& out) {
    const json* v = lookup(key);
    if (!v) return;
    if (!convert(*v, out)) errors_.push_back(key_path(key) + ": expected " + type_name<T>());
  }

  template <typename T>
  void get(const std::string& key, std::optional<T>& out) {
    const json* v = lookup(key);
    if (!v) return;
    if (v->is_null()) {
      out.reset();
      return;
    }
    T value{};
    if (convert(*v, value))
      out = value;
    else
      errors_.push_back(key_path(key) + ": expected " + type_name<T>() + " or null");
  }

  Section child(const std::string& key) {
    const json* v = lookup(key);
    return Section(v, key_path(key), errors_);
  }

  bool has(const std::string& key) const { return obj_ && obj_->contains(key); }

  void finish() {
    if (!obj_) return;
    for (const auto& [k, _] : obj_->items())
      if (!known_.count(k)) errors_.push_back(key_path(k) + ": unknown key");
  }

 private:
  const json* lookup(const std::string& key) {
    known_.insert(key);
    if (!obj_ || !obj_->contains(key)) return nullptr;
    return &obj_->at(key);
  }

  static bool convert(const json& v, int& out) {
    if (!v.is_number_integer()) return false;
    const auto x = v.get<std::int64_t>();
    if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max()) return false;
    out = static_cast<int>(x);
    return true;
  }
  static bool convert(const json& v, std::uint64_t& out) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) return false;
    out = v.get<std::uint64_t>();
    return true;
  }
  static bool convert(const json& v, double& out) {
    if (!v.is_number()) return false;
    out = v.get<double>();
    return true;
  }
  static bool convert(const json& v, std::string& out) {
    if (!v.is_string()) return false;
    out = v.get<std::string>();
    return true;
  }
  template <typename T>
  static bool convert(const json& v, std::vector<T>& out) {
    if (!v.is_array()) return false;
    std::vector<T> tmp;
    for (const auto& e : v) {
      T x{};
      if (!convert(e, x)) return false;
      tmp.push_back(x);
    }
    out = std::move(tmp);
    return true;
  }

  template <typename T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, int>) return "an integer";
    else if constexpr (std::is_same_v<T, std::uint64_t>) return "a nonnegative integer";
    else if constexpr (std::is_same_v<T, double>) return "a number";
    else if constexpr (std::is_same_v<T, std::string>) return "a string";
    else if constexpr (std::is_same_v<T, std::vector<int>>) return "an array of integers";
    else return "an array of strings";
  }

  const json* obj_;
  std::string path_;
  std::vector<std::string>& errors_;
  std::set<std::string> known_;
};

inline void check(std::vector<std::string>& errors, bool ok, const std::string& msg) {
  if (!ok) errors.push_back(msg);
}

}  // namespace detail

/// Range and consistency checks; returns one message per problem.
inline std::vector<std::string> validation_errors(const ExperimentConfig& c) {
  std::vector<std::string> e;
  using detail::check;
  check(e, !c.name.empty() && c.name.find_first_of("/\\") == std::string::npos,
        "name: must be a nonempty string without path separators");
  check(e, !c.output_dir.empty(), "output_dir: must be nonempty");
  check(e, !c.algorithms.empty(), "algorithms: need at least one algorithm");
  std::set<std::string> seen;
  for (const auto& a : c.algorithms) {
    const bool known = a == "fedivon" || a == "fedavg" || a == "local_only";
    check(e, known, "algorithms: unknown algorithm '" + a + "' (fedivon, fedavg, local_only)");
    check(e, seen.insert(a).second, "algorithms: '" + a + "' listed twice");
    if (c.mode == Mode::kPersonalized)
      check(e, a != "fedavg", "algorithms: fedavg is not available in personalized mode");
  }

  const DatasetSpec& d = c.dataset;
  if (d.kind == "blobs") {
    check(e, d.n_classes >= 2, "dataset.n_classes: must be >= 2");
    check(e, d.n_per_class >= 1, "dataset.n_per_class: must be >= 1");
    check(e, d.test_per_class >= 1, "dataset.test_per_class: must be >= 1");
    check(e, d.separation > 0.0, "dataset.separation: must be positive");
    check(e, d.dim >= 1, "dataset.dim: must be >= 1");
  } else if (d.kind == "superclass") {
    check(e, d.n_super >= 2, "dataset.n_super: must be >= 2");
    check(e, d.n_sub >= 1, "dataset.n_sub: must be >= 1");
    check(e, d.n_per_sub >= 1, "dataset.n_per_sub: must be >= 1");
    check(e, d.test_per_sub >= 1, "dataset.test_per_sub: must be >= 1");
    check(e, d.super_separation > 0.0, "dataset.super_separation: must be positive");
    check(e, d.sub_spread >= 0.0, "dataset.sub_spread: must be nonnegative");
    check(e, d.dim >= 1, "dataset.dim: must be >= 1");
  } else if (d.kind == "idx") {
    for (const auto& [k, v] : {std::pair{"train_images", &d.train_images}, {"train_labels", &d.train_labels},
                               {"test_images", &d.test_images}, {"test_labels", &d.test_labels}})
      check(e, !v->empty(), std::string("dataset.") + k + ": required for kind idx");
  } else if (d.kind == "csv") {
    check(e, !d.train_csv.empty(), "dataset.train_csv: required for kind csv");
    check(e, !d.test_csv.empty(), "dataset.test_csv: required for kind csv");
  } else {
    e.push_back("dataset.kind: unknown kind '" + d.kind + "' (blobs, superclass, idx, csv)");
  }

  const PartitionSpec& p = c.partition;
  if (p.scheme == "shard") {
    check(e, p.shards_per_client >= 1, "partition.shards_per_client: must be >= 1");
  } else if (p.scheme == "class_skew") {
    check(e, p.classes_per_client >= 1, "partition.classes_per_client: must be >= 1");
  } else if (p.scheme == "concept_drift") {
    check(e, d.kind == "superclass", "partition.scheme: concept_drift needs dataset.kind superclass");
  } else if (p.scheme != "iid") {
    e.push_back("partition.scheme: unknown scheme '" + p.scheme + "' (shard, class_skew, concept_drift, iid)");
  }

  check(e, c.n_clients >= 1, "federation.n_clients: must be >= 1");
  check(e, c.rounds >= 0, "federation.rounds: must be >= 0");
  check(e, c.participation_fraction > 0.0 && c.participation_fraction <= 1.0,
        "federation.participation_fraction: must be in (0, 1]");
  check(e, c.eval_every >= 1, "federation.eval_every: must be >= 1");
  if (c.mode == Mode::kPersonalized) {
    check(e, c.beta.has_value(), "federation.beta: required in personalized mode");
    check(e, !c.beta || *c.beta >= 0.0, "federation.beta: must be >= 0");
  } else {
    check(e, !c.beta.has_value(), "federation.beta: only allowed in personalized mode");
  }

  for (int h : c.hidden) check(e, h >= 1, "model.hidden: layer widths must be >= 1");

  const IvonConfig& v = c.ivon;
  check(e, v.beta1 >= 0.0 && v.beta1 < 1.0, "ivon.beta1: must be in [0, 1)");
  check(e, v.beta2 >= 0.0 && v.beta2 < 1.0, "ivon.beta2: must be in [0, 1)");
  check(e, v.lr_initial > 0.0, "ivon.lr_initial: must be positive");
  check(e, v.lr_final > 0.0 && v.lr_final <= v.lr_initial, "ivon.lr_final: must be in (0, lr_initial]");
  check(e, v.weight_decay >= 0.0, "ivon.weight_decay: must be nonnegative");
  check(e, !v.ess || *v.ess > 0.0, "ivon.ess: must be positive or null");
  check(e, v.h_init >= 0.0, "ivon.h_init: must be nonnegative");
  check(e, v.batch_size >= 1, "ivon.batch_size: must be >= 1");
  check(e, v.epochs >= 0, "ivon.epochs: must be >= 0");
  check(e, v.train_mc_samples >= 1, "ivon.train_mc_samples: must be >= 1");
  check(e, !v.clip_grad_norm || *v.clip_grad_norm > 0.0, "ivon.clip_grad_norm: must be positive or null");

  const FirstOrderConfig& f = c.first_order;
  check(e, f.lr_initial > 0.0, "first_order.lr_initial: must be positive");
  check(e, f.lr_final > 0.0 && f.lr_final <= f.lr_initial, "first_order.lr_final: must be in (0, lr_initial]");
  check(e, f.weight_decay >= 0.0, "first_order.weight_decay: must be nonnegative");
  check(e, f.momentum >= 0.0 && f.momentum < 1.0, "first_order.momentum: must be in [0, 1)");
  check(e, f.beta1 >= 0.0 && f.beta1 < 1.0, "first_order.adam_beta1: must be in [0, 1)");
  check(e, f.beta2 >= 0.0 && f.beta2 < 1.0, "first_order.adam_beta2: must be in [0, 1)");
  check(e, f.eps > 0.0, "first_order.adam_eps: must be positive");
  check(e, f.batch_size >= 1, "first_order.batch_size: must be >= 1");
  check(e, f.epochs >= 0, "first_order.epochs: must be >= 0");

  check(e, c.mc_test_samples >= 0, "metrics.mc_test_samples: must be >= 0");
  check(e, c.ece_bins >= 1, "metrics.ece_bins: must be >= 1");

  if (c.mode == Mode::kOod) {
    check(e, d.kind == "blobs" || d.kind == "superclass", "mode: ood needs a synthetic dataset (blobs or superclass)");
    check(e, c.ood.n_clusters >= 1, "ood.n_clusters: must be >= 1");
    check(e, c.ood.n_per_cluster >= 1, "ood.n_per_cluster: must be >= 1");
    check(e, c.ood.min_distance > 0.0, "ood.min_distance: must be positive");
  }
  if (c.mode == Mode::kAblation) {
    check(e, !c.ablation_epochs.empty(), "ablation.epochs: need at least one value");
    for (int ep : c.ablation_epochs) check(e, ep >= 0, "ablation.epochs: values must be >= 0");
  }
  return e;
}

/// Parses a config document. Relative dataset paths are resolved against
/// `base_dir`. Throws ConfigError listing every problem found.
inline ExperimentConfig parse_config_json(const json& root, const fs::path& base_dir = {}) {
  std::vector<std::string> errors;
  ExperimentConfig c;
  detail::Section top(&root, "", errors);
  if (!root.is_object()) throw ConfigError({"config: top level must be a JSON object"});

  top.get("name", c.name);
  top.get("seed", c.seed);
  std::string mode = to_string(c.mode);
  top.get("mode", mode);
  if (auto m = mode_from_string(mode))
    c.mode = *m;
  else
    errors.push_back("mode: unknown mode '" + mode + "' (standard, personalized, ood, ablation)");
  top.get("output_dir", c.output_dir);
  top.get("algorithms", c.algorithms);

  {
    detail::Section s = top.child("dataset");
    s.get("kind", c.dataset.kind);
    DatasetSpec& d = c.dataset;
    if (d.kind == "blobs") {
      s.get("n_classes", d.n_classes);
      s.get("n_per_class", d.n_per_class);
      s.get("test_per_class", d.test_per_class);
      s.get("separation", d.separation);
      s.get("dim", d.dim);
    } else if (d.kind == "superclass") {
      s.get("n_super", d.n_super);
      s.get("n_sub", d.n_sub);
      s.get("n_per_sub", d.n_per_sub);
      s.get("test_per_sub", d.test_per_sub);
      s.get("super_separation", d.super_separation);
      s.get("sub_spread", d.sub_spread);
      s.get("dim", d.dim);
    } else if (d.kind == "idx") {
      s.get("train_images", d.train_images);
      s.get("train_labels", d.train_labels);
      s.get("test_images", d.test_images);
      s.get("test_labels", d.test_labels);
    } else if (d.kind == "csv") {
      s.get("train_csv", d.train_csv);
      s.get("test_csv", d.test_csv);
    }
    s.finish();
    auto resolve = [&](std::string& path) {
      if (!path.empty() && !base_dir.empty() && fs::path(path).is_relative()) path = (base_dir / path).string();
    };
    for (std::string* p : {&d.train_images, &d.train_labels, &d.test_images, &d.test_labels, &d.train_csv, &d.test_csv})
      resolve(*p);
  }
  {
    detail::Section s = top.child("partition");
    s.get("scheme", c.partition.scheme);
    s.get("shards_per_client", c.partition.shards_per_client);
    s.get("classes_per_client", c.partition.classes_per_client);
    s.finish();
  }
  {
    detail::Section s = top.child("federation");
    s.get("n_clients", c.n_clients);
    s.get("rounds", c.rounds);
    s.get("participation_fraction", c.participation_fraction);
    s.get("eval_every", c.eval_every);
    s.get("beta", c.beta);
    s.finish();
  }
  {
    detail::Section s = top.child("model");
    s.get("hidden", c.hidden);
    std::string act = nn::to_string(c.activation);
    s.get("activation", act);
    if (act == "relu" || act == "tanh")
      c.activation = nn::activation_from_string(act);
    else
      errors.push_back("model.activation: unknown activation '" + act + "' (relu, tanh)");
    s.finish();
  }
  {
    detail::Section s = top.child("ivon");
    IvonConfig& v = c.ivon;
    s.get("beta1", v.beta1);
    s.get("beta2", v.beta2);
    s.get("lr_initial", v.lr_initial);
    s.get("lr_final", v.lr_final);
    s.get("weight_decay", v.weight_decay);
    s.get("ess", v.ess);
    s.get("h_init", v.h_init);
    s.get("batch_size", v.batch_size);
    s.get("epochs", v.epochs);
    s.get("train_mc_samples", v.train_mc_samples);
    s.get("clip_grad_norm", v.clip_grad_norm);
    s.finish();
  }
  {
    detail::Section s = top.child("first_order");
    FirstOrderConfig& f = c.first_order;
    std::string kind = to_string(f.kind);
    s.get("optimizer", kind);
    if (kind == "sgd" || kind == "adam")
      f.kind = first_order_kind_from_string(kind);
    else
      errors.push_back("first_order.optimizer: unknown optimizer '" + kind + "' (sgd, adam)");
    s.get("lr_initial", f.lr_initial);
    s.get("lr_final", f.lr_final);
    s.get("weight_decay", f.weight_decay);
    s.get("momentum", f.momentum);
    s.get("adam_beta1", f.beta1);
    s.get("adam_beta2", f.beta2);
    s.get("adam_eps", f.eps);
    s.get("batch_size", f.batch_size);
    s.get("epochs", f.epochs);
    s.finish();
  }
  {
    detail::Section s = top.child("metrics");
    s.get("mc_test_samples", c.mc_test_samples);
    s.get("ece_bins", c.ece_bins);
    s.finish();
  }
  {
    detail::Section s = top.child("ood");
    s.get("n_clusters", c.ood.n_clusters);
    s.get("n_per_cluster", c.ood.n_per_cluster);
    s.get("min_distance", c.ood.min_distance);
    s.finish();
  }
  {
    detail::Section s = top.child("ablation");
    s.get("epochs", c.ablation_epochs);
    s.finish();
  }
  top.finish();

  // Ill-typed fields keep their defaults, so range checks still see a
  // well-formed config and every problem is reported in one pass.
  for (auto& e : validation_errors(c)) errors.push_back(std::move(e));
  if (!errors.empty()) throw ConfigError(std::move(errors));
  return c;
}

inline ExperimentConfig parse_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError({"cannot open config '" + path.string() + "'"});
  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  }
  return parse_config_json(root, fs::absolute(path).parent_path());
}

/// Full config with every default written out.
inline json serialize(const ExperimentConfig& c) {
  const DatasetSpec& d = c.dataset;
  json dataset = {{"kind", d.kind}};
  if (d.kind == "blobs") {
    dataset.update({{"n_classes", d.n_classes}, {"n_per_class", d.n_per_class}, {"test_per_class", d.test_per_class},
                    {"separation", d.separation}, {"dim", d.dim}});
  } else if (d.kind == "superclass") {
    dataset.update({{"n_super", d.n_super}, {"n_sub", d.n_sub}, {"n_per_sub", d.n_per_sub},
                    {"test_per_sub", d.test_per_sub}, {"super_separation", d.super_separation},
                    {"sub_spread", d.sub_spread}, {"dim", d.dim}});
  } else if (d.kind == "idx") {
    dataset.update({{"train_images", d.train_images}, {"train_labels", d.train_labels},
                    {"test_images", d.test_images}, {"test_labels", d.test_labels}});
  } else {
    dataset.update({{"train_csv", d.train_csv}, {"test_csv", d.test_csv}});
  }
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  const IvonConfig& v = c.ivon;
  const FirstOrderConfig& f = c.first_order;
  return {
      {"name", c.name},
      {"seed", c.seed},
      {"mode", to_string(c.mode)},
      {"output_dir", c.output_dir},
      {"algorithms", c.algorithms},
      {"dataset", dataset},
      {"partition",
       {{"scheme", c.partition.scheme},
        {"shards_per_client", c.partition.shards_per_client},
        {"classes_per_client", c.partition.classes_per_client}}},
      {"federation",
       {{"n_clients", c.n_clients},
        {"rounds", c.rounds},
        {"participation_fraction", c.participation_fraction},
        {"eval_every", c.eval_every},
        {"beta", opt(c.beta)}}},
      {"model", {{"hidden", c.hidden}, {"activation", nn::to_string(c.activation)}}},
      {"ivon",
       {{"beta1", v.beta1},
        {"beta2", v.beta2},
        {"lr_initial", v.lr_initial},
        {"lr_final", v.lr_final},
        {"weight_decay", v.weight_decay},
        {"ess", opt(v.ess)},
        {"h_init", v.h_init},
        {"batch_size", v.batch_size},
        {"epochs", v.epochs},
        {"train_mc_samples", v.train_mc_samples},
        {"clip_grad_norm", opt(v.clip_grad_norm)}}},
      {"first_order",
       {{"optimizer", to_string(f.kind)},
        {"lr_initial", f.lr_initial},
        {"lr_final", f.lr_final},
        {"weight_decay", f.weight_decay},
        {"momentum", f.momentum},
        {"adam_beta1", f.beta1},
        {"adam_beta2", f.beta2},
        {"adam_eps", f.eps},
        {"batch_size", f.batch_size},
        {"epochs", f.epochs}}},
      {"metrics", {{"mc_test_samples", c.mc_test_samples}, {"ece_bins", c.ece_bins}}},
      {"ood",
       {{"n_clusters", c.ood.n_clusters},
        {"n_per_cluster", c.ood.n_per_cluster},
        {"min_distance", c.ood.min_distance}}},
      {"ablation", {{"epochs", c.ablation_epochs}}},
  };
}

/// SHA-1 of the git blob object holding `content` ("blob <len>\0" prefix).
inline std::string git_blob_sha1(const std::string& content) {
  const std::string obj = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(obj.data(), obj.size(), md, &len, EVP_sha1(), nullptr) != 1)
    throw std::runtime_error("SHA-1 digest failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

// ---------------------------------------------------------------------------
// Data assembly

struct PreparedData {
  std::vector<ClientHandle> clients;
  EvalData eval;
  int input_dim = 0;
  int n_classes = 0;
};

inline PreparedData prepare_data(const ExperimentConfig& c) {
  const DatasetSpec& d = c.dataset;
  const std::uint64_t dseed = derive_seed(c.seed, "dataset");
  data::Dataset train, test;
  std::optional<Matrix> centres;
  if (d.kind == "blobs") {
    const Matrix means = data::blob_means(d.n_classes, d.dim, d.separation, dseed);
    train = data::sample_clusters(means, d.n_per_class, 1.0, derive_seed(dseed, "train"));
    test = data::sample_clusters(means, d.test_per_class, 1.0, derive_seed(dseed, "test"));
    centres = means;
  } else if (d.kind == "superclass") {
    data::SuperclassMeans m =
        data::superclass_means(d.n_super, d.n_sub, d.dim, dseed, d.super_separation, d.sub_spread);
    train = data::sample_clusters(m.sub_means, d.n_per_sub, 1.0, derive_seed(dseed, "train"));
    test = data::sample_clusters(m.sub_means, d.test_per_sub, 1.0, derive_seed(dseed, "test"));
    train.superclass_of = test.superclass_of = m.superclass_of;
    centres = m.sub_means;
  } else if (d.kind == "idx") {
    train = data::load_idx(d.train_images, d.train_labels);
    test = data::load_idx(d.test_images, d.test_labels);
  } else {
    train = data::load_csv(d.train_csv);
    test = data::load_csv(d.test_csv);
  }
  if (d.kind == "idx" || d.kind == "csv") {
    require(train.dim() == test.dim(), "dataset: train and test feature counts differ");
    train.n_classes = test.n_classes = std::max(train.n_classes, test.n_classes);
  }

  const std::uint64_t pseed = derive_seed(c.seed, "partition");
  const PartitionSpec& p = c.partition;
  PreparedData out;
  out.input_dim = static_cast<int>(train.dim());
  out.n_classes = train.n_classes;

  if (p.scheme == "concept_drift") {
    const data::ConceptDriftPlan drift = data::concept_drift_partition(train, c.n_clients, pseed);
    const data::Dataset super_train = data::to_superclass_labels(train);
    out.clients = make_clients(super_train, drift.plan);
    for (std::size_t k = 0; k < out.clients.size(); ++k) {
      const std::set<int> subs(drift.chosen_subclasses[k].begin(), drift.chosen_subclasses[k].end());
      out.clients[k].matched_test = data::to_superclass_labels(data::filter_labels(test, subs));
    }
    test = data::to_superclass_labels(test);
    out.n_classes = test.n_classes;
  } else {
    data::PartitionPlan plan;
    if (p.scheme == "shard") plan = data::shard_partition(train, c.n_clients, p.shards_per_client, pseed);
    else if (p.scheme == "class_skew") plan = data::class_skew_partition(train, c.n_clients, p.classes_per_client, pseed);
    else plan = data::iid_partition(train.size(), c.n_clients, pseed);
    out.clients = make_clients(train, plan);
    const auto sets = data::client_label_sets(train, plan);
    for (std::size_t k = 0; k < out.clients.size(); ++k) out.clients[k].matched_test = data::filter_labels(test, sets[k]);
  }
  out.eval.test = std::move(test);
  if (c.mode == Mode::kOod) {
    data::Dataset ood = data::ood_clusters(*centres, c.ood.n_clusters, c.ood.n_per_cluster, c.ood.min_distance,
                                           derive_seed(dseed, "ood"));
    ood.n_classes = out.n_classes;
    out.eval.ood = std::move(ood);
  }
  return out;
}

/// One federation run within an experiment.
struct RunSpec {
  std::string tag;  // empty, or "E=<epochs>" in ablation mode
  FederationConfig federation;
};

inline std::vector<RunSpec> plan_runs(const ExperimentConfig& c, const PreparedData& d, int parallel = 1) {
  FederationConfig base;
  base.n_clients = c.n_clients;
  base.rounds = c.rounds;
  base.participation_fraction = c.participation_fraction;
  base.ivon = c.ivon;
  base.first_order = c.first_order;
  base.model.layer_sizes.push_back(d.input_dim);
  base.model.layer_sizes.insert(base.model.layer_sizes.end(), c.hidden.begin(), c.hidden.end());
  base.model.layer_sizes.push_back(d.n_classes);
  base.model.activation = c.activation;
  base.eval_every = c.eval_every;
  base.seed = c.seed;
  base.mc_test_samples = c.mc_test_samples;
  base.ece_bins = c.ece_bins;
  base.parallel = parallel;

  const std::vector<int> epochs = c.mode == Mode::kAblation ? c.ablation_epochs : std::vector<int>{-1};
  std::vector<RunSpec> runs;
  for (int e : epochs)
    for (const auto& name : c.algorithms) {
      RunSpec r{e >= 0 ? "E=" + std::to_string(e) : "", base};
      r.federation.algorithm = algorithm_from_string(name);
      if (c.mode == Mode::kPersonalized && r.federation.algorithm == Algorithm::kFedIvon) r.federation.beta = c.beta;
      if (e >= 0) r.federation.ivon.epochs = r.federation.first_order.epochs = e;
      runs.push_back(std::move(r));
    }
  return runs;
}

// ---------------------------------------------------------------------------
// Reporting

struct SummaryRow {
  std::string algorithm;
  std::string run;
  std::string split;
  std::string variant;  // "@mean" or "MC"
  std::int64_t round = 0;
  double acc = 0, ece = 0, nll = 0, brier = 0;
};

inline std::string format_number(double v) { return data::detail::format_double(v); }

/// Final-round metrics of every (algorithm, run, split, variant) in
/// `run_dir/metrics.jsonl`, in order of first appearance. Writes
/// summary.csv and summary.md next to it and returns the rows.
inline std::vector<SummaryRow> summarize(const fs::path& run_dir) {
  const fs::path metrics_path = run_dir / "metrics.jsonl";
  std::ifstream in(metrics_path);
  if (!in) throw std::runtime_error("no metrics.jsonl in '" + run_dir.string() + "'");
  std::vector<SummaryRow> rows;
  std::map<std::tuple<std::string, std::string, std::string, std::string>, std::size_t> index;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    metrics::MetricsRecord r;
    try {
      r = metrics::record_from_json(json::parse(line));
    } catch (const std::exception& e) {
      throw std::runtime_error(metrics_path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
    SummaryRow row{r.algorithm, r.run, r.split, r.mc_samples == 0 ? "@mean" : "MC", r.round, r.acc, r.ece, r.nll, r.brier};
    const auto key = std::make_tuple(row.algorithm, row.run, row.split, row.variant);
    auto it = index.find(key);
    if (it == index.end()) {
      index.emplace(key, rows.size());
      rows.push_back(row);
    } else if (row.round >= rows[it->second].round) {
      rows[it->second] = row;
    }
  }
  if (rows.empty()) throw std::runtime_error(metrics_path.string() + ": no records");

  std::ofstream csv(run_dir / "summary.csv");
  csv << "algorithm,run,split,variant,acc,ece,nll,brier\n";
  for (const auto& r : rows)
    csv << r.algorithm << ',' << r.run << ',' << r.split << ',' << r.variant << ','
        << format_number(r.acc) << ',' << format_number(r.ece) << ',' << format_number(r.nll) << ','
        << format_number(r.brier) << '\n';

  std::ofstream md(run_dir / "summary.md");
  md << "| algorithm | run | split | variant | acc | ece | nll | brier |\n"
     << "|---|---|---|---|---|---|---|---|\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %.4f | %.4f | %.4f | %.4f |", r.acc, r.ece, r.nll, r.brier);
    md << "| " << r.algorithm << " | " << (r.run.empty() ? "-" : r.run) << " | " << r.split << " | " << r.variant
       << " " << buf << '\n';
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Execution

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  int parallel = 1;
  std::ostream* log = nullptr;  // progress lines; null for silence
};

/// Output directory precedence: explicit option, then FEDIVON_OUTPUT_DIR, then
/// the config.
inline std::string resolve_output_dir(const ExperimentConfig& c, const RunOptions& o) {
  if (o.output_dir) return *o.output_dir;
  if (const char* env = std::getenv("FEDIVON_OUTPUT_DIR"); env && *env) return env;
  return c.output_dir;
}

struct RunOutcome {
  RunSpec spec;
  FederationResult result;
};

struct ExperimentResult {
  fs::path run_dir;
  std::vector<RunOutcome> runs;
  std::vector<SummaryRow> summary;
};

inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::string checkpoint_name(const RunSpec& r) {
  std::string name = "checkpoint_" + to_string(r.federation.algorithm);
  if (!r.tag.empty()) {
    name += '_';
    for (char ch : r.tag)
      if (ch != '=') name += ch;
  }
  return name + ".json";
}

/// Runs every federation of the experiment and writes, under
/// <output>/<name>/: manifest.json (before training), metrics.jsonl
/// (streamed), one checkpoint per run, summary.csv and summary.md.
inline ExperimentResult run_experiment(ExperimentConfig c, const RunOptions& o = {}) {
  if (o.seed) c.seed = *o.seed;
  c.output_dir = resolve_output_dir(c, o);
  require(o.parallel >= 1, "parallel must be >= 1");
  if (auto errors = validation_errors(c); !errors.empty()) throw ConfigError(std::move(errors));

  const PreparedData d = prepare_data(c);
  const std::vector<RunSpec> runs = plan_runs(c, d, o.parallel);
  for (const auto& r : runs) validate(r.federation);

  ExperimentResult out;
  out.run_dir = fs::path(c.output_dir) / c.name;
  fs::create_directories(out.run_dir);

  const std::string config_text = serialize(c).dump(2);
  json manifest = {{"name", c.name},
                   {"seed", c.seed},
                   {"config", serialize(c)},
                   {"config_sha1", git_blob_sha1(config_text)},
                   {"started_at", utc_timestamp()},
                   {"artifacts", {{"metrics", "metrics.jsonl"}, {"summary_csv", "summary.csv"}, {"summary_md", "summary.md"}}}};
  std::vector<int> layers{d.input_dim};
  layers.insert(layers.end(), c.hidden.begin(), c.hidden.end());
  layers.push_back(d.n_classes);
  manifest["model"] = {{"layer_sizes", layers}, {"activation", nn::to_string(c.activation)}};
  json ckpts = json::array();
  for (const auto& r : runs) ckpts.push_back(checkpoint_name(r));
  manifest["artifacts"]["checkpoints"] = ckpts;
  {
    std::ofstream mf(out.run_dir / "manifest.json");
    mf << manifest.dump(2) << '\n';
  }

  std::ofstream jsonl(out.run_dir / "metrics.jsonl");
  if (!jsonl) throw std::runtime_error("cannot write '" + (out.run_dir / "metrics.jsonl").string() + "'");
  for (const auto& spec : runs) {
    const std::string label = to_string(spec.federation.algorithm) + (spec.tag.empty() ? "" : " " + spec.tag);
    auto on_round = [&](const RoundRecord& rec, const FederationState&) {
      for (auto r : rec.evals) {
        r.run = spec.tag;
        jsonl << metrics::to_json(r).dump() << '\n';
      }
      jsonl.flush();
      if (o.log && !rec.evals.empty()) {
        const auto& e = rec.evals.front();
        *o.log << label << " round " << rec.round << ": " << e.split << " acc " << e.acc << " nll " << e.nll << '\n';
      }
    };
    FederationResult res = run_federation(spec.federation, d.clients, d.eval, std::nullopt, on_round);
    save_checkpoint((out.run_dir / checkpoint_name(spec)).string(), res.state);
    out.runs.push_back({spec, std::move(res)});
  }
  jsonl.close();
  out.summary = summarize(out.run_dir);
  return out;
}

}  // namespace fedivon::experiment
