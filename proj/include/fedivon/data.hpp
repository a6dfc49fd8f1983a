#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedivon/core.hpp"
#include "fedivon/nn.hpp"
#include "fedivon/random.hpp"

namespace fedivon::data {

struct Dataset {
  Matrix inputs;                   // N x d
  std::vector<int> labels;         // N entries in [0, n_classes)
  int n_classes = 0;
  std::vector<int> superclass_of;  // label -> superclass id; empty when absent

  std::size_t size() const { return labels.size(); }
  std::size_t dim() const { return inputs.cols; }
  bool has_superclasses() const { return !superclass_of.empty(); }
  int n_superclasses() const {
    return superclass_of.empty() ? 0 : *std::max_element(superclass_of.begin(), superclass_of.end()) + 1;
  }
};

/// Per-client index lists into one Dataset.
struct PartitionPlan {
  std::vector<std::vector<std::size_t>> clients;

  std::size_t n_clients() const { return clients.size(); }
};

inline void validate(const Dataset& ds) {
  require_same_size(ds.inputs.rows, ds.labels.size(), "dataset rows vs labels");
  for (int y : ds.labels)
    require(y >= 0 && y < ds.n_classes, "dataset: label " + std::to_string(y) + " out of range");
  if (ds.has_superclasses())
    require_same_size(ds.superclass_of.size(), static_cast<std::size_t>(ds.n_classes),
                      "superclass map");
}

inline Dataset subset(const Dataset& ds, std::span<const std::size_t> idx) {
  Dataset out;
  out.inputs = Matrix(idx.size(), ds.dim());
  out.labels.resize(idx.size());
  out.n_classes = ds.n_classes;
  out.superclass_of = ds.superclass_of;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = ds.inputs.row(idx[i]);
    std::copy(src.begin(), src.end(), out.inputs.row(i).begin());
    out.labels[i] = ds.labels[idx[i]];
  }
  return out;
}

inline nn::Batch make_batch(const Dataset& ds, std::span<const std::size_t> idx) {
  Dataset s = subset(ds, idx);
  return {std::move(s.inputs), std::move(s.labels)};
}

inline nn::Batch full_batch(const Dataset& ds) { return {ds.inputs, ds.labels}; }

/// Same examples, labels replaced by their superclass ids.
inline Dataset to_superclass_labels(const Dataset& ds) {
  require(ds.has_superclasses(), "to_superclass_labels: dataset has no superclass map");
  Dataset out;
  out.inputs = ds.inputs;
  out.n_classes = ds.n_superclasses();
  out.labels.reserve(ds.size());
  for (int y : ds.labels) out.labels.push_back(ds.superclass_of[y]);
  return out;
}

inline std::vector<int> label_histogram(const Dataset& ds) {
  std::vector<int> h(ds.n_classes, 0);
  for (int y : ds.labels) ++h[y];
  return h;
}

// ---------------------------------------------------------------------------
// Synthetic generators

/// Class centres whose minimum pairwise distance is exactly `separation`.
/// Centres are drawn uniformly in a unit box and rescaled about the origin.
inline Matrix blob_means(int n_classes, int dim, double separation, std::uint64_t seed) {
  require(n_classes > 0 && dim > 0 && separation > 0.0, "blob_means: arguments must be positive");
  Rng rng = make_rng(seed, "blob_means");
  std::uniform_real_distribution<double> unif(-1.0, 1.0);
  Matrix means(n_classes, dim);
  for (double& v : means.data) v = unif(rng);
  if (n_classes == 1) return means;
  double min_d = std::numeric_limits<double>::infinity();
  for (int a = 0; a < n_classes; ++a)
    for (int b = a + 1; b < n_classes; ++b) {
      double d2 = 0.0;
      for (int j = 0; j < dim; ++j) d2 += std::pow(means(a, j) - means(b, j), 2);
      min_d = std::min(min_d, std::sqrt(d2));
    }
  // Nudge up so rounding never leaves a pair below the requested separation.
  const double s = separation / min_d * (1.0 + 1e-12);
  for (double& v : means.data) v *= s;
  return means;
}

/// Isotropic Gaussian clusters around `means`; rows grouped by
/// class in label order.
inline Dataset sample_clusters(const Matrix& means, int n_per_class, double stddev,
                               std::uint64_t seed) {
  require(n_per_class > 0, "sample_clusters: n_per_class must be positive");
  Rng rng = make_rng(seed, "sample_clusters");
  const int k = static_cast<int>(means.rows);
  Dataset ds;
  ds.n_classes = k;
  ds.inputs = Matrix(static_cast<std::size_t>(k) * n_per_class, means.cols);
  ds.labels.resize(ds.inputs.rows);
  std::size_t r = 0;
  for (int c = 0; c < k; ++c)
    for (int i = 0; i < n_per_class; ++i, ++r) {
      ds.labels[r] = c;
      for (std::size_t j = 0; j < means.cols; ++j)
        ds.inputs(r, j) = means(c, j) + stddev * standard_normal(rng);
    }
  return ds;
}

inline Dataset synth_blobs(int n_classes, int n_per_class, int dim, double separation,
                           std::uint64_t seed) {
  return sample_clusters(blob_means(n_classes, dim, separation, seed), n_per_class, 1.0, seed);
}

struct SuperclassMeans {
  Matrix sub_means;               // one row per subclass
  std::vector<int> superclass_of;  // subclass -> superclass
};

/// Superclass centres `super_separation` apart, subclass centres scattered
/// around them with spread `sub_spread`. Subclass s belongs to superclass
/// s / n_sub_per_super.
inline SuperclassMeans superclass_means(int n_super, int n_sub_per_super, int dim, std::uint64_t seed,
                                        double super_separation = 12.0, double sub_spread = 2.0) {
  require(n_super > 0 && n_sub_per_super > 0 && dim > 0, "superclass_means: arguments must be positive");
  const Matrix super_means = blob_means(n_super, dim, super_separation, seed);
  Rng rng = make_rng(seed, "synth_superclass");
  const int n_sub = n_super * n_sub_per_super;
  SuperclassMeans out{Matrix(n_sub, dim), std::vector<int>(n_sub)};
  for (int s = 0; s < n_sub; ++s) {
    out.superclass_of[s] = s / n_sub_per_super;
    for (int j = 0; j < dim; ++j)
      out.sub_means(s, j) = super_means(out.superclass_of[s], j) + sub_spread * standard_normal(rng);
  }
  return out;
}

/// Hierarchical blobs; labels are subclass ids and the superclass map is set.
inline Dataset synth_superclass(int n_super, int n_sub_per_super, int n_per_sub, int dim,
                                std::uint64_t seed, double super_separation = 12.0,
                                double sub_spread = 2.0) {
  require(n_per_sub > 0, "synth_superclass: n_per_sub must be positive");
  SuperclassMeans m = superclass_means(n_super, n_sub_per_super, dim, seed, super_separation, sub_spread);
  Dataset ds = sample_clusters(m.sub_means, n_per_sub, 1.0, seed);
  ds.superclass_of = std::move(m.superclass_of);
  return ds;
}

/// Centres for out-of-distribution clusters: each lies at least `min_distance`
/// from every training centre, placed on random directions around the
/// centroid of the training centres. `n_classes` is set to the training class
/// count so the result can be scored by the same model; labels are 0.
inline Dataset ood_clusters(const Matrix& train_means, int n_clusters, int n_per_cluster,
                            double min_distance, std::uint64_t seed) {
  require(n_clusters > 0 && n_per_cluster > 0, "ood_clusters: arguments must be positive");
  Rng rng = make_rng(seed, "ood_clusters");
  const std::size_t dim = train_means.cols;
  std::vector<double> centroid(dim, 0.0);
  for (std::size_t c = 0; c < train_means.rows; ++c)
    for (std::size_t j = 0; j < dim; ++j) centroid[j] += train_means(c, j) / train_means.rows;

  auto min_dist = [&](std::span<const double> p) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < train_means.rows; ++c) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < dim; ++j) d2 += std::pow(p[j] - train_means(c, j), 2);
      best = std::min(best, std::sqrt(d2));
    }
    return best;
  };

  Matrix centres(n_clusters, dim);
  for (int k = 0; k < n_clusters; ++k) {
    std::vector<double> dir(dim);
    double norm = 0.0;
    for (double& v : dir) {
      v = standard_normal(rng);
      norm += v * v;
    }
    norm = std::sqrt(norm);
    // Walk outward from the centroid until far enough from every training centre.
    double radius = 0.0;
    auto c = centres.row(k);
    for (;;) {
      for (std::size_t j = 0; j < dim; ++j) c[j] = centroid[j] + radius * dir[j] / norm;
      if (min_dist(c) >= min_distance) break;
      radius += 0.25 * min_distance;
    }
  }
  Dataset ds = sample_clusters(centres, n_per_cluster, 1.0, seed);
  ds.n_classes = static_cast<int>(train_means.rows);
  std::fill(ds.labels.begin(), ds.labels.end(), 0);
  return ds;
}

// ---------------------------------------------------------------------------
// File formats

namespace detail {

inline std::vector<unsigned char> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::string& path, const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

struct IdxHeader {
  std::vector<std::uint32_t> dims;
  std::size_t payload_offset = 0;
  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

// Only unsigned-byte payloads (type code 0x08) are supported.
inline IdxHeader parse_idx_header(const std::vector<unsigned char>& b, const std::string& path) {
  if (b.size() < 4 || b[0] != 0 || b[1] != 0)
    throw std::runtime_error(path + ": bad IDX magic");
  if (b[2] != 0x08)
    throw std::runtime_error(path + ": unsupported IDX element type " + std::to_string(b[2]));
  IdxHeader h;
  const std::size_t ndim = b[3];
  if (ndim == 0) throw std::runtime_error(path + ": IDX with zero dimensions");
  h.payload_offset = 4 + 4 * ndim;
  if (b.size() < h.payload_offset) throw std::runtime_error(path + ": truncated IDX header");
  for (std::size_t i = 0; i < ndim; ++i) {
    const unsigned char* p = b.data() + 4 + 4 * i;
    h.dims.push_back((std::uint32_t{p[0]} << 24) | (std::uint32_t{p[1]} << 16) |
                     (std::uint32_t{p[2]} << 8) | std::uint32_t{p[3]});
  }
  if (b.size() != h.payload_offset + h.count())
    throw std::runtime_error(path + ": IDX payload size " +
                             std::to_string(b.size() - h.payload_offset) + " does not match dims (" +
                             std::to_string(h.count()) + " expected)");
  return h;
}

inline void append_be32(std::vector<unsigned char>& b, std::uint32_t v) {
  b.push_back(static_cast<unsigned char>(v >> 24));
  b.push_back(static_cast<unsigned char>(v >> 16));
  b.push_back(static_cast<unsigned char>(v >> 8));
  b.push_back(static_cast<unsigned char>(v));
}

inline std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

}  // namespace detail

/// Loads an IDX image file (N x rows x cols, or N x d) and its IDX label file.
/// Pixel bytes are scaled to [0, 1].
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  const auto ib = detail::read_bytes(images_path);
  const auto lb = detail::read_bytes(labels_path);
  const auto ih = detail::parse_idx_header(ib, images_path);
  const auto lh = detail::parse_idx_header(lb, labels_path);
  if (ih.dims.size() < 2) throw std::runtime_error(images_path + ": images need at least 2 dims");
  if (lh.dims.size() != 1) throw std::runtime_error(labels_path + ": labels must be 1-dimensional");
  if (ih.dims[0] != lh.dims[0])
    throw std::runtime_error("IDX image count " + std::to_string(ih.dims[0]) +
                             " != label count " + std::to_string(lh.dims[0]));
  const std::size_t n = ih.dims[0];
  const std::size_t d = ih.count() / (n == 0 ? 1 : n);
  Dataset ds;
  ds.inputs = Matrix(n, d);
  for (std::size_t i = 0; i < n * d; ++i) ds.inputs.data[i] = ib[ih.payload_offset + i] / 255.0;
  ds.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels[i] = lb[lh.payload_offset + i];
    max_label = std::max(max_label, ds.labels[i]);
  }
  ds.n_classes = std::max(2, max_label + 1);
  return ds;
}

/// Writes inputs (assumed in [0,1], multiples of 1/255) and labels back as
/// IDX files. `image_dims` gives the trailing image shape, e.g. {28, 28}.
inline void write_idx(const Dataset& ds, const std::string& images_path,
                      const std::string& labels_path, const std::vector<std::uint32_t>& image_dims) {
  std::size_t per = 1;
  for (auto d : image_dims) per *= d;
  require_same_size(per, ds.dim(), "write_idx image dims");
  std::vector<unsigned char> ib{0, 0, 0x08, static_cast<unsigned char>(image_dims.size() + 1)};
  detail::append_be32(ib, static_cast<std::uint32_t>(ds.size()));
  for (auto d : image_dims) detail::append_be32(ib, d);
  for (double v : ds.inputs.data)
    ib.push_back(static_cast<unsigned char>(std::clamp(std::lround(v * 255.0), 0L, 255L)));
  std::vector<unsigned char> lb{0, 0, 0x08, 1};
  detail::append_be32(lb, static_cast<std::uint32_t>(ds.size()));
  for (int y : ds.labels) lb.push_back(static_cast<unsigned char>(y));
  detail::write_bytes(images_path, ib);
  detail::write_bytes(labels_path, lb);
}

/// CSV without header: label first, then features. Every row must have the
/// same number of fields.
inline Dataset load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  Dataset ds;
  std::vector<double> values;
  std::string line;
  std::size_t width = 0;
  std::size_t line_no = 0;
  int max_label = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    for (std::string f; std::getline(ss, f, ',');) fields.push_back(f);
    if (fields.size() < 2)
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": need label and features");
    if (width == 0) width = fields.size();
    if (fields.size() != width)
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": expected " +
                               std::to_string(width) + " fields, got " + std::to_string(fields.size()));
    auto parse = [&](const std::string& f) {
      double v = 0.0;
      auto res = std::from_chars(f.data(), f.data() + f.size(), v);
      if (res.ec != std::errc() || res.ptr != f.data() + f.size())
        throw std::runtime_error(path + ":" + std::to_string(line_no) + ": bad number '" + f + "'");
      return v;
    };
    const double label = parse(fields[0]);
    if (label < 0 || label != std::floor(label))
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": bad label '" + fields[0] + "'");
    ds.labels.push_back(static_cast<int>(label));
    max_label = std::max(max_label, ds.labels.back());
    for (std::size_t i = 1; i < fields.size(); ++i) values.push_back(parse(fields[i]));
  }
  if (ds.labels.empty()) throw std::runtime_error(path + ": no rows");
  ds.inputs.rows = ds.labels.size();
  ds.inputs.cols = width - 1;
  ds.inputs.data = std::move(values);
  ds.n_classes = std::max(2, max_label + 1);
  return ds;
}

inline void write_csv(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out << ds.labels[i];
    for (double v : ds.inputs.row(i)) out << ',' << detail::format_double(v);
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Partitioners. These look at labels only, never at features.

inline nlohmann::json to_json(const PartitionPlan& plan) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& c : plan.clients) j.push_back(c);
  return {{"clients", j}};
}

/// Sort by label, cut into n_clients * shards_per_client equal shards (the
/// remainder is dropped) and deal shards_per_client random shards to each client.
inline PartitionPlan shard_partition(std::span<const int> labels, int n_clients,
                                     int shards_per_client, std::uint64_t seed) {
  require(n_clients > 0 && shards_per_client > 0, "shard_partition: counts must be positive");
  const std::size_t n_shards = static_cast<std::size_t>(n_clients) * shards_per_client;
  const std::size_t shard_size = labels.size() / n_shards;
  if (shard_size == 0)
    throw std::invalid_argument("shard_partition: " + std::to_string(labels.size()) +
                                " examples cannot fill " + std::to_string(n_shards) + " shards");
  std::vector<std::size_t> order(labels.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return labels[a] < labels[b]; });
  std::vector<std::size_t> shard_ids(n_shards);
  std::iota(shard_ids.begin(), shard_ids.end(), 0);
  Rng rng = make_rng(seed, "shard_partition");
  std::shuffle(shard_ids.begin(), shard_ids.end(), rng);

  PartitionPlan plan;
  plan.clients.resize(n_clients);
  for (std::size_t s = 0; s < n_shards; ++s) {
    auto& dst = plan.clients[s / shards_per_client];
    const std::size_t begin = shard_ids[s] * shard_size;
    dst.insert(dst.end(), order.begin() + begin, order.begin() + begin + shard_size);
  }
  for (auto& c : plan.clients) std::sort(c.begin(), c.end());
  return plan;
}

inline PartitionPlan shard_partition(const Dataset& ds, int n_clients, int shards_per_client,
                                     std::uint64_t seed) {
  return shard_partition(ds.labels, n_clients, shards_per_client, seed);
}

inline PartitionPlan iid_partition(std::size_t n, int n_clients, std::uint64_t seed) {
  require(n_clients > 0 && n >= static_cast<std::size_t>(n_clients),
          "iid_partition: need at least one example per client");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, "iid_partition");
  std::shuffle(order.begin(), order.end(), rng);
  PartitionPlan plan;
  plan.clients.resize(n_clients);
  for (std::size_t i = 0; i < n; ++i) plan.clients[i % n_clients].push_back(order[i]);
  for (auto& c : plan.clients) std::sort(c.begin(), c.end());
  return plan;
}

namespace detail {

// Splits `pool` among `owners` at uniformly sampled slice indices.
inline void slice_among(std::vector<std::size_t> pool, const std::vector<int>& owners, Rng& rng,
                        PartitionPlan& plan) {
  if (owners.empty()) return;
  std::shuffle(pool.begin(), pool.end(), rng);
  std::uniform_int_distribution<std::size_t> cut(0, pool.size());
  std::vector<std::size_t> cuts(owners.size() - 1);
  for (auto& c : cuts) c = cut(rng);
  std::sort(cuts.begin(), cuts.end());
  cuts.insert(cuts.begin(), 0);
  cuts.push_back(pool.size());
  for (std::size_t k = 0; k < owners.size(); ++k) {
    auto& dst = plan.clients[owners[k]];
    dst.insert(dst.end(), pool.begin() + cuts[k], pool.begin() + cuts[k + 1]);
  }
}

inline constexpr std::size_t kMinClientSize = 2;
inline constexpr int kMaxSliceAttempts = 100;

inline void finish_plan(PartitionPlan& plan, const char* who) {
  for (std::size_t k = 0; k < plan.clients.size(); ++k) {
    if (plan.clients[k].size() < kMinClientSize)
      throw std::invalid_argument(std::string(who) + ": client " + std::to_string(k) + " received only " +
                                  std::to_string(plan.clients[k].size()) + " examples");
    std::sort(plan.clients[k].begin(), plan.clients[k].end());
  }
}

template <typename Attempt>
PartitionPlan retry_slicing(Attempt&& attempt, Rng& rng, const char* who) {
  PartitionPlan plan;
  for (int a = 0; a < kMaxSliceAttempts; ++a) {
    plan = attempt(rng);
    if (std::all_of(plan.clients.begin(), plan.clients.end(),
                    [](const auto& c) { return c.size() >= kMinClientSize; }))
      break;
  }
  finish_plan(plan, who);
  return plan;
}

}  // namespace detail

/// Every client owns a random subset of `classes_per_client` classes; each
/// class's examples are divided among its owners at uniformly random slice
/// points, which produces the quantity disparity between clients.
inline PartitionPlan class_skew_partition(const Dataset& ds, int n_clients, int classes_per_client,
                                          std::uint64_t seed) {
  require(n_clients > 0, "class_skew_partition: n_clients must be positive");
  require(classes_per_client >= 1 && classes_per_client <= ds.n_classes,
          "class_skew_partition: classes_per_client must be in [1, C]");
  std::vector<std::vector<std::size_t>> by_class(ds.n_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

  Rng rng = make_rng(seed, "class_skew_partition");
  std::vector<std::vector<int>> owners(ds.n_classes);
  std::vector<int> classes(ds.n_classes);
  std::iota(classes.begin(), classes.end(), 0);
  for (int k = 0; k < n_clients; ++k) {
    std::shuffle(classes.begin(), classes.end(), rng);
    for (int c = 0; c < classes_per_client; ++c) owners[classes[c]].push_back(k);
  }
  auto attempt = [&](Rng& r) {
    PartitionPlan plan;
    plan.clients.resize(n_clients);
    for (int c = 0; c < ds.n_classes; ++c) detail::slice_among(by_class[c], owners[c], r, plan);
    return plan;
  };
  return detail::retry_slicing(attempt, rng, "class_skew_partition");
}

/// Labels of each client's chosen classes, for building client-matched test sets.
inline std::vector<std::set<int>> client_label_sets(const Dataset& ds, const PartitionPlan& plan) {
  std::vector<std::set<int>> out(plan.n_clients());
  for (std::size_t k = 0; k < plan.n_clients(); ++k)
    for (auto i : plan.clients[k]) out[k].insert(ds.labels[i]);
  return out;
}

struct ConceptDriftPlan {
  PartitionPlan plan;
  std::vector<std::vector<int>> chosen_subclasses;  // per client, one per superclass
};

/// Each client picks one subclass per superclass and draws data only from
/// its picks; the learning task is superclass prediction (see
/// to_superclass_labels).
inline ConceptDriftPlan concept_drift_partition(const Dataset& ds, int n_clients, std::uint64_t seed) {
  require(ds.has_superclasses(), "concept_drift_partition: dataset has no superclass map");
  require(n_clients > 0, "concept_drift_partition: n_clients must be positive");
  const int n_super = ds.n_superclasses();
  std::vector<std::vector<int>> subs_of(n_super);
  for (int s = 0; s < ds.n_classes; ++s) subs_of[ds.superclass_of[s]].push_back(s);
  std::vector<std::vector<std::size_t>> by_class(ds.n_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

  Rng rng = make_rng(seed, "concept_drift_partition");
  ConceptDriftPlan out;
  out.chosen_subclasses.resize(n_clients);
  std::vector<std::vector<int>> owners(ds.n_classes);
  for (int k = 0; k < n_clients; ++k)
    for (int g = 0; g < n_super; ++g) {
      std::uniform_int_distribution<std::size_t> pick(0, subs_of[g].size() - 1);
      const int s = subs_of[g][pick(rng)];
      out.chosen_subclasses[k].push_back(s);
      owners[s].push_back(k);
    }
  auto attempt = [&](Rng& r) {
    PartitionPlan plan;
    plan.clients.resize(n_clients);
    for (int s = 0; s < ds.n_classes; ++s) detail::slice_among(by_class[s], owners[s], r, plan);
    return plan;
  };
  out.plan = detail::retry_slicing(attempt, rng, "concept_drift_partition");
  return out;
}

/// Rows of `ds` whose label is in `keep`.
inline Dataset filter_labels(const Dataset& ds, const std::set<int>& keep) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (keep.count(ds.labels[i])) idx.push_back(i);
  return subset(ds, idx);
}

}  // namespace fedivon::data
