// SPDX-License-Identifier: Apache-2.0
#include "ttaforge/stats.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "ttaforge/backbone.hpp"
#include "ttaforge/error.hpp"
#include "ttaforge/kernels.hpp"

namespace ttaforge {

namespace {

void overall_moments(const Tensor& x, int max_order, Tensor& mu, std::vector<Tensor>& moments) {
  const std::size_t n = x.rows(), d = x.cols();
  mu = Tensor({d});
  const int extra = std::max(max_order - 1, 0);
  std::vector<double> flat(static_cast<std::size_t>(extra) * d);
  kernels::column_moments(x.data(), n, d, max_order, mu.data(), flat.data());
  moments.clear();
  for (int k = 0; k < extra; ++k) {
    auto first = flat.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(k) * d);
    moments.emplace_back(Shape{d}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(d)));
  }
}

// Per-class means; rows are summed in ascending order.
std::map<int, std::pair<std::vector<double>, std::int64_t>> class_sums(const Tensor& x, std::span<const int> labels) {
  std::map<int, std::pair<std::vector<double>, std::int64_t>> acc;
  const std::size_t d = x.cols();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto& [sum, count] = acc[labels[i]];
    if (sum.empty()) sum.assign(d, 0.0);
    auto r = x.row(i);
    for (std::size_t j = 0; j < d; ++j) sum[j] += r[j];
    ++count;
  }
  return acc;
}

void check_features(const Tensor& x, std::size_t n_labels, const char* op) {
  if (x.ndim() != 2) throw ShapeError(std::string(op) + ": features must be a [N, D] matrix");
  if (x.rows() != n_labels) throw ShapeError(std::string(op) + ": one label per feature row required");
}

}  // namespace

Tensor normalize_features(const Tensor& features, double eps) {
  if (features.ndim() != 2) throw ShapeError("normalize_features: expected a [N, D] matrix");
  Tensor out(features.shape());
  for (std::size_t i = 0; i < features.rows(); ++i) {
    std::vector<double> y = ln_no_affine(features.row(i), eps);
    auto dst = out.row(i);
    for (std::size_t j = 0; j < y.size(); ++j) dst[j] = std::tanh(y[j]);
  }
  return out;
}

const Tensor& SourceStatistics::moment(int k) const {
  if (k < 2 || k > max_order) throw Error("moment order " + std::to_string(k) + " not stored");
  return central_moments[static_cast<std::size_t>(k - 2)];
}

const Tensor& TargetBatchStatistics::moment(int k) const {
  if (k < 2 || static_cast<std::size_t>(k - 2) >= central_moments.size()) {
    throw Error("moment order " + std::to_string(k) + " not computed");
  }
  return central_moments[static_cast<std::size_t>(k - 2)];
}

std::span<const double> TargetBatchStatistics::centroid(int c) const {
  auto it = std::lower_bound(classes.begin(), classes.end(), c);
  if (it == classes.end() || *it != c) throw Error("pseudo-class " + std::to_string(c) + " not in batch");
  return class_centroids.row(static_cast<std::size_t>(it - classes.begin()));
}

SourceStatistics source_statistics(const Tensor& features, std::span<const int> labels, int max_order,
                                   std::size_t num_classes, bool normalized) {
  check_features(features, labels.size(), "source_statistics");
  if (max_order < 1) throw ConfigError("source_statistics: K must be >= 1");
  if (num_classes == 0) throw ConfigError("source_statistics: need at least one class");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) throw Error("source_statistics: label out of range");
  }
  SourceStatistics s;
  s.dim = features.cols();
  s.max_order = max_order;
  s.num_classes = num_classes;
  s.normalized = normalized;
  overall_moments(features, max_order, s.mu, s.central_moments);

  auto sums = class_sums(features, labels);
  s.class_centroids = Tensor({num_classes, s.dim});
  s.counts.assign(num_classes, 0);
  for (std::size_t c = 0; c < num_classes; ++c) {
    auto it = sums.find(static_cast<int>(c));
    if (it == sums.end()) throw Error("source_statistics: class " + std::to_string(c) + " has no samples");
    const auto& [sum, count] = it->second;
    auto row = s.class_centroids.row(c);
    for (std::size_t j = 0; j < s.dim; ++j) row[j] = sum[j] / static_cast<double>(count);
    s.counts[c] = count;
  }
  return s;
}

TargetBatchStatistics batch_statistics(const Tensor& features, std::span<const int> pseudo_labels, int max_order) {
  check_features(features, pseudo_labels.size(), "batch_statistics");
  if (pseudo_labels.empty()) throw Error("batch_statistics: empty batch");
  if (max_order < 1) throw ConfigError("batch_statistics: K must be >= 1");
  TargetBatchStatistics t;
  overall_moments(features, max_order, t.mu, t.central_moments);
  auto sums = class_sums(features, pseudo_labels);
  const std::size_t d = features.cols();
  t.class_centroids = Tensor({sums.size(), d});
  std::size_t i = 0;
  for (const auto& [c, entry] : sums) {
    const auto& [sum, count] = entry;
    t.classes.push_back(c);
    t.counts.push_back(count);
    auto row = t.class_centroids.row(i++);
    for (std::size_t j = 0; j < d; ++j) row[j] = sum[j] / static_cast<double>(count);
  }
  return t;
}

Container statistics_to_container(const SourceStatistics& s) {
  Container c;
  c.kind = "source-statistics";
  c.ints = {{"dim", static_cast<std::int64_t>(s.dim)},
            {"max_order", s.max_order},
            {"num_classes", static_cast<std::int64_t>(s.num_classes)},
            {"normalized", s.normalized ? 1 : 0}};
  Tensor counts({s.num_classes});
  for (std::size_t i = 0; i < s.num_classes; ++i) counts[i] = static_cast<double>(s.counts[i]);
  c.add("counts", std::move(counts));
  c.add("mu", s.mu);
  for (int k = 2; k <= s.max_order; ++k) c.add("moment." + std::to_string(k), s.moment(k));
  c.add("class_centroids", s.class_centroids);
  return c;
}

SourceStatistics statistics_from_container(const Container& c) {
  if (c.kind != "source-statistics") throw FormatError("not a source-statistics container");
  SourceStatistics s;
  const std::int64_t dim = c.integer("dim"), k = c.integer("max_order"), classes = c.integer("num_classes");
  if (dim <= 0 || k < 1 || classes <= 0) throw FormatError("statistics header out of range");
  s.dim = static_cast<std::size_t>(dim);
  s.max_order = static_cast<int>(k);
  s.num_classes = static_cast<std::size_t>(classes);
  s.normalized = c.integer("normalized") != 0;
  s.mu = c.array("mu");
  s.mu.expect_shape({s.dim}, "statistics mu");
  for (int order = 2; order <= s.max_order; ++order) {
    s.central_moments.push_back(c.array("moment." + std::to_string(order)));
    s.central_moments.back().expect_shape({s.dim}, "statistics moment");
  }
  s.class_centroids = c.array("class_centroids");
  s.class_centroids.expect_shape({s.num_classes, s.dim}, "statistics centroids");
  const Tensor& counts = c.array("counts");
  counts.expect_shape({s.num_classes}, "statistics counts");
  for (double v : counts.values()) s.counts.push_back(static_cast<std::int64_t>(v));
  return s;
}

void save_statistics(const SourceStatistics& stats, const std::filesystem::path& path) {
  write_container(statistics_to_container(stats), path);
}

SourceStatistics load_statistics(const std::filesystem::path& path) {
  return statistics_from_container(read_container(path, "source-statistics"));
}

}  // namespace ttaforge
