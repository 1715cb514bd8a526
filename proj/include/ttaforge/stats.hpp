// SPDX-License-Identifier: Apache-2.0
#pragma once

// Feature normalization h = tanh(LN-without-affine(f)) and the moment
// statistics that the alignment losses compare: overall mean, elementwise
// central moments of order 2..K, and per-class centroids.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ttaforge/container.hpp"
#include "ttaforge/tensor.hpp"

namespace ttaforge {

inline constexpr double kDefaultLnEps = 1e-6;

/// Row-wise layer norm without affine, then elementwise tanh. Output lies in (-1, 1).
Tensor normalize_features(const Tensor& features, double eps = kDefaultLnEps);

struct SourceStatistics {
  std::size_t dim = 0;
  int max_order = 1;  // K
  std::size_t num_classes = 0;
  Tensor mu;                            // [dim]
  std::vector<Tensor> central_moments;  // orders 2..K, each [dim]
  Tensor class_centroids;               // [num_classes, dim]
  std::vector<std::int64_t> counts;     // samples per class
  bool normalized = true;               // built from normalized features

  /// Central moment of order k (2 <= k <= max_order).
  const Tensor& moment(int k) const;
};

struct TargetBatchStatistics {
  Tensor mu;
  std::vector<Tensor> central_moments;  // orders 2..K
  std::vector<int> classes;             // C': pseudo-classes present, ascending
  Tensor class_centroids;               // [|C'|, dim], row i belongs to classes[i]
  std::vector<std::int64_t> counts;     // per entry of `classes`

  const Tensor& moment(int k) const;
  /// Row of class_centroids for pseudo-class c; throws if c is not in C'.
  std::span<const double> centroid(int c) const;
};

/// Statistics over labelled source features. Every class in [0, num_classes)
/// must occur at least once; max_order must be >= 1.
SourceStatistics source_statistics(const Tensor& features, std::span<const int> labels, int max_order,
                                   std::size_t num_classes, bool normalized = true);

/// Same formulas over a target batch with pseudo-labels; centroids only for present classes.
TargetBatchStatistics batch_statistics(const Tensor& features, std::span<const int> pseudo_labels, int max_order);

Container statistics_to_container(const SourceStatistics& stats);
SourceStatistics statistics_from_container(const Container& c);
void save_statistics(const SourceStatistics& stats, const std::filesystem::path& path);
SourceStatistics load_statistics(const std::filesystem::path& path);

}  // namespace ttaforge
