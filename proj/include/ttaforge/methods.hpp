// SPDX-License-Identifier: Apache-2.0
#pragma once

// Test-time adaptation objectives and the online predict-then-update loop.
//
// Gradient-based methods: Tent, PL, SHOT-IM, TFA(-), CFA-F, CFA-C, CFA.
// Gradient-free: T3A. Source is the unadapted baseline.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ttaforge/autodiff.hpp"
#include "ttaforge/backbone.hpp"
#include "ttaforge/container.hpp"
#include "ttaforge/stats.hpp"
#include "ttaforge/tensor.hpp"

namespace ttaforge {

enum class Method { Source, Tent, PL, ShotIM, TFA, T3A, CFA_F, CFA_C, CFA };

Method parse_method(std::string_view name);
std::string_view to_string(Method m);
bool is_gradient_method(Method m);
bool uses_source_statistics(Method m);  // CFA variants
bool uses_feature_gaussian(Method m);   // TFA(-)

enum class CfaVariant { Full, OverallOnly, ClassOnly };

struct AdaptConfig {
  Method method = Method::CFA;
  double lr = 1e-3;
  double momentum = 0.9;
  std::optional<double> clip_norm = 1.0;
  std::size_t batch_size = 64;
  double lambda = 1.0;
  int k_moments = 3;
  ModulationMode modulation = ModulationMode::LN;
  double tfa_beta1 = 1.0;
  double tfa_beta2 = 1.0;
  std::size_t t3a_filter_size = 100;
  std::uint64_t seed = 0;
  /// Apply tanh(LN-without-affine) before computing alignment statistics.
  bool normalize_features = true;
  double ln_eps = kDefaultLnEps;

  void validate() const;
};

// --- moment alignment on precomputed statistics ----------------------------

/// 1/2 ||mu_s - mu_t|| + sum_{k=2..K} 2^-k ||M_k^s - M_k^t||.
double cmd_loss(const SourceStatistics& src, const TargetBatchStatistics& tgt, int max_order);
/// 1/(2|C'|) sum_{c in C'} ||mu_c^s - mu_c^t||.
double class_conditional_loss(const SourceStatistics& src, const TargetBatchStatistics& tgt);
double cfa_loss(const SourceStatistics& src, const TargetBatchStatistics& tgt, double lambda, int max_order,
                CfaVariant variant);

// --- differentiable objectives --------------------------------------------

/// The feature tap the alignment statistics are computed on.
ad::Var alignment_features(const ad::Var& features, bool normalize, double eps);

ad::Var cmd_loss(const SourceStatistics& src, const ad::Var& h, int max_order);
ad::Var class_conditional_loss(const SourceStatistics& src, const ad::Var& h, std::span<const int> pseudo_labels);
ad::Var cfa_loss(const SourceStatistics& src, const ad::Var& h, std::span<const int> pseudo_labels, double lambda,
                 int max_order, CfaVariant variant);

/// Mean prediction entropy (natural log).
ad::Var tent_loss(const ad::Var& logits);
/// Mean cross-entropy against the (constant) argmax labels.
ad::Var pl_loss(const ad::Var& logits);
/// Mean per-sample entropy + sum_c pbar_c log pbar_c, pbar = batch-mean prediction.
ad::Var shot_im_loss(const ad::Var& logits);

/// Mean and unbiased covariance of raw (unnormalized) features.
struct FeatureGaussian {
  Tensor mean;  // [D]
  Tensor cov;   // [D, D]
};

/// Divisor N-1 (1 when N == 1).
FeatureGaussian feature_gaussian(const Tensor& features);
double tfa_loss(const Tensor& src_mean, const Tensor& src_cov, const Tensor& tgt_mean, const Tensor& tgt_cov,
                double beta1, double beta2);
ad::Var tfa_loss(const FeatureGaussian& src, const ad::Var& features, double beta1, double beta2);

void add_feature_gaussian(Container& c, const FeatureGaussian& g);
std::optional<FeatureGaussian> feature_gaussian_from_container(const Container& c);

// --- T3A -------------------------------------------------------------------

struct T3AState {
  struct Support {
    std::vector<double> feature;
    double entropy;
    std::uint64_t order;  // insertion counter, breaks entropy ties
  };

  std::size_t filter_size = 100;
  std::size_t dim = 0;
  std::vector<std::vector<Support>> supports;  // per class, ascending (entropy, order)
  std::size_t absorbed_batches = 0;
  std::uint64_t next_order = 0;

  /// [C, D] mean of each class's retained supports (zero row when empty).
  Tensor prototypes() const;
};

/// Seeds each class's supports with the classifier weight vectors, labelled by
/// the classifier's own prediction on them.
T3AState t3a_init(const Model& model, std::size_t filter_size);

/// Predicts the batch with the current prototype classifier (the model's own
/// argmax before any batch has been absorbed), then absorbs the batch:
/// each sample joins its pseudo-class with its prediction entropy and every
/// class keeps its `filter_size` lowest-entropy supports.
std::vector<int> t3a_step(T3AState& state, const Tensor& features, const Tensor& logits);

// --- online loop -------------------------------------------------------------

struct AdaptResult {
  std::vector<std::vector<int>> predictions;  // per batch
  std::vector<double> losses;                 // per batch (empty for gradient-free methods)
};

/// Source statistics needed by the alignment methods.
struct AlignmentSources {
  const SourceStatistics* stats = nullptr;
  const FeatureGaussian* gaussian = nullptr;
};

/// Runs the method over the stream: for each batch predict, then compute the
/// loss on the same batch and update the modulation parameters once.
/// Throws CatastrophicFailure when a loss or gradient turns non-finite.
AdaptResult adapt_online(Model& model, std::span<const Tensor> batches, const AdaptConfig& config,
                         AlignmentSources sources = {});

/// The loss `adapt_online` would minimise on one batch, as a graph.
ad::Var method_loss(const AdaptConfig& config, const ForwardResult& out, AlignmentSources sources);

}  // namespace ttaforge

namespace ttaforge {
/// One-line formula of the objective, echoed into run reports.
std::string_view objective_formula(Method m);
}  // namespace ttaforge
