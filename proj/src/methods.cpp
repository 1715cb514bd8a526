// SPDX-License-Identifier: Apache-2.0
#include "ttaforge/methods.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

#include "ttaforge/error.hpp"
#include "ttaforge/optim.hpp"

namespace ttaforge {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(), [](unsigned char c) { return std::tolower(c); });
  return out;
}

double diff_norm(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

void check_order(const SourceStatistics& src, int max_order) {
  if (max_order < 1) throw ConfigError("K must be >= 1");
  if (max_order > src.max_order) {
    throw ConfigError("K = " + std::to_string(max_order) + " exceeds the stored moment order " +
                      std::to_string(src.max_order));
  }
}

double row_entropy(std::span<const double> logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  const double lse = mx + std::log(z);
  double h = 0.0;
  for (double v : logits) {
    const double lp = v - lse;
    h -= std::exp(lp) * lp;
  }
  return h;
}

ad::Var constant_row_block(const Tensor& rows_src, std::span<const int> classes) {
  const std::size_t d = rows_src.cols();
  Tensor out({classes.size(), d});
  for (std::size_t i = 0; i < classes.size(); ++i) {
    auto r = rows_src.row(static_cast<std::size_t>(classes[i]));
    std::copy(r.begin(), r.end(), out.row(i).begin());
  }
  return ad::Var::constant(std::move(out));
}

}  // namespace

Method parse_method(std::string_view name) {
  const std::string s = lower(name);
  if (s == "source") return Method::Source;
  if (s == "tent") return Method::Tent;
  if (s == "pl") return Method::PL;
  if (s == "shot-im" || s == "shot_im" || s == "shotim") return Method::ShotIM;
  if (s == "tfa-" || s == "tfa" || s == "tfa(-)") return Method::TFA;
  if (s == "t3a") return Method::T3A;
  if (s == "cfa-f" || s == "cfa_f") return Method::CFA_F;
  if (s == "cfa-c" || s == "cfa_c") return Method::CFA_C;
  if (s == "cfa") return Method::CFA;
  throw ConfigError("unknown method '" + std::string(name) + "'");
}

std::string_view to_string(Method m) {
  switch (m) {
    case Method::Source: return "Source";
    case Method::Tent: return "Tent";
    case Method::PL: return "PL";
    case Method::ShotIM: return "SHOT-IM";
    case Method::TFA: return "TFA(-)";
    case Method::T3A: return "T3A";
    case Method::CFA_F: return "CFA-F";
    case Method::CFA_C: return "CFA-C";
    case Method::CFA: return "CFA";
  }
  return "?";
}

std::string_view objective_formula(Method m) {
  switch (m) {
    case Method::Source: return "no adaptation";
    case Method::Tent: return "mean_i H(softmax(z_i)), H(p) = -sum_c p_c ln p_c";
    case Method::PL: return "mean_i -ln softmax(z_i)[argmax z_i], label held constant";
    case Method::ShotIM: return "mean_i H(softmax(z_i)) + sum_c pbar_c ln pbar_c, pbar = mean_i softmax(z_i)";
    case Method::TFA: return "beta1 ||mu_s - mu_t||_2^2 + beta2 ||Sigma_s - Sigma_t||_F^2 on raw features, covariance divisor n-1";
    case Method::T3A: return "gradient-free prototype classifier, prototypes = mean of lowest-entropy supports";
    case Method::CFA_F: return "1/2 ||mu_s - mu_t|| + sum_{k=2..K} 2^-k ||M_k^s - M_k^t||, h = tanh(LN(f))";
    case Method::CFA_C: return "1/(2|C'|) sum_{c in C'} ||mu_c^s - mu_c^t||, h = tanh(LN(f))";
    case Method::CFA: return "L_F + lambda L_C";
  }
  return "?";
}

bool is_gradient_method(Method m) { return m != Method::Source && m != Method::T3A; }
bool uses_source_statistics(Method m) { return m == Method::CFA || m == Method::CFA_F || m == Method::CFA_C; }
bool uses_feature_gaussian(Method m) { return m == Method::TFA; }

void AdaptConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
  if (batch_size == 0) throw ConfigError("batch size must be >= 1");
  if (!(lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (k_moments < 1) throw ConfigError("K must be >= 1");
  if (t3a_filter_size == 0) throw ConfigError("T3A filter size must be >= 1");
  if (!(ln_eps > 0.0)) throw ConfigError("layer norm eps must be positive");
}

// --- statistics-level losses -------------------------------------------------

double cmd_loss(const SourceStatistics& src, const TargetBatchStatistics& tgt, int max_order) {
  check_order(src, max_order);
  if (tgt.mu.size() != src.dim) throw ShapeError("cmd_loss: feature dimension mismatch");
  if (static_cast<int>(tgt.central_moments.size()) + 1 < max_order) {
    throw ConfigError("cmd_loss: target statistics lack order " + std::to_string(max_order));
  }
  double loss = 0.5 * diff_norm(src.mu.values(), tgt.mu.values());
  for (int k = 2; k <= max_order; ++k) {
    loss += std::ldexp(1.0, -k) * diff_norm(src.moment(k).values(), tgt.moment(k).values());
  }
  return loss;
}

double class_conditional_loss(const SourceStatistics& src, const TargetBatchStatistics& tgt) {
  if (tgt.classes.empty()) throw Error("class_conditional_loss: no pseudo-classes in batch");
  if (tgt.class_centroids.cols() != src.dim) throw ShapeError("class_conditional_loss: feature dimension mismatch");
  double total = 0.0;
  for (std::size_t i = 0; i < tgt.classes.size(); ++i) {
    const int c = tgt.classes[i];
    if (c < 0 || static_cast<std::size_t>(c) >= src.num_classes) {
      throw Error("class_conditional_loss: pseudo-class " + std::to_string(c) + " unknown to source statistics");
    }
    total += diff_norm(src.class_centroids.row(static_cast<std::size_t>(c)), tgt.class_centroids.row(i));
  }
  return total / (2.0 * static_cast<double>(tgt.classes.size()));
}

double cfa_loss(const SourceStatistics& src, const TargetBatchStatistics& tgt, double lambda, int max_order,
                CfaVariant variant) {
  switch (variant) {
    case CfaVariant::OverallOnly: return cmd_loss(src, tgt, max_order);
    case CfaVariant::ClassOnly: return class_conditional_loss(src, tgt);
    case CfaVariant::Full: return cmd_loss(src, tgt, max_order) + lambda * class_conditional_loss(src, tgt);
  }
  return 0.0;
}

// --- differentiable losses ---------------------------------------------------

ad::Var alignment_features(const ad::Var& features, bool normalize, double eps) {
  return normalize ? ad::tanh(ad::normalize_rows(features, eps)) : features;
}

ad::Var cmd_loss(const SourceStatistics& src, const ad::Var& h, int max_order) {
  check_order(src, max_order);
  if (h.value().ndim() != 2 || h.value().cols() != src.dim) throw ShapeError("cmd_loss: feature dimension mismatch");
  ad::Var mu_t = ad::mean_rows(h);
  ad::Var loss = 0.5 * ad::norm(ad::Var::constant(src.mu) - mu_t);
  if (max_order >= 2) {
    ad::Var centered = ad::sub_row(h, mu_t);
    for (int k = 2; k <= max_order; ++k) {
      ad::Var m_k = ad::mean_rows(ad::pow(centered, k));
      loss = loss + std::ldexp(1.0, -k) * ad::norm(ad::Var::constant(src.moment(k)) - m_k);
    }
  }
  return loss;
}

ad::Var class_conditional_loss(const SourceStatistics& src, const ad::Var& h, std::span<const int> pseudo_labels) {
  const std::size_t batch = h.value().rows();
  if (pseudo_labels.size() != batch || batch == 0) throw ShapeError("class_conditional_loss: one label per row");
  if (h.value().cols() != src.dim) throw ShapeError("class_conditional_loss: feature dimension mismatch");
  std::map<int, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < batch; ++i) {
    const int c = pseudo_labels[i];
    if (c < 0 || static_cast<std::size_t>(c) >= src.num_classes) {
      throw Error("class_conditional_loss: pseudo-class " + std::to_string(c) + " unknown to source statistics");
    }
    members[c].push_back(i);
  }
  // Centroids as a constant averaging matrix times h: the partition carries no gradient.
  std::vector<int> classes;
  Tensor avg({members.size(), batch});
  std::size_t r = 0;
  for (const auto& [c, rows] : members) {
    classes.push_back(c);
    const double w = 1.0 / static_cast<double>(rows.size());
    for (std::size_t i : rows) avg.at(r, i) = w;
    ++r;
  }
  ad::Var centroids = ad::matmul(ad::Var::constant(std::move(avg)), h);
  ad::Var gaps = ad::row_norms(constant_row_block(src.class_centroids, classes) - centroids);
  return ad::scale(ad::sum(gaps), 1.0 / (2.0 * static_cast<double>(classes.size())));
}

ad::Var cfa_loss(const SourceStatistics& src, const ad::Var& h, std::span<const int> pseudo_labels, double lambda,
                 int max_order, CfaVariant variant) {
  switch (variant) {
    case CfaVariant::OverallOnly: return cmd_loss(src, h, max_order);
    case CfaVariant::ClassOnly: return class_conditional_loss(src, h, pseudo_labels);
    case CfaVariant::Full:
      return cmd_loss(src, h, max_order) + lambda * class_conditional_loss(src, h, pseudo_labels);
  }
  throw Error("unknown CFA variant");
}

ad::Var tent_loss(const ad::Var& logits) {
  ad::Var plogp = ad::softmax_rows(logits) * ad::log_softmax_rows(logits);
  return ad::scale(ad::mean(ad::sum_cols(plogp)), -1.0);
}

ad::Var pl_loss(const ad::Var& logits) {
  std::vector<int> labels = argmax_rows(logits.value());
  return cross_entropy(logits, labels);
}

ad::Var shot_im_loss(const ad::Var& logits) {
  ad::Var probs = ad::softmax_rows(logits);
  ad::Var entropy = ad::scale(ad::mean(ad::sum_cols(probs * ad::log_softmax_rows(logits))), -1.0);
  ad::Var neg_marginal_entropy = ad::sum(ad::xlogx(ad::mean_rows(probs)));
  return entropy + neg_marginal_entropy;
}

FeatureGaussian feature_gaussian(const Tensor& features) {
  if (features.ndim() != 2) throw ShapeError("feature_gaussian: expected [N, D]");
  const std::size_t n = features.rows(), d = features.cols();
  FeatureGaussian g{Tensor({d}), Tensor({d, d})};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) g.mean[j] += features.at(i, j);
  for (double& v : g.mean.values()) v /= static_cast<double>(n);
  const double div = n > 1 ? static_cast<double>(n - 1) : 1.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double ca = features.at(i, a) - g.mean[a];
      for (std::size_t b = 0; b < d; ++b) g.cov.at(a, b) += ca * (features.at(i, b) - g.mean[b]);
    }
  for (double& v : g.cov.values()) v /= div;
  return g;
}

double tfa_loss(const Tensor& src_mean, const Tensor& src_cov, const Tensor& tgt_mean, const Tensor& tgt_cov,
                double beta1, double beta2) {
  if (src_mean.shape() != tgt_mean.shape() || src_cov.shape() != tgt_cov.shape() ||
      src_cov.shape() != Shape{src_mean.size(), src_mean.size()}) {
    throw ShapeError("tfa_loss: dimension mismatch");
  }
  double dm = 0.0, dc = 0.0;
  for (std::size_t i = 0; i < src_mean.size(); ++i) dm += (src_mean[i] - tgt_mean[i]) * (src_mean[i] - tgt_mean[i]);
  for (std::size_t i = 0; i < src_cov.size(); ++i) dc += (src_cov[i] - tgt_cov[i]) * (src_cov[i] - tgt_cov[i]);
  return beta1 * dm + beta2 * dc;
}

ad::Var tfa_loss(const FeatureGaussian& src, const ad::Var& features, double beta1, double beta2) {
  const std::size_t n = features.value().rows();
  if (features.value().ndim() != 2 || features.value().cols() != src.mean.size()) {
    throw ShapeError("tfa_loss: dimension mismatch");
  }
  ad::Var mu = ad::mean_rows(features);
  ad::Var centered = ad::sub_row(features, mu);
  const double div = n > 1 ? static_cast<double>(n - 1) : 1.0;
  ad::Var cov = ad::scale(ad::matmul(ad::transpose(centered), centered), 1.0 / div);
  ad::Var mean_term = ad::sum(ad::pow(ad::Var::constant(src.mean) - mu, 2));
  ad::Var cov_term = ad::sum(ad::pow(ad::Var::constant(src.cov) - cov, 2));
  return beta1 * mean_term + beta2 * cov_term;
}

void add_feature_gaussian(Container& c, const FeatureGaussian& g) {
  c.add("tfa.mean", g.mean);
  c.add("tfa.cov", g.cov);
}

std::optional<FeatureGaussian> feature_gaussian_from_container(const Container& c) {
  if (!c.has_array("tfa.mean") || !c.has_array("tfa.cov")) return std::nullopt;
  FeatureGaussian g{c.array("tfa.mean"), c.array("tfa.cov")};
  const std::size_t d = g.mean.size();
  g.cov.expect_shape({d, d}, "tfa covariance");
  return g;
}

// --- T3A ---------------------------------------------------------------------

Tensor T3AState::prototypes() const {
  Tensor out({supports.size(), dim});
  for (std::size_t c = 0; c < supports.size(); ++c) {
    if (supports[c].empty()) continue;
    auto row = out.row(c);
    for (const auto& s : supports[c])
      for (std::size_t j = 0; j < dim; ++j) row[j] += s.feature[j];
    for (double& v : row) v /= static_cast<double>(supports[c].size());
  }
  return out;
}

namespace {

void absorb(T3AState& state, std::span<const double> feature, std::span<const double> logits) {
  std::size_t label = 0;
  for (std::size_t j = 1; j < logits.size(); ++j) {
    if (logits[j] > logits[label]) label = j;
  }
  auto& list = state.supports[label];
  T3AState::Support s{std::vector<double>(feature.begin(), feature.end()), row_entropy(logits), state.next_order++};
  auto pos = std::upper_bound(list.begin(), list.end(), s, [](const auto& a, const auto& b) {
    return a.entropy < b.entropy || (a.entropy == b.entropy && a.order < b.order);
  });
  list.insert(pos, std::move(s));
  if (list.size() > state.filter_size) list.resize(state.filter_size);
}

}  // namespace

T3AState t3a_init(const Model& model, std::size_t filter_size) {
  if (filter_size == 0) throw ConfigError("T3A filter size must be >= 1");
  const Tensor& w = model.parameter("head.weight").var.value();  // [D, C]
  const Tensor& b = model.parameter("head.bias").var.value();
  const std::size_t d = w.shape()[0], classes = w.shape()[1];
  T3AState state;
  state.filter_size = filter_size;
  state.dim = d;
  state.supports.resize(classes);
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<double> feature(d);
    for (std::size_t j = 0; j < d; ++j) feature[j] = w.at(j, c);
    std::vector<double> logits(classes);
    for (std::size_t k = 0; k < classes; ++k) {
      double z = b[k];
      for (std::size_t j = 0; j < d; ++j) z += feature[j] * w.at(j, k);
      logits[k] = z;
    }
    absorb(state, feature, logits);
  }
  return state;
}

std::vector<int> t3a_step(T3AState& state, const Tensor& features, const Tensor& logits) {
  if (features.ndim() != 2 || features.cols() != state.dim || logits.rows() != features.rows() ||
      logits.cols() != state.supports.size()) {
    throw ShapeError("t3a_step: feature/logit shapes do not match the state");
  }
  std::vector<int> preds;
  if (state.absorbed_batches == 0) {
    preds = argmax_rows(logits);
  } else {
    const Tensor proto = state.prototypes();
    Tensor scores({features.rows(), proto.rows()});
    for (std::size_t i = 0; i < features.rows(); ++i)
      for (std::size_t c = 0; c < proto.rows(); ++c) {
        double s = 0.0;
        for (std::size_t j = 0; j < state.dim; ++j) s += features.at(i, j) * proto.at(c, j);
        scores.at(i, c) = s;
      }
    preds = argmax_rows(scores);
  }
  for (std::size_t i = 0; i < features.rows(); ++i) absorb(state, features.row(i), logits.row(i));
  ++state.absorbed_batches;
  return preds;
}

// --- online loop -------------------------------------------------------------

ad::Var method_loss(const AdaptConfig& config, const ForwardResult& out, AlignmentSources sources) {
  switch (config.method) {
    case Method::Tent: return tent_loss(out.logits);
    case Method::PL: return pl_loss(out.logits);
    case Method::ShotIM: return shot_im_loss(out.logits);
    case Method::TFA:
      if (!sources.gaussian) throw ConfigError("TFA(-) needs source feature mean/covariance");
      return tfa_loss(*sources.gaussian, out.features, config.tfa_beta1, config.tfa_beta2);
    case Method::CFA:
    case Method::CFA_F:
    case Method::CFA_C: {
      if (!sources.stats) throw ConfigError(std::string(to_string(config.method)) + " needs source statistics");
      if (sources.stats->normalized != config.normalize_features) {
        throw ConfigError("source statistics normalization does not match the adaptation config");
      }
      const CfaVariant variant = config.method == Method::CFA     ? CfaVariant::Full
                                 : config.method == Method::CFA_F ? CfaVariant::OverallOnly
                                                                  : CfaVariant::ClassOnly;
      std::vector<int> pseudo = argmax_rows(out.logits.value());
      ad::Var h = alignment_features(out.features, config.normalize_features, config.ln_eps);
      return cfa_loss(*sources.stats, h, pseudo, config.lambda, config.k_moments, variant);
    }
    case Method::Source:
    case Method::T3A: break;
  }
  throw ConfigError(std::string(to_string(config.method)) + " has no gradient objective");
}

AdaptResult adapt_online(Model& model, std::span<const Tensor> batches, const AdaptConfig& config,
                         AlignmentSources sources) {
  config.validate();
  if (uses_source_statistics(config.method)) {
    if (!sources.stats) throw ConfigError(std::string(to_string(config.method)) + " needs source statistics");
    check_order(*sources.stats, config.k_moments);
    if (sources.stats->dim != model.config().d_model) throw ConfigError("source statistics dimension mismatch");
  }
  if (uses_feature_gaussian(config.method) && !sources.gaussian) {
    throw ConfigError("TFA(-) needs source feature mean/covariance");
  }

  AdaptResult result;
  result.predictions.reserve(batches.size());

  if (config.method == Method::Source) {
    model.freeze_all();
    for (const Tensor& batch : batches) result.predictions.push_back(argmax_rows(model.evaluate(batch).second));
    return result;
  }

  if (config.method == Method::T3A) {
    model.freeze_all();
    T3AState state = t3a_init(model, config.t3a_filter_size);
    for (const Tensor& batch : batches) {
      auto [features, logits] = model.evaluate(batch);
      result.predictions.push_back(t3a_step(state, features, logits));
    }
    return result;
  }

  model.set_trainable(config.modulation);
  std::vector<ad::Var> params = select_modulation_params(model, config.modulation);
  OptimizerState opt(params, config.lr, config.momentum, config.clip_norm);
  result.losses.reserve(batches.size());
  for (std::size_t m = 0; m < batches.size(); ++m) {
    ForwardResult out = model.forward(batches[m]);
    result.predictions.push_back(argmax_rows(out.logits.value()));
    ad::Var loss = method_loss(config, out, sources);
    const double value = loss.value().item();
    if (!std::isfinite(value)) {
      model.freeze_all();
      throw CatastrophicFailure(m, "non-finite " + std::string(to_string(config.method)) + " loss");
    }
    result.losses.push_back(value);
    ad::GradMap grads = ad::backward(loss);
    if (!std::isfinite(global_norm(grads))) {
      model.freeze_all();
      throw CatastrophicFailure(m, "non-finite gradient");
    }
    clip_and_step(params, std::move(grads), opt);
  }
  model.freeze_all();
  return result;
}

}  // namespace ttaforge
