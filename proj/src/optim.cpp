// SPDX-License-Identifier: Apache-2.0
#include "ttaforge/optim.hpp"

#include <cmath>

#include "ttaforge/error.hpp"

namespace ttaforge {

OptimizerState::OptimizerState(std::span<const ad::Var> params, double lr_, double momentum_,
                               std::optional<double> clip_norm_)
    : lr(lr_), momentum(momentum_), clip_norm(clip_norm_) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
  if (clip_norm && !(*clip_norm > 0.0)) throw ConfigError("clip norm must be positive");
  velocity.reserve(params.size());
  for (const auto& p : params) velocity.emplace_back(p.shape());
}

double global_norm(const ad::GradMap& grads) {
  double sq = 0.0;
  for (const auto& [var, g] : grads) {
    for (double v : g.values()) sq += v * v;
  }
  return std::sqrt(sq);
}

ad::GradMap clip_global_norm(ad::GradMap grads, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_global_norm: max_norm must be positive");
  for (const auto& [var, g] : grads) {
    if (!g.all_finite()) throw Error("clip_global_norm: non-finite gradient");
  }
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& [var, g] : grads) {
      for (double& v : g.values()) v *= s;
    }
  }
  return grads;
}

void sgd_step(std::span<ad::Var> params, const ad::GradMap& grads, OptimizerState& state) {
  if (params.size() != state.velocity.size()) throw ShapeError("sgd_step: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i].mutable_value();
    Tensor& v = state.velocity[i];
    if (p.shape() != v.shape()) throw ShapeError("sgd_step: velocity shape mismatch");
    const Tensor* g = grads.contains(params[i]) ? &grads.at(params[i]) : nullptr;
    if (g && g->shape() != p.shape()) throw ShapeError("sgd_step: gradient shape mismatch");
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = state.momentum * v[j] + (g ? (*g)[j] : 0.0);
      p[j] -= state.lr * v[j];
    }
  }
}

double clip_and_step(std::span<ad::Var> params, ad::GradMap grads, OptimizerState& state) {
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw Error("non-finite gradient norm");
  if (state.clip_norm) grads = clip_global_norm(std::move(grads), *state.clip_norm);
  sgd_step(params, grads, state);
  return norm;
}

}  // namespace ttaforge
