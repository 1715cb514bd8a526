// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "ttaforge/autodiff.hpp"
#include "ttaforge/tensor.hpp"

namespace ttaforge {

/// SGD with classic (heavy-ball) momentum:
///   v <- momentum * v + g
///   p <- p - lr * v
struct OptimizerState {
  OptimizerState(std::span<const ad::Var> params, double lr, double momentum,
                 std::optional<double> clip_norm);

  double lr;
  double momentum;
  std::optional<double> clip_norm;  // nullopt disables clipping
  std::vector<Tensor> velocity;     // one per parameter, same shape
};

/// Joint L2 norm over every gradient tensor.
double global_norm(const ad::GradMap& grads);

/// Scales every gradient by max_norm / g when the joint norm g exceeds max_norm.
/// Throws on non-finite entries or a non-positive max_norm.
ad::GradMap clip_global_norm(ad::GradMap grads, double max_norm);

/// One momentum step over `params`. Parameters with no entry in `grads` are
/// treated as having a zero gradient. Gradients must already be clipped.
void sgd_step(std::span<ad::Var> params, const ad::GradMap& grads, OptimizerState& state);

/// Clip (when enabled) then step. Returns the pre-clip global norm.
double clip_and_step(std::span<ad::Var> params, ad::GradMap grads, OptimizerState& state);

}  // namespace ttaforge
