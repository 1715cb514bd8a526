// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal dynamic-tape reverse-mode differentiation over float64 tensors.
//
// A Var is a shared handle to a graph node. Ops record their inputs and a
// backward closure only when some input requires a gradient, so evaluation
// without trainable inputs builds no graph. The graph lives as long as the
// Vars that reference it; it is rebuilt for every batch.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ttaforge/tensor.hpp"

namespace ttaforge::ad {

struct Node;

/// Hands out gradient accumulators for a node's inputs during backward.
/// Returns nullptr for inputs that do not require a gradient.
class GradSlots {
 public:
  virtual ~GradSlots() = default;
  virtual Tensor* operator()(std::size_t input) = 0;
};

using BackwardFn = std::function<void(const Node& self, const Tensor& grad_out, GradSlots& slots)>;

struct Node {
  Tensor value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;  // empty for leaves

  bool is_leaf() const { return !backward; }
  const Tensor& in(std::size_t i) const { return inputs[i]->value; }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  /// Leaf that never receives a gradient.
  static Var constant(Tensor value);
  /// Trainable leaf.
  static Var parameter(Tensor value);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  /// Writable access for in-place optimizer updates on leaves.
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_->requires_grad; }
  /// Only meaningful on leaves; freezing a parameter excludes it from backward.
  void set_requires_grad(bool on);

  const Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  friend bool operator==(const Var& a, const Var& b) { return a.node_ == b.node_; }

 private:
  std::shared_ptr<Node> node_;
};

/// While alive, ops on this thread record no graph (evaluation mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Gradients of a scalar with respect to the trainable leaves it depends on,
/// in a deterministic order (depth-first discovery from the loss).
class GradMap {
 public:
  void insert(const Var& leaf, Tensor grad);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  bool contains(const Var& leaf) const { return index_.count(leaf.node()) != 0; }
  /// Throws if `leaf` has no gradient.
  const Tensor& at(const Var& leaf) const;
  Tensor& at(const Var& leaf);

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<std::pair<Var, Tensor>> entries_;
  std::unordered_map<const Node*, std::size_t> index_;
};

/// Reverse pass from a scalar loss. Throws on a non-scalar or non-finite loss,
/// or when no trainable leaf is reachable.
GradMap backward(const Var& loss);

// --- ops -------------------------------------------------------------------
// Shapes: "matrix" means rank 2, "row vector" rank 1 broadcast over rows.

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var reshape(const Var& a, Shape shape);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_row(const Var& a, const Var& row);
Var sub_row(const Var& a, const Var& row);
Var mul_row(const Var& a, const Var& row);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);

Var tanh(const Var& a);
/// Exact (erf) GELU.
Var gelu(const Var& a);
Var log(const Var& a);
Var exp(const Var& a);
Var pow(const Var& a, int exponent);
/// x*log(x) with the 0*log(0) = 0 convention; inputs must be >= 0.
Var xlogx(const Var& a);

Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
/// Row-wise (x - mean) / sqrt(var + eps) with the biased variance; no affine step.
Var normalize_rows(const Var& a, double eps);
/// normalize_rows followed by the elementwise affine map gamma*y + beta.
Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps);

Var sum(const Var& a);
Var mean(const Var& a);
/// Column means of a matrix: [m, n] -> [n].
Var mean_rows(const Var& a);
/// Sum of each row: [m, n] -> [m].
Var sum_cols(const Var& a);
/// Euclidean norm of each row: [m, n] -> [m]. The gradient at a zero row is zero.
Var row_norms(const Var& a);
/// Euclidean norm of all entries -> scalar. The gradient at zero is zero.
Var norm(const Var& a);

Var select_rows(const Var& a, std::span<const std::size_t> rows);
/// out[i] = a[i, cols[i]] : [m, n] -> [m].
Var pick(const Var& a, std::span<const std::size_t> cols);

/// Builds [S*(P+1), D] token rows: the shared `cls` row [D] followed by the
/// P rows of each sequence taken from `patches` [S*P, D].
Var prepend_token(const Var& cls, const Var& patches, std::size_t patches_per_seq);
/// x [S*T, D] + table [T, D] repeated for each of the S sequences.
Var add_tiled(const Var& x, const Var& table);

/// Multi-head scaled dot-product self-attention over `seqs` independent
/// sequences of `tokens` rows each. q, k, v: [seqs*tokens, width].
Var attention(const Var& q, const Var& k, const Var& v, std::size_t tokens, std::size_t heads);

inline Var linear(const Var& x, const Var& weight, const Var& bias) { return add_row(matmul(x, weight), bias); }

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }

}  // namespace ttaforge::ad
