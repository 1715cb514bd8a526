// SPDX-License-Identifier: Apache-2.0
#include "ttaforge/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ttaforge/error.hpp"
#include "ttaforge/kernels.hpp"

namespace ttaforge::ad {

namespace {

using kernels::MatView;

thread_local bool t_grad_enabled = true;

Var make(Tensor value, std::vector<Var> inputs, BackwardFn fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  if (t_grad_enabled)
    for (const auto& v : inputs) needs = needs || v.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& v : inputs) node->inputs.push_back(v.node_ptr());
    node->backward = std::move(fn);
  }
  return Var(std::move(node));
}

void require_matrix(const Var& a, const char* op) {
  if (a.value().ndim() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(a.shape()));
  }
}

void require_same(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_row(const Var& a, const Var& row, const char* op) {
  require_matrix(a, op);
  if (row.shape() != Shape{a.shape()[1]}) {
    throw ShapeError(std::string(op) + ": row vector " + shape_str(row.shape()) +
                     " does not match matrix " + shape_str(a.shape()));
  }
}

MatView view(const Tensor& t, bool trans = false) { return MatView{t.data(), t.shape()[0], t.shape()[1], trans}; }

template <typename F, typename G>
Var unary(const Var& a, F forward, G derivative) {
  Tensor out(a.shape());
  const Tensor& x = a.value();
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = forward(x[i]);
  return make(std::move(out), {a}, [derivative](const Node& self, const Tensor& g, GradSlots& slots) {
    if (Tensor* dx = slots(0)) {
      const Tensor& x = self.in(0);
      const Tensor& y = self.value;
      for (std::size_t i = 0; i < x.size(); ++i) (*dx)[i] += g[i] * derivative(x[i], y[i]);
    }
  });
}

class EngineSlots final : public GradSlots {
 public:
  EngineSlots(const Node& node, std::unordered_map<const Node*, Tensor>& grads) : node_(node), grads_(grads) {}
  Tensor* operator()(std::size_t i) override {
    const Node* in = node_.inputs[i].get();
    if (!in->requires_grad) return nullptr;
    auto it = grads_.find(in);
    if (it == grads_.end()) it = grads_.emplace(in, Tensor(in->value.shape())).first;
    return &it->second;
  }

 private:
  const Node& node_;
  std::unordered_map<const Node*, Tensor>& grads_;
};

}  // namespace

// --- Var / GradMap -----------------------------------------------------------

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

void Var::set_requires_grad(bool on) {
  if (!node_->is_leaf()) throw Error("set_requires_grad on a non-leaf node");
  node_->requires_grad = on;
}

void GradMap::insert(const Var& leaf, Tensor grad) {
  auto [it, inserted] = index_.emplace(leaf.node(), entries_.size());
  if (inserted) {
    entries_.emplace_back(leaf, std::move(grad));
  } else {
    entries_[it->second].second = std::move(grad);
  }
}

const Tensor& GradMap::at(const Var& leaf) const {
  auto it = index_.find(leaf.node());
  if (it == index_.end()) throw Error("no gradient recorded for this tensor");
  return entries_[it->second].second;
}

Tensor& GradMap::at(const Var& leaf) {
  auto it = index_.find(leaf.node());
  if (it == index_.end()) throw Error("no gradient recorded for this tensor");
  return entries_[it->second].second;
}

GradMap backward(const Var& loss) {
  if (!loss.defined()) throw Error("backward on an undefined tensor");
  if (loss.value().size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!std::isfinite(loss.value()[0])) throw Error("backward on a non-finite loss");
  if (!loss.requires_grad()) throw Error("loss is not connected to any trainable parameter");

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<const Node*> order;
  std::vector<const Node*> leaves;
  std::unordered_map<const Node*, bool> visited;
  std::vector<std::pair<const Node*, std::size_t>> stack{{loss.node(), 0}};
  visited[loss.node()] = true;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const Node* child = node->inputs[next++].get();
      if (child->requires_grad && !visited[child]) {
        visited[child] = true;
        stack.emplace_back(child, 0);
      }
      continue;
    }
    order.push_back(node);
    if (node->is_leaf()) leaves.push_back(node);
    stack.pop_back();
  }
  if (leaves.empty()) throw Error("loss is not connected to any trainable parameter");

  std::unordered_map<const Node*, Tensor> grads;
  grads.emplace(loss.node(), Tensor(loss.shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* node = *it;
    if (node->is_leaf()) continue;
    auto g = grads.find(node);
    if (g == grads.end()) continue;
    Tensor grad_out = std::move(g->second);
    grads.erase(g);
    EngineSlots slots(*node, grads);
    node->backward(*node, grad_out, slots);
  }

  // Leaf handles: recover shared ownership through the parents' input lists.
  std::unordered_map<const Node*, std::shared_ptr<Node>> owners;
  for (const Node* node : order) {
    for (const auto& in : node->inputs) owners.emplace(in.get(), in);
  }
  if (loss.node()->is_leaf()) owners.emplace(loss.node(), loss.node_ptr());

  GradMap out;
  for (const Node* leaf : leaves) {
    auto g = grads.find(leaf);
    Tensor grad = g != grads.end() ? std::move(g->second) : Tensor(leaf->value.shape());
    out.insert(Var(owners.at(leaf)), std::move(grad));
  }
  return out;
}

// --- linear algebra ----------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  kernels::matmul(view(a.value()), view(b.value()), out.data());
  return make(std::move(out), {a, b}, [](const Node& self, const Tensor& g, GradSlots& slots) {
    const Tensor& A = self.in(0);
    const Tensor& B = self.in(1);
    if (Tensor* da = slots(0)) kernels::matmul_acc(view(g), view(B, true), da->data());
    if (Tensor* db = slots(1)) kernels::matmul_acc(view(A, true), view(g), db->data());
  });
}

Var transpose(const Var& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(j, i) = a.value().at(i, j);
  return make(std::move(out), {a}, [](const Node& self, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      const std::size_t m = self.in(0).shape()[0], n = self.in(0).shape()[1];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da->at(i, j) += g.at(j, i);
    }
  });
}

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return make(std::move(out), {a}, [](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
    }
  });
}

// --- elementwise -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require_same(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make(std::move(out), {a, b}, [](const Node&, const Tensor& g, GradSlots& slots) {
    for (std::size_t s = 0; s < 2; ++s) {
      if (Tensor* d = slots(s)) {
        for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make(std::move(out), {a, b}, [](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
    }
    if (Tensor* db = slots(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] -= g[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make(std::move(out), {a, b}, [](const Node& self, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * self.in(1)[i];
    }
    if (Tensor* db = slots(1)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * self.in(0)[i];
    }
  });
}

Var add_row(const Var& a, const Var& row) {
  require_row(a, row, "add_row");
  Tensor out = a.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) += row.value()[j];
  return make(std::move(out), {a, row}, [m, n](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
    }
    if (Tensor* dr = slots(1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*dr)[j] += g.at(i, j);
    }
  });
}

Var sub_row(const Var& a, const Var& row) {
  require_row(a, row, "sub_row");
  Tensor out = a.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) -= row.value()[j];
  return make(std::move(out), {a, row}, [m, n](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
    }
    if (Tensor* dr = slots(1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*dr)[j] -= g.at(i, j);
    }
  });
}

Var mul_row(const Var& a, const Var& row) {
  require_row(a, row, "mul_row");
  Tensor out = a.value();
  const std::size_t m = out.rows(), n = out.cols();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) *= row.value()[j];
  return make(std::move(out), {a, row}, [m, n](const Node& self, const Tensor& g, GradSlots& slots) {
    const Tensor& A = self.in(0);
    const Tensor& r = self.in(1);
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da->at(i, j) += g.at(i, j) * r[j];
    }
    if (Tensor* dr = slots(1)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) (*dr)[j] += g.at(i, j) * A.at(i, j);
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v *= s;
  return make(std::move(out), {a}, [s](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += s * g[i];
    }
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.values()) v += s;
  return make(std::move(out), {a}, [](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
    }
  });
}

Var tanh(const Var& a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var gelu(const Var& a) {
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); },
      [](double x, double) {
        const double cdf = 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * x * x) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
        return cdf + x * pdf;
      });
}

Var log(const Var& a) {
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var exp(const Var& a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var pow(const Var& a, int exponent) {
  if (exponent < 1) throw Error("pow: exponent must be >= 1");
  auto ipow = [](double x, int e) {
    double r = x;
    for (int i = 1; i < e; ++i) r *= x;
    return r;
  };
  return unary(
      a, [=](double x) { return ipow(x, exponent); },
      [=](double x, double) { return exponent == 1 ? 1.0 : exponent * ipow(x, exponent - 1); });
}

Var xlogx(const Var& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x * std::log(x) : 0.0; },
      [](double x, double) { return x > 0.0 ? std::log(x) + 1.0 : 0.0; });
}

// --- row-wise ----------------------------------------------------------------

Var softmax_rows(const Var& a) {
  require_matrix(a, "softmax_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out(a.shape());
  for (std::size_t i = 0; i < m; ++i) {
    auto x = a.value().row(i);
    auto y = out.row(i);
    const double mx = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (y[j] = std::exp(x[j] - mx));
    for (std::size_t j = 0; j < n; ++j) y[j] /= z;
  }
  return make(std::move(out), {a}, [m, n](const Node& self, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < m; ++i) {
        auto p = self.value.row(i);
        auto gi = g.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += gi[j] * p[j];
        for (std::size_t j = 0; j < n; ++j) da->at(i, j) += p[j] * (gi[j] - dot);
      }
    }
  });
}

Var log_softmax_rows(const Var& a) {
  require_matrix(a, "log_softmax_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out(a.shape());
  for (std::size_t i = 0; i < m; ++i) {
    auto x = a.value().row(i);
    const double mx = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(x[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = x[j] - lse;
  }
  return make(std::move(out), {a}, [m, n](const Node& self, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < m; ++i) {
        auto y = self.value.row(i);
        auto gi = g.row(i);
        double gsum = 0.0;
        for (std::size_t j = 0; j < n; ++j) gsum += gi[j];
        for (std::size_t j = 0; j < n; ++j) da->at(i, j) += gi[j] - std::exp(y[j]) * gsum;
      }
    }
  });
}

Var normalize_rows(const Var& a, double eps) {
  require_matrix(a, "normalize_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out(a.shape());
  auto rstd = std::make_shared<std::vector<double>>(m);
  for (std::size_t i = 0; i < m; ++i) {
    auto x = a.value().row(i);
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(n);
    const double r = 1.0 / std::sqrt(var + eps);
    (*rstd)[i] = r;
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = (x[j] - mu) * r;
  }
  return make(std::move(out), {a}, [m, n, rstd](const Node& self, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < m; ++i) {
        auto y = self.value.row(i);
        auto gi = g.row(i);
        double gsum = 0.0, gy = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          gsum += gi[j];
          gy += gi[j] * y[j];
        }
        const double r = (*rstd)[i];
        for (std::size_t j = 0; j < n; ++j) da->at(i, j) += r * (gi[j] - inv_n * gsum - inv_n * y[j] * gy);
      }
    }
  });
}

Var layer_norm(const Var& a, const Var& gamma, const Var& beta, double eps) {
  return add_row(mul_row(normalize_rows(a, eps), gamma), beta);
}

// --- reductions --------------------------------------------------------------

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make(Tensor::scalar(s), {a}, [](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (double& v : da->values()) v += g[0];
    }
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

Var mean_rows(const Var& a) {
  require_matrix(a, "mean_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j] += a.value().at(i, j);
  const double inv = 1.0 / static_cast<double>(m);
  for (double& v : out.values()) v *= inv;
  return make(std::move(out), {a}, [m, n, inv](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da->at(i, j) += g[j] * inv;
    }
  });
}

Var sum_cols(const Var& a) {
  require_matrix(a, "sum_cols");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i] += a.value().at(i, j);
  return make(std::move(out), {a}, [m, n](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) da->at(i, j) += g[i];
    }
  });
}

Var row_norms(const Var& a) {
  require_matrix(a, "row_norms");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) out[i] = l2_norm(a.value().row(i));
  return make(std::move(out), {a}, [m, n](const Node& self, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < m; ++i) {
        const double nrm = self.value[i];
        if (nrm == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) da->at(i, j) += g[i] * self.in(0).at(i, j) / nrm;
      }
    }
  });
}

Var norm(const Var& a) {
  return reshape(row_norms(reshape(a, {1, a.value().size()})), {});
}

// --- indexing ----------------------------------------------------------------

Var select_rows(const Var& a, std::span<const std::size_t> rows) {
  require_matrix(a, "select_rows");
  const std::size_t n = a.shape()[1];
  if (rows.empty()) throw ShapeError("select_rows: empty row list");
  Tensor out({rows.size(), n});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= a.shape()[0]) throw ShapeError("select_rows: row index out of range");
    std::copy_n(a.value().row(rows[i]).begin(), n, out.row(i).begin());
  }
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return make(std::move(out), {a}, [idx, n](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < n; ++j) da->at(idx[i], j) += g.at(i, j);
    }
  });
}

Var pick(const Var& a, std::span<const std::size_t> cols) {
  require_matrix(a, "pick");
  const std::size_t m = a.shape()[0];
  if (cols.size() != m) throw ShapeError("pick: one column index per row required");
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    if (cols[i] >= a.shape()[1]) throw ShapeError("pick: column index out of range");
    out[i] = a.value().at(i, cols[i]);
  }
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  return make(std::move(out), {a}, [idx](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* da = slots(0)) {
      for (std::size_t i = 0; i < idx.size(); ++i) da->at(i, idx[i]) += g[i];
    }
  });
}

Var prepend_token(const Var& cls, const Var& patches, std::size_t patches_per_seq) {
  require_matrix(patches, "prepend_token");
  const std::size_t D = patches.shape()[1];
  const std::size_t P = patches_per_seq;
  if (cls.shape() != Shape{D}) throw ShapeError("prepend_token: token width mismatch");
  if (P == 0 || patches.shape()[0] % P != 0) throw ShapeError("prepend_token: rows not divisible by patch count");
  const std::size_t S = patches.shape()[0] / P;
  const std::size_t T = P + 1;
  Tensor out({S * T, D});
  for (std::size_t s = 0; s < S; ++s) {
    std::copy_n(cls.value().data(), D, out.row(s * T).begin());
    for (std::size_t p = 0; p < P; ++p) std::copy_n(patches.value().row(s * P + p).begin(), D, out.row(s * T + 1 + p).begin());
  }
  return make(std::move(out), {cls, patches}, [S, P, T, D](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* dc = slots(0)) {
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t j = 0; j < D; ++j) (*dc)[j] += g.at(s * T, j);
    }
    if (Tensor* dp = slots(1)) {
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t p = 0; p < P; ++p)
          for (std::size_t j = 0; j < D; ++j) dp->at(s * P + p, j) += g.at(s * T + 1 + p, j);
    }
  });
}

Var add_tiled(const Var& x, const Var& table) {
  require_matrix(x, "add_tiled");
  require_matrix(table, "add_tiled");
  const std::size_t T = table.shape()[0], D = table.shape()[1];
  if (x.shape()[1] != D || x.shape()[0] % T != 0) throw ShapeError("add_tiled: incompatible shapes");
  const std::size_t S = x.shape()[0] / T;
  Tensor out = x.value();
  for (std::size_t s = 0; s < S; ++s)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < D; ++j) out.at(s * T + t, j) += table.value().at(t, j);
  return make(std::move(out), {x, table}, [S, T, D](const Node&, const Tensor& g, GradSlots& slots) {
    if (Tensor* dx = slots(0)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*dx)[i] += g[i];
    }
    if (Tensor* dt = slots(1)) {
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t t = 0; t < T; ++t)
          for (std::size_t j = 0; j < D; ++j) dt->at(t, j) += g.at(s * T + t, j);
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, std::size_t tokens, std::size_t heads) {
  require_matrix(q, "attention");
  require_same(q, k, "attention");
  require_same(q, v, "attention");
  const std::size_t rows = q.shape()[0], width = q.shape()[1];
  if (tokens == 0 || rows % tokens != 0) throw ShapeError("attention: rows not divisible by token count");
  if (heads == 0 || width % heads != 0) throw ShapeError("attention: width not divisible by head count");
  const kernels::AttentionDims dims{rows / tokens, tokens, width, heads};
  Tensor out(q.shape());
  auto probs = std::make_shared<std::vector<double>>(dims.seqs * heads * tokens * tokens);
  kernels::attention_forward(dims, q.value().data(), k.value().data(), v.value().data(), out.data(),
                             probs->data());
  return make(std::move(out), {q, k, v}, [dims, probs](const Node& self, const Tensor& g, GradSlots& slots) {
    Tensor* dq = slots(0);
    Tensor* dk = slots(1);
    Tensor* dv = slots(2);
    // The kernel writes all three; route unused ones to scratch.
    Tensor scratch_q, scratch_k, scratch_v;
    if (!dq) dq = &(scratch_q = Tensor(self.in(0).shape()));
    if (!dk) dk = &(scratch_k = Tensor(self.in(1).shape()));
    if (!dv) dv = &(scratch_v = Tensor(self.in(2).shape()));
    kernels::attention_backward(dims, self.in(0).data(), self.in(1).data(), self.in(2).data(), probs->data(),
                                g.data(), dq->data(), dk->data(), dv->data());
  });
}

}  // namespace ttaforge::ad
