// SPDX-License-Identifier: Apache-2.0
// Independent reference computations used by the test suites. Nothing here
// calls into the library's numerical code paths beyond reading tensors.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ttaforge/autodiff.hpp"
#include "ttaforge/backbone.hpp"
#include "ttaforge/tensor.hpp"

namespace oracle {

using Mat = std::vector<std::vector<double>>;

inline ttaforge::Tensor random_tensor(ttaforge::Shape shape, std::mt19937_64& gen, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  ttaforge::Tensor t(std::move(shape));
  for (double& v : t.storage()) v = dist(gen);
  return t;
}

inline Mat to_mat(const ttaforge::Tensor& t) {
  Mat m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t r = 0; r < t.rows(); ++r)
    for (std::size_t c = 0; c < t.cols(); ++c) m[r][c] = t.at(r, c);
  return m;
}

inline double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

// ---- finite differences ----------------------------------------------------

/// Norm-wise relative error ||a - b|| / max(||a||, ||b||, floor).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return l2(d) / std::max({l2(a), l2(b), floor});
}

/// Central differences of `loss` w.r.t. selected coordinates of `leaf`.
/// `coords` empty means every coordinate.
inline std::vector<double> central_difference(const std::function<double()>& loss, ttaforge::ad::Var& leaf,
                                              const std::vector<std::size_t>& coords, double h = 1e-5) {
  std::vector<double> out;
  auto& data = leaf.mutable_value().storage();
  auto one = [&](std::size_t i) {
    const double keep = data[i];
    data[i] = keep + h;
    const double up = loss();
    data[i] = keep - h;
    const double down = loss();
    data[i] = keep;
    out.push_back((up - down) / (2.0 * h));
  };
  if (coords.empty()) {
    for (std::size_t i = 0; i < data.size(); ++i) one(i);
  } else {
    for (std::size_t i : coords) one(i);
  }
  return out;
}

inline std::vector<std::size_t> sample_coords(std::size_t n, std::size_t max_count, std::mt19937_64& gen) {
  std::vector<std::size_t> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = i;
  if (n <= max_count) return all;
  std::shuffle(all.begin(), all.end(), gen);
  all.resize(max_count);
  std::sort(all.begin(), all.end());
  return all;
}

// ---- moment statistics from raw samples -------------------------------------

inline std::vector<double> column_mean(const Mat& x) {
  std::vector<double> m(x.front().size(), 0.0);
  for (const auto& row : x)
    for (std::size_t j = 0; j < row.size(); ++j) m[j] += row[j];
  for (double& v : m) v /= static_cast<double>(x.size());
  return m;
}

/// E[(x - E x)^k] per coordinate.
inline std::vector<double> central_moment(const Mat& x, int k) {
  const auto mu = column_mean(x);
  std::vector<double> m(mu.size(), 0.0);
  for (const auto& row : x)
    for (std::size_t j = 0; j < row.size(); ++j) m[j] += std::pow(row[j] - mu[j], k);
  for (double& v : m) v /= static_cast<double>(x.size());
  return m;
}

/// Central moment discrepancy between two bounded samples on [a, b].
inline double cmd_from_samples(const Mat& x, const Mat& y, int K, double a = -1.0, double b = 1.0) {
  const double span = std::abs(b - a);
  auto diff = [](const std::vector<double>& u, const std::vector<double>& v) {
    std::vector<double> d(u.size());
    for (std::size_t i = 0; i < u.size(); ++i) d[i] = u[i] - v[i];
    return l2(d);
  };
  double total = diff(column_mean(x), column_mean(y)) / span;
  for (int k = 2; k <= K; ++k) total += diff(central_moment(x, k), central_moment(y, k)) / std::pow(span, k);
  return total;
}

inline std::vector<double> softmax(const std::vector<double>& z) {
  double mx = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] - mx));
  for (double& v : p) v /= s;
  return p;
}

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0) h -= v * std::log(v);
  return h;
}

// ---- straight-line transformer forward --------------------------------------

inline std::vector<double> row_layer_norm(const std::vector<double>& x, const std::vector<double>& g,
                                          const std::vector<double>& b, double eps) {
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  var /= static_cast<double>(x.size());
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = g[i] * (x[i] - mean) / std::sqrt(var + eps) + b[i];
  return y;
}

inline std::vector<double> affine(const std::vector<double>& x, const ttaforge::Tensor& w, const ttaforge::Tensor& b) {
  std::vector<double> y(w.cols());
  for (std::size_t j = 0; j < w.cols(); ++j) {
    double s = b[j];
    for (std::size_t i = 0; i < x.size(); ++i) s += x[i] * w.at(i, j);
    y[j] = s;
  }
  return y;
}

inline std::vector<double> vec(const ttaforge::Tensor& t) { return {t.values().begin(), t.values().end()}; }

struct LineOutput {
  std::vector<double> features;
  std::vector<double> logits;
};

/// One image [H, W, C] through the model, written out token by token.
inline LineOutput line_forward(const ttaforge::Model& model, const ttaforge::Tensor& images, std::size_t index) {
  const auto& c = model.config();
  auto P = [&](const std::string& name) -> const ttaforge::Tensor& { return model.parameter(name).var.value(); };
  const std::size_t S = c.image_size, ps = c.patch_size, ch = c.channels, D = c.d_model, grid = S / ps;
  auto pixel = [&](std::size_t y, std::size_t x, std::size_t k) {
    return images[((index * S + y) * S + x) * ch + k];
  };

  Mat tokens;
  tokens.push_back(vec(P("cls_token")));
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx) {
      std::vector<double> patch;
      for (std::size_t dy = 0; dy < ps; ++dy)
        for (std::size_t dx = 0; dx < ps; ++dx)
          for (std::size_t k = 0; k < ch; ++k) patch.push_back(pixel(gy * ps + dy, gx * ps + dx, k));
      tokens.push_back(affine(patch, P("patch_embed.weight"), P("patch_embed.bias")));
    }
  const auto& pos = P("pos_embed");
  for (std::size_t t = 0; t < tokens.size(); ++t)
    for (std::size_t j = 0; j < D; ++j) tokens[t][j] += pos.at(t, j);

  const std::size_t T = tokens.size(), dh = D / c.heads;
  for (std::size_t b = 0; b < c.depth; ++b) {
    const std::string pre = "blocks." + std::to_string(b) + ".";
    Mat q, k, v;
    for (const auto& x : tokens) {
      auto y = row_layer_norm(x, vec(P(pre + "ln1.weight")), vec(P(pre + "ln1.bias")), c.ln_eps);
      q.push_back(affine(y, P(pre + "attn.q.weight"), P(pre + "attn.q.bias")));
      k.push_back(affine(y, P(pre + "attn.k.weight"), P(pre + "attn.k.bias")));
      v.push_back(affine(y, P(pre + "attn.v.weight"), P(pre + "attn.v.bias")));
    }
    Mat attn(T, std::vector<double>(D, 0.0));
    for (std::size_t h = 0; h < c.heads; ++h)
      for (std::size_t i = 0; i < T; ++i) {
        std::vector<double> score(T);
        for (std::size_t j = 0; j < T; ++j) {
          double s = 0.0;
          for (std::size_t e = 0; e < dh; ++e) s += q[i][h * dh + e] * k[j][h * dh + e];
          score[j] = s / std::sqrt(static_cast<double>(dh));
        }
        const auto p = softmax(score);
        for (std::size_t j = 0; j < T; ++j)
          for (std::size_t e = 0; e < dh; ++e) attn[i][h * dh + e] += p[j] * v[j][h * dh + e];
      }
    for (std::size_t t = 0; t < T; ++t) {
      const auto o = affine(attn[t], P(pre + "attn.out.weight"), P(pre + "attn.out.bias"));
      for (std::size_t j = 0; j < D; ++j) tokens[t][j] += o[j];
    }
    for (auto& x : tokens) {
      auto y = row_layer_norm(x, vec(P(pre + "ln2.weight")), vec(P(pre + "ln2.bias")), c.ln_eps);
      auto hdn = affine(y, P(pre + "mlp.fc1.weight"), P(pre + "mlp.fc1.bias"));
      for (double& u : hdn) u = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
      const auto o = affine(hdn, P(pre + "mlp.fc2.weight"), P(pre + "mlp.fc2.bias"));
      for (std::size_t j = 0; j < D; ++j) x[j] += o[j];
    }
  }
  LineOutput out;
  out.features = row_layer_norm(tokens[0], vec(P("final_ln.weight")), vec(P("final_ln.bias")), c.ln_eps);
  out.logits = affine(out.features, P("head.weight"), P("head.bias"));
  return out;
}

}  // namespace oracle
