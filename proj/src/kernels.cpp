// SPDX-License-Identifier: Apache-2.0
#include "ttaforge/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <vector>

namespace ttaforge::kernels {

namespace {

std::atomic<std::size_t> g_threshold{1u << 18};

// One output row of a*b; shared by both variants so the summation order is identical.
inline void matmul_row(const MatView& a, const MatView& b, std::size_t i, double* out_row, bool acc) {
  const std::size_t n = b.out_cols();
  const std::size_t k = a.out_cols();
  if (!acc) std::fill(out_row, out_row + n, 0.0);
  if (!b.trans) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a(i, p);
      const double* brow = b.data + p * b.cols;
      for (std::size_t j = 0; j < n; ++j) out_row[j] += aip * brow[j];
    }
  } else {
    for (std::size_t j = 0; j < n; ++j) {
      const double* bcol = b.data + j * b.cols;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += a(i, p) * bcol[p];
      out_row[j] += s;
    }
  }
}

inline void attention_seq_forward(const AttentionDims& d, std::size_t s, const double* q, const double* k,
                                  const double* v, double* out, double* probs) {
  const std::size_t T = d.tokens, D = d.width, dh = d.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t base = s * T;
  for (std::size_t h = 0; h < d.heads; ++h) {
    double* p = probs + ((s * d.heads + h) * T) * T;
    const std::size_t off = h * dh;
    for (std::size_t t1 = 0; t1 < T; ++t1) {
      const double* qrow = q + (base + t1) * D + off;
      double mx = -INFINITY;
      for (std::size_t t2 = 0; t2 < T; ++t2) {
        const double* krow = k + (base + t2) * D + off;
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += qrow[c] * krow[c];
        p[t1 * T + t2] = dot * scale;
        mx = std::max(mx, p[t1 * T + t2]);
      }
      double z = 0.0;
      for (std::size_t t2 = 0; t2 < T; ++t2) {
        p[t1 * T + t2] = std::exp(p[t1 * T + t2] - mx);
        z += p[t1 * T + t2];
      }
      for (std::size_t t2 = 0; t2 < T; ++t2) p[t1 * T + t2] /= z;
      double* orow = out + (base + t1) * D + off;
      std::fill(orow, orow + dh, 0.0);
      for (std::size_t t2 = 0; t2 < T; ++t2) {
        const double w = p[t1 * T + t2];
        const double* vrow = v + (base + t2) * D + off;
        for (std::size_t c = 0; c < dh; ++c) orow[c] += w * vrow[c];
      }
    }
  }
}

inline void attention_seq_backward(const AttentionDims& d, std::size_t s, const double* q, const double* k,
                                   const double* v, const double* probs, const double* dout, double* dq,
                                   double* dk, double* dv) {
  const std::size_t T = d.tokens, D = d.width, dh = d.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t base = s * T;
  std::vector<double> dscore(T * T);
  for (std::size_t h = 0; h < d.heads; ++h) {
    const double* p = probs + ((s * d.heads + h) * T) * T;
    const std::size_t off = h * dh;
    for (std::size_t t1 = 0; t1 < T; ++t1) {
      const double* dorow = dout + (base + t1) * D + off;
      // dP = dO . V, then softmax backward
      double rowdot = 0.0;
      for (std::size_t t2 = 0; t2 < T; ++t2) {
        const double* vrow = v + (base + t2) * D + off;
        double g = 0.0;
        for (std::size_t c = 0; c < dh; ++c) g += dorow[c] * vrow[c];
        dscore[t1 * T + t2] = g;
        rowdot += g * p[t1 * T + t2];
      }
      for (std::size_t t2 = 0; t2 < T; ++t2) {
        dscore[t1 * T + t2] = p[t1 * T + t2] * (dscore[t1 * T + t2] - rowdot) * scale;
      }
    }
    for (std::size_t t2 = 0; t2 < T; ++t2) {
      double* dvrow = dv + (base + t2) * D + off;
      double* dkrow = dk + (base + t2) * D + off;
      for (std::size_t t1 = 0; t1 < T; ++t1) {
        const double w = p[t1 * T + t2];
        const double g = dscore[t1 * T + t2];
        const double* dorow = dout + (base + t1) * D + off;
        const double* qrow = q + (base + t1) * D + off;
        for (std::size_t c = 0; c < dh; ++c) {
          dvrow[c] += w * dorow[c];
          dkrow[c] += g * qrow[c];
        }
      }
    }
    for (std::size_t t1 = 0; t1 < T; ++t1) {
      double* dqrow = dq + (base + t1) * D + off;
      for (std::size_t t2 = 0; t2 < T; ++t2) {
        const double g = dscore[t1 * T + t2];
        const double* krow = k + (base + t2) * D + off;
        for (std::size_t c = 0; c < dh; ++c) dqrow[c] += g * krow[c];
      }
    }
  }
}

inline void moments_column(const double* x, std::size_t n, std::size_t dim, std::size_t j, int max_order,
                           double* mean, double* moments) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i * dim + j];
  const double mu = s / static_cast<double>(n);
  mean[j] = mu;
  for (int k = 2; k <= max_order; ++k) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double c = x[i * dim + j] - mu;
      double pw = c;
      for (int e = 1; e < k; ++e) pw *= c;
      acc += pw;
    }
    moments[static_cast<std::size_t>(k - 2) * dim + j] = acc / static_cast<double>(n);
  }
}

bool use_parallel(std::size_t work) {
  return work >= g_threshold.load(std::memory_order_relaxed) && !omp_in_parallel() &&
         omp_get_max_threads() > 1;
}

}  // namespace

namespace serial {

void matmul(MatView a, MatView b, double* out) {
  const std::size_t m = a.out_rows(), n = b.out_cols();
  for (std::size_t i = 0; i < m; ++i) matmul_row(a, b, i, out + i * n, false);
}

void matmul_acc(MatView a, MatView b, double* out) {
  const std::size_t m = a.out_rows(), n = b.out_cols();
  for (std::size_t i = 0; i < m; ++i) matmul_row(a, b, i, out + i * n, true);
}

void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v,
                       double* out, double* probs) {
  for (std::size_t s = 0; s < d.seqs; ++s) attention_seq_forward(d, s, q, k, v, out, probs);
}

void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk, double* dv) {
  for (std::size_t s = 0; s < d.seqs; ++s) attention_seq_backward(d, s, q, k, v, probs, dout, dq, dk, dv);
}

void column_moments(const double* x, std::size_t n, std::size_t dim, int max_order, double* mean,
                    double* moments) {
  for (std::size_t j = 0; j < dim; ++j) moments_column(x, n, dim, j, max_order, mean, moments);
}

}  // namespace serial

namespace parallel {

void matmul(MatView a, MatView b, double* out) {
  const auto m = static_cast<std::ptrdiff_t>(a.out_rows());
  const std::size_t n = b.out_cols();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i) {
    matmul_row(a, b, static_cast<std::size_t>(i), out + static_cast<std::size_t>(i) * n, false);
  }
}

void matmul_acc(MatView a, MatView b, double* out) {
  const auto m = static_cast<std::ptrdiff_t>(a.out_rows());
  const std::size_t n = b.out_cols();
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i) {
    matmul_row(a, b, static_cast<std::size_t>(i), out + static_cast<std::size_t>(i) * n, true);
  }
}

void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v,
                       double* out, double* probs) {
  const auto seqs = static_cast<std::ptrdiff_t>(d.seqs);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < seqs; ++s) {
    attention_seq_forward(d, static_cast<std::size_t>(s), q, k, v, out, probs);
  }
}

void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk, double* dv) {
  // Sequences own disjoint row ranges of dq/dk/dv, so no reduction is needed.
  const auto seqs = static_cast<std::ptrdiff_t>(d.seqs);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < seqs; ++s) {
    attention_seq_backward(d, static_cast<std::size_t>(s), q, k, v, probs, dout, dq, dk, dv);
  }
}

void column_moments(const double* x, std::size_t n, std::size_t dim, int max_order, double* mean,
                    double* moments) {
  const auto cols = static_cast<std::ptrdiff_t>(dim);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t j = 0; j < cols; ++j) {
    moments_column(x, n, dim, static_cast<std::size_t>(j), max_order, mean, moments);
  }
}

}  // namespace parallel

void set_parallel_threshold(std::size_t flops) { g_threshold.store(flops, std::memory_order_relaxed); }
std::size_t parallel_threshold() { return g_threshold.load(std::memory_order_relaxed); }

void matmul(MatView a, MatView b, double* out) {
  if (use_parallel(a.out_rows() * a.out_cols() * b.out_cols())) {
    parallel::matmul(a, b, out);
  } else {
    serial::matmul(a, b, out);
  }
}

void matmul_acc(MatView a, MatView b, double* out) {
  if (use_parallel(a.out_rows() * a.out_cols() * b.out_cols())) {
    parallel::matmul_acc(a, b, out);
  } else {
    serial::matmul_acc(a, b, out);
  }
}

void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v,
                       double* out, double* probs) {
  if (use_parallel(d.seqs * d.tokens * d.tokens * d.width * 2)) {
    parallel::attention_forward(d, q, k, v, out, probs);
  } else {
    serial::attention_forward(d, q, k, v, out, probs);
  }
}

void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk, double* dv) {
  if (use_parallel(d.seqs * d.tokens * d.tokens * d.width * 4)) {
    parallel::attention_backward(d, q, k, v, probs, dout, dq, dk, dv);
  } else {
    serial::attention_backward(d, q, k, v, probs, dout, dq, dk, dv);
  }
}

void column_moments(const double* x, std::size_t n, std::size_t dim, int max_order, double* mean,
                    double* moments) {
  if (use_parallel(n * dim * static_cast<std::size_t>(std::max(max_order, 1)))) {
    parallel::column_moments(x, n, dim, max_order, mean, moments);
  } else {
    serial::column_moments(x, n, dim, max_order, mean, moments);
  }
}

}  // namespace ttaforge::kernels
