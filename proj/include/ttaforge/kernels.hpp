// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dense inner loops used by the autodiff ops and the statistics code.
//
// Every kernel has a serial reference in `serial::` and an OpenMP version in
// `parallel::`. Both compute each output element with the same summation
// order, so their results are bit-identical; the parallel versions only
// split independent output rows (or sequences, or columns) across threads.
// The unqualified entry points pick one based on problem size.

#include <cstddef>
#include <span>

namespace ttaforge::kernels {

/// Row-major matrix operand; `trans` reads it as its transpose.
struct MatView {
  const double* data;
  std::size_t rows;  // stored rows
  std::size_t cols;  // stored cols
  bool trans = false;

  std::size_t out_rows() const { return trans ? cols : rows; }
  std::size_t out_cols() const { return trans ? rows : cols; }
  double operator()(std::size_t i, std::size_t j) const {
    return trans ? data[j * cols + i] : data[i * cols + j];
  }
};

/// Shape of a batched multi-head attention problem: `seqs` independent
/// sequences of `tokens` rows each, model width `width` split into `heads`.
struct AttentionDims {
  std::size_t seqs;
  std::size_t tokens;
  std::size_t width;
  std::size_t heads;
  std::size_t head_dim() const { return width / heads; }
};

namespace serial {
/// out (m x n) = a (m x k) * b (k x n), overwriting out.
void matmul(MatView a, MatView b, double* out);
/// out += a * b
void matmul_acc(MatView a, MatView b, double* out);
/// Writes attention output and the softmax probabilities (seqs*heads*tokens*tokens).
void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v,
                       double* out, double* probs);
/// Accumulates into dq, dk, dv.
void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk, double* dv);
/// Column mean and central moments of order 2..max_order of an n x dim matrix.
/// `moments` receives (max_order-1) rows of `dim` values.
void column_moments(const double* x, std::size_t n, std::size_t dim, int max_order, double* mean,
                    double* moments);
}  // namespace serial

namespace parallel {
void matmul(MatView a, MatView b, double* out);
void matmul_acc(MatView a, MatView b, double* out);
void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v,
                       double* out, double* probs);
void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk, double* dv);
void column_moments(const double* x, std::size_t n, std::size_t dim, int max_order, double* mean,
                    double* moments);
}  // namespace parallel

/// Work (in multiply-adds) above which the dispatchers use the OpenMP kernels.
/// Inside an enclosing parallel region the serial kernels are always used.
void set_parallel_threshold(std::size_t flops);
std::size_t parallel_threshold();

void matmul(MatView a, MatView b, double* out);
void matmul_acc(MatView a, MatView b, double* out);
void attention_forward(const AttentionDims& d, const double* q, const double* k, const double* v,
                       double* out, double* probs);
void attention_backward(const AttentionDims& d, const double* q, const double* k, const double* v,
                        const double* probs, const double* dout, double* dq, double* dk, double* dv);
void column_moments(const double* x, std::size_t n, std::size_t dim, int max_order, double* mean,
                    double* moments);

}  // namespace ttaforge::kernels
