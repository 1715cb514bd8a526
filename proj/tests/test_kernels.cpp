// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <omp.h>

#include <cmath>
#include <cstring>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "ttaforge/backbone.hpp"
#include "ttaforge/kernels.hpp"

using namespace ttaforge;
namespace k = ttaforge::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> d;
  std::vector<double> v(n);
  for (double& x : v) x = d(g);
  return v;
}

bool same_bits(const std::vector<double>& a, const std::vector<double>& b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

class Kernels : public ::testing::Test {
 protected:
  void SetUp() override {
    saved_threads_ = omp_get_max_threads();
    saved_threshold_ = k::parallel_threshold();
    omp_set_num_threads(4);
  }
  void TearDown() override {
    omp_set_num_threads(saved_threads_);
    k::set_parallel_threshold(saved_threshold_);
  }
  int saved_threads_ = 1;
  std::size_t saved_threshold_ = 0;
};

}  // namespace

TEST_F(Kernels, MatmulSerialParallelBitIdentical) {
  for (bool ta : {false, true})
    for (bool tb : {false, true}) {
      const std::size_t m = 37, kk = 23, n = 41;
      auto a = random_vec(m * kk, 1), b = random_vec(kk * n, 2);
      k::MatView A{a.data(), ta ? kk : m, ta ? m : kk, ta};
      k::MatView B{b.data(), tb ? n : kk, tb ? kk : n, tb};
      std::vector<double> s(m * n), p(m * n), sa(m * n, 0.5), pa(m * n, 0.5);
      k::serial::matmul(A, B, s.data());
      k::parallel::matmul(A, B, p.data());
      k::serial::matmul_acc(A, B, sa.data());
      k::parallel::matmul_acc(A, B, pa.data());
      EXPECT_TRUE(same_bits(s, p));
      EXPECT_TRUE(same_bits(sa, pa));
      // against a plain triple loop
      double worst = 0;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double r = 0;
          for (std::size_t q = 0; q < kk; ++q) r += A(i, q) * B(q, j);
          worst = std::max(worst, std::abs(r - s[i * n + j]));
        }
      EXPECT_LT(worst, 1e-12);
    }
}

TEST_F(Kernels, AttentionSerialParallelBitIdentical) {
  k::AttentionDims d{6, 5, 8, 2};
  const std::size_t rows = d.seqs * d.tokens, w = d.width;
  auto q = random_vec(rows * w, 3), kk = random_vec(rows * w, 4), v = random_vec(rows * w, 5);
  auto dout = random_vec(rows * w, 6);
  const std::size_t np = d.seqs * d.heads * d.tokens * d.tokens;
  std::vector<double> os(rows * w), op(rows * w), ps(np), pp(np);
  k::serial::attention_forward(d, q.data(), kk.data(), v.data(), os.data(), ps.data());
  k::parallel::attention_forward(d, q.data(), kk.data(), v.data(), op.data(), pp.data());
  EXPECT_TRUE(same_bits(os, op));
  EXPECT_TRUE(same_bits(ps, pp));
  std::vector<double> dqs(rows * w, 0.1), dks(rows * w, 0.2), dvs(rows * w, 0.3);
  std::vector<double> dqp = dqs, dkp = dks, dvp = dvs;
  k::serial::attention_backward(d, q.data(), kk.data(), v.data(), ps.data(), dout.data(), dqs.data(), dks.data(),
                                dvs.data());
  k::parallel::attention_backward(d, q.data(), kk.data(), v.data(), pp.data(), dout.data(), dqp.data(), dkp.data(),
                                  dvp.data());
  EXPECT_TRUE(same_bits(dqs, dqp));
  EXPECT_TRUE(same_bits(dks, dkp));
  EXPECT_TRUE(same_bits(dvs, dvp));
}

TEST_F(Kernels, ColumnMomentsSerialParallelBitIdentical) {
  const std::size_t n = 301, dim = 19;
  const int K = 5;
  auto x = random_vec(n * dim, 7);
  std::vector<double> ms(dim), mp(dim), cs((K - 1) * dim), cp((K - 1) * dim);
  k::serial::column_moments(x.data(), n, dim, K, ms.data(), cs.data());
  k::parallel::column_moments(x.data(), n, dim, K, mp.data(), cp.data());
  EXPECT_TRUE(same_bits(ms, mp));
  EXPECT_TRUE(same_bits(cs, cp));

  oracle::Mat rows(n, std::vector<double>(dim));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < dim; ++j) rows[i][j] = x[i * dim + j];
  auto mu = oracle::column_mean(rows);
  for (std::size_t j = 0; j < dim; ++j) EXPECT_NEAR(ms[j], mu[j], 1e-12);
  for (int order = 2; order <= K; ++order) {
    auto m = oracle::central_moment(rows, order);
    for (std::size_t j = 0; j < dim; ++j) EXPECT_NEAR(cs[(order - 2) * dim + j], m[j], 1e-11);
  }
}

TEST_F(Kernels, ModelForwardIndependentOfDispatch) {
  ModelConfig cfg;
  Model model = Model::init(cfg, 3);
  std::mt19937_64 g(4);
  Tensor images = oracle::random_tensor({40, 8, 8, 1}, g, 0.5);
  k::set_parallel_threshold(std::size_t(1) << 62);
  auto [fs, ls] = model.evaluate(images);
  k::set_parallel_threshold(0);
  auto [fp, lp] = model.evaluate(images);
  EXPECT_TRUE(bit_equal(fs, fp));
  EXPECT_TRUE(bit_equal(ls, lp));
}
