// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "oracles.hpp"
#include "ttaforge/autodiff.hpp"
#include "ttaforge/error.hpp"

using namespace ttaforge;
using ad::Var;

namespace {

constexpr double kFdStep = 1e-5;
constexpr double kOpTolerance = 1e-5;
constexpr double kNetTolerance = 1e-6;

using Builder = std::function<Var(std::vector<Var>&)>;

// Reduces a non-scalar output against a fixed random weight so every output
// coordinate contributes a distinct amount to the gradient.
Var reduce(const Var& out, std::mt19937_64& gen) {
  if (out.shape().empty()) return out;
  Var w = Var::constant(oracle::random_tensor(out.shape(), gen));
  return ad::sum(ad::mul(out, w));
}

double check_op(const Builder& build, std::vector<Tensor> inputs, std::uint64_t seed = 11) {
  std::vector<Var> vars;
  for (auto& t : inputs) vars.push_back(Var::parameter(std::move(t)));
  std::mt19937_64 wgen(seed);
  Var loss = reduce(build(vars), wgen);
  ad::GradMap grads = ad::backward(loss);

  auto eval = [&] {
    ad::NoGradGuard guard;
    std::mt19937_64 g(seed);
    return reduce(build(vars), g).value().item();
  };
  double worst = 0.0;
  for (auto& v : vars) {
    auto numeric = oracle::central_difference(eval, v, {}, kFdStep);
    std::vector<double> analytic(v.value().size(), 0.0);
    if (grads.contains(v)) analytic = grads.at(v).storage();
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
  }
  return worst;
}

Tensor rnd(Shape s, std::uint64_t seed, double sd = 1.0) {
  std::mt19937_64 g(seed);
  return oracle::random_tensor(std::move(s), g, sd);
}

Tensor positive(Shape s, std::uint64_t seed) {
  Tensor t = rnd(std::move(s), seed);
  for (double& v : t.storage()) v = 0.2 + std::abs(v);
  return t;
}

}  // namespace

TEST(AutodiffExamples, SquareAtThree) {
  Var p = Var::parameter(Tensor::scalar(3.0));
  auto g = ad::backward(ad::mul(p, p));
  EXPECT_DOUBLE_EQ(g.at(p).item(), 6.0);
}

TEST(AutodiffExamples, TanhAtZero) {
  Var p = Var::parameter(Tensor::scalar(0.0));
  auto g = ad::backward(ad::tanh(p));
  EXPECT_DOUBLE_EQ(g.at(p).item(), 1.0);
}

TEST(AutodiffExamples, SharedSubexpressionAccumulates) {
  Var p = Var::parameter(Tensor::scalar(2.0));
  Var y = ad::mul(p, p);
  auto g = ad::backward(ad::add(y, ad::mul(y, p)));  // p^2 + p^3
  EXPECT_DOUBLE_EQ(g.at(p).item(), 2 * 2.0 + 3 * 4.0);
}

struct OpCase {
  const char* name;
  Builder build;
  std::vector<Tensor> inputs;
};

class OpGradient : public ::testing::TestWithParam<int> {};

std::vector<OpCase> op_cases() {
  const std::vector<std::size_t> rows = {2, 0, 2};
  const std::vector<std::size_t> cols = {1, 3, 0};
  return {
      {"matmul", [](auto& v) { return ad::matmul(v[0], v[1]); }, {rnd({3, 4}, 1), rnd({4, 2}, 2)}},
      {"transpose", [](auto& v) { return ad::transpose(v[0]); }, {rnd({3, 4}, 3)}},
      {"reshape", [](auto& v) { return ad::reshape(v[0], {2, 6}); }, {rnd({3, 4}, 4)}},
      {"add", [](auto& v) { return ad::add(v[0], v[1]); }, {rnd({3, 4}, 5), rnd({3, 4}, 6)}},
      {"sub", [](auto& v) { return ad::sub(v[0], v[1]); }, {rnd({3, 4}, 7), rnd({3, 4}, 8)}},
      {"mul", [](auto& v) { return ad::mul(v[0], v[1]); }, {rnd({3, 4}, 9), rnd({3, 4}, 10)}},
      {"add_row", [](auto& v) { return ad::add_row(v[0], v[1]); }, {rnd({3, 4}, 11), rnd({4}, 12)}},
      {"sub_row", [](auto& v) { return ad::sub_row(v[0], v[1]); }, {rnd({3, 4}, 13), rnd({4}, 14)}},
      {"mul_row", [](auto& v) { return ad::mul_row(v[0], v[1]); }, {rnd({3, 4}, 15), rnd({4}, 16)}},
      {"scale", [](auto& v) { return ad::scale(v[0], -1.7); }, {rnd({3, 4}, 17)}},
      {"add_scalar", [](auto& v) { return ad::add_scalar(v[0], 0.3); }, {rnd({3, 4}, 18)}},
      {"tanh", [](auto& v) { return ad::tanh(v[0]); }, {rnd({3, 4}, 19)}},
      {"gelu", [](auto& v) { return ad::gelu(v[0]); }, {rnd({3, 4}, 20, 2.0)}},
      {"log", [](auto& v) { return ad::log(v[0]); }, {positive({3, 4}, 21)}},
      {"exp", [](auto& v) { return ad::exp(v[0]); }, {rnd({3, 4}, 22)}},
      {"pow2", [](auto& v) { return ad::pow(v[0], 2); }, {rnd({3, 4}, 23)}},
      {"pow5", [](auto& v) { return ad::pow(v[0], 5); }, {rnd({3, 4}, 24)}},
      {"xlogx", [](auto& v) { return ad::xlogx(v[0]); }, {positive({3, 4}, 25)}},
      {"softmax_rows", [](auto& v) { return ad::softmax_rows(v[0]); }, {rnd({3, 4}, 26, 2.0)}},
      {"log_softmax_rows", [](auto& v) { return ad::log_softmax_rows(v[0]); }, {rnd({3, 4}, 27, 2.0)}},
      {"normalize_rows", [](auto& v) { return ad::normalize_rows(v[0], 1e-6); }, {rnd({3, 5}, 28)}},
      {"layer_norm", [](auto& v) { return ad::layer_norm(v[0], v[1], v[2], 1e-6); },
       {rnd({3, 5}, 29), rnd({5}, 30), rnd({5}, 31)}},
      {"sum", [](auto& v) { return ad::sum(ad::mul(v[0], v[0])); }, {rnd({3, 4}, 32)}},
      {"mean", [](auto& v) { return ad::mean(ad::mul(v[0], v[0])); }, {rnd({3, 4}, 33)}},
      {"mean_rows", [](auto& v) { return ad::mean_rows(v[0]); }, {rnd({3, 4}, 34)}},
      {"sum_cols", [](auto& v) { return ad::sum_cols(v[0]); }, {rnd({3, 4}, 35)}},
      {"row_norms", [](auto& v) { return ad::row_norms(v[0]); }, {rnd({3, 4}, 36)}},
      {"norm", [](auto& v) { return ad::norm(v[0]); }, {rnd({3, 4}, 37)}},
      {"select_rows", [rows](auto& v) { return ad::select_rows(v[0], rows); }, {rnd({3, 4}, 38)}},
      {"pick", [cols](auto& v) { return ad::pick(v[0], cols); }, {rnd({3, 4}, 39)}},
      {"prepend_token", [](auto& v) { return ad::prepend_token(v[0], v[1], 2); }, {rnd({4}, 40), rnd({6, 4}, 41)}},
      {"add_tiled", [](auto& v) { return ad::add_tiled(v[0], v[1]); }, {rnd({6, 4}, 42), rnd({3, 4}, 43)}},
      {"attention", [](auto& v) { return ad::attention(v[0], v[1], v[2], 3, 2); },
       {rnd({6, 4}, 44), rnd({6, 4}, 45), rnd({6, 4}, 46)}},
  };
}

TEST_P(OpGradient, MatchesCentralDifferences) {
  auto cases = op_cases();
  const OpCase& c = cases.at(static_cast<std::size_t>(GetParam()));
  EXPECT_LT(check_op(c.build, c.inputs), kOpTolerance) << c.name;
}

INSTANTIATE_TEST_SUITE_P(AllOps, OpGradient, ::testing::Range(0, static_cast<int>(op_cases().size())),
                         [](const auto& info) { return std::string(op_cases()[info.param].name); });

TEST(AutodiffNetwork, ThreeLayerMatchesFiniteDifferences) {
  // D=4 input, two hidden layers of width 4, scalar output.
  std::vector<Tensor> inputs = {rnd({5, 4}, 100), rnd({4, 4}, 101), rnd({4}, 102), rnd({4, 4}, 103),
                                rnd({4}, 104),    rnd({4, 1}, 105), rnd({1}, 106)};
  auto build = [](std::vector<Var>& v) {
    Var h = ad::tanh(ad::linear(v[0], v[1], v[2]));
    h = ad::gelu(ad::linear(h, v[3], v[4]));
    return ad::mean(ad::pow(ad::linear(h, v[5], v[6]), 2));
  };
  EXPECT_LT(check_op(build, inputs), kNetTolerance);
}

TEST(AutodiffZeroSafe, RowNormGradientAtZeroRow) {
  Var a = Var::parameter(Tensor::matrix({{0, 0}, {3, 4}}));
  auto g = ad::backward(ad::sum(ad::row_norms(a)));
  EXPECT_EQ(g.at(a).at(0, 0), 0.0);
  EXPECT_EQ(g.at(a).at(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(g.at(a).at(1, 0), 0.6);
  EXPECT_DOUBLE_EQ(g.at(a).at(1, 1), 0.8);
}

TEST(AutodiffZeroSafe, XlogxAtZero) {
  Var a = Var::parameter(Tensor::vector({0.0, 1.0}));
  Var y = ad::xlogx(a);
  EXPECT_EQ(y.value()[0], 0.0);
  auto g = ad::backward(ad::sum(y));
  EXPECT_TRUE(g.at(a).all_finite());
  EXPECT_DOUBLE_EQ(g.at(a)[1], 1.0);
}

TEST(AutodiffErrors, NonScalarLoss) {
  Var p = Var::parameter(Tensor::vector({1, 2}));
  EXPECT_THROW(ad::backward(ad::mul(p, p)), Error);
}

TEST(AutodiffErrors, DisconnectedLoss) {
  Var c = Var::constant(Tensor::scalar(2.0));
  EXPECT_THROW(ad::backward(ad::mul(c, c)), Error);
}

TEST(AutodiffErrors, NonFiniteLoss) {
  Var p = Var::parameter(Tensor::scalar(0.0));
  EXPECT_THROW(ad::backward(ad::log(p)), Error);
}

TEST(AutodiffGraph, NoGradGuardRecordsNothing) {
  Var p = Var::parameter(Tensor::scalar(1.5));
  ad::NoGradGuard guard;
  Var y = ad::mul(p, p);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.node()->is_leaf());
}

TEST(AutodiffGraph, OnlyRequiringLeavesReturned) {
  Var p = Var::parameter(Tensor::scalar(1.5));
  Var q = Var::parameter(Tensor::scalar(2.0));
  q.set_requires_grad(false);
  auto g = ad::backward(ad::mul(p, q));
  EXPECT_TRUE(g.contains(p));
  EXPECT_FALSE(g.contains(q));
  EXPECT_DOUBLE_EQ(g.at(p).item(), 2.0);
}

TEST(AutodiffGraph, RepeatedBackwardIsBitIdentical) {
  std::vector<Tensor> in = {rnd({4, 3}, 7), rnd({3, 3}, 8)};
  auto run = [&] {
    Var x = Var::constant(in[0]);
    Var w = Var::parameter(in[1]);
    auto g = ad::backward(ad::sum(ad::tanh(ad::matmul(x, w))));
    return g.at(w);
  };
  EXPECT_TRUE(bit_equal(run(), run()));
}
