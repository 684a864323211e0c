#include <gtest/gtest.h>

#include <functional>
#include <random>

#include "oracles.hpp"

using sap::MatD;
namespace ad = sap::ad;

namespace {

using UnaryOp = std::function<ad::Var<double>(ad::Graph<double> &, ad::Var<double>)>;

// Loss = sum(op(x) * R) for a fixed random R; compares the tape gradient with
// central differences entry by entry.
double max_gradient_error(const MatD &x0, const UnaryOp &op, std::uint64_t seed = 3) {
  std::mt19937_64 rng(seed);
  MatD weights;
  auto loss = [&](const MatD &x, MatD *grad) {
    ad::Graph<double> g;
    auto xv = g.parameter(x);
    auto y = op(g, xv);
    if (weights.size() == 0) weights = oracle::random_matrix(rng, y.rows(), y.cols());
    std::vector<ad::Var<double>> parts;
    for (Eigen::Index i = 0; i < y.rows(); ++i)
      parts.push_back(ad::row_dots(ad::slice_rows(y, i, 1), g.constant(MatD(weights.row(i)))));
    auto l = ad::sum(ad::vstack(std::span<const ad::Var<double>>(parts)));
    if (grad) {
      g.backward(l);
      *grad = g.grad(xv);
    }
    return l.value()(0, 0);
  };
  MatD analytic;
  loss(x0, &analytic);
  double worst = 0;
  const double h = 1e-6;
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    MatD up = x0, down = x0;
    up.data()[i] += h;
    down.data()[i] -= h;
    const double numeric = (loss(up, nullptr) - loss(down, nullptr)) / (2 * h);
    worst = std::max(worst, std::abs(numeric - analytic.data()[i]) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

MatD sample(Eigen::Index r, Eigen::Index c, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  return oracle::random_matrix(rng, r, c);
}

}  // namespace

TEST(Autodiff, ElementwiseAndReductionGradients) {
  const MatD x = sample(3, 5);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::tanh(v); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::scale(v, -2.5); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::mean_rows(v); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::sum(v); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::sorted_mean(v); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::abs_sum(v); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::transpose(v); }), 1e-7);
}

TEST(Autodiff, RowwiseGradients) {
  const MatD x = sample(4, 6, 2);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::softmax_rows(v); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::normalize_rows(v); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::max_rows(v); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &g, auto v) { return ad::row_dots(v, g.constant(sample(1, 6, 9))); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &g, auto v) { return ad::row_dots(g.constant(sample(4, 6, 9)), ad::slice_rows(v, 1, 1)); }),
            1e-7);
}

TEST(Autodiff, StructuralGradients) {
  const MatD x = sample(4, 3, 4);
  EXPECT_LT(max_gradient_error(x, [](auto &g, auto v) { return ad::matmul(v, g.constant(sample(3, 2, 5))); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &g, auto v) { return ad::matmul(g.constant(sample(2, 4, 5)), v); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::matmul(v, ad::transpose(v)); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::slice_rows(v, 1, 2); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::vstack({v, ad::slice_rows(v, 0, 1), v}); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) {
              std::vector<ad::Var<double>> cols = {v, ad::tanh(v)};
              return ad::hstack(std::span<const ad::Var<double>>(cols));
            }),
            1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &g, auto v) { return ad::add(v, g.constant(sample(1, 3, 6))); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::add(v, ad::mean_rows(v)); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) { return ad::sub(v, ad::slice_rows(v, 2, 1)); }), 1e-7);
  EXPECT_LT(max_gradient_error(x, [](auto &, auto v) {
              auto s = ad::sorted_mean(v);
              return ad::scale_by(v, ad::one_minus(s));
            }),
            1e-7);
}

TEST(Autodiff, CrossEntropyGradientAndValue) {
  const MatD logits = sample(3, 4, 7);
  const std::vector<std::size_t> labels = {0, 3, 1};
  EXPECT_LT(max_gradient_error(logits, [&](auto &, auto v) { return ad::cross_entropy(v, std::span<const std::size_t>(labels)); }),
            1e-7);
  ad::Graph<double> g;
  const double value = ad::cross_entropy(g.constant(logits), std::span<const std::size_t>(labels)).value()(0, 0);
  EXPECT_NEAR(value, oracle::cross_entropy(oracle::rows_of(logits), labels, 1.0), 1e-12);
}

TEST(Autodiff, NormalizeRowsRejectsZeroRow) {
  ad::Graph<double> g;
  MatD x = sample(2, 3);
  x.row(1).setZero();
  EXPECT_THROW(ad::normalize_rows(g.constant(x)), std::domain_error);
}

TEST(Autodiff, BackwardNeedsScalarRootAndLeavesUntouchedGradientsZero) {
  ad::Graph<double> g;
  auto a = g.parameter(sample(2, 2));
  auto b = g.parameter(sample(2, 2, 8));
  EXPECT_THROW(g.backward(a), std::invalid_argument);
  auto l = ad::sum(a);
  g.backward(l);
  EXPECT_TRUE(g.grad(a).isApprox(MatD::Ones(2, 2)));
  EXPECT_EQ(g.grad(b), MatD::Zero(2, 2));
}

TEST(Autodiff, RepeatedBackwardDoesNotAccumulateAcrossPasses) {
  ad::Graph<double> g;
  auto a = g.parameter(sample(2, 2));
  auto l = ad::sum(ad::tanh(a));
  g.backward(l);
  const MatD first = g.grad(a);
  g.backward(l);
  EXPECT_EQ(g.grad(a), first);
}

TEST(Autodiff, SortedMeanIsOrderInvariantBitForBit) {
  std::mt19937_64 rng(11);
  MatD x = oracle::random_matrix(rng, 1, 17);
  MatD y = x;
  std::shuffle(y.data(), y.data() + y.size(), rng);
  ad::Graph<double> g;
  EXPECT_EQ(ad::sorted_mean(g.constant(x)).value()(0, 0), ad::sorted_mean(g.constant(y)).value()(0, 0));
}

TEST(Autodiff, MixingGraphsIsAnError) {
  ad::Graph<double> g1, g2;
  auto a = g1.constant(sample(2, 2));
  auto b = g2.constant(sample(2, 2));
  EXPECT_THROW(ad::matmul(a, b), std::invalid_argument);
}
