/* Copyright 2026 The HQOD Lab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#include <cmath>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "hqod/random.hpp"
#include "hqod/tensor.hpp"

using namespace hqod;

namespace {

Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.size());
  for (auto& v : w) v = rng.uniform(-1.0, 1.0);
  return sum(y * Tensor(y.shape(), w));
}

// Random vector whose entries stay at least `gap` away from each kink.
Tensor away_from(std::vector<double> kinks, std::size_t n, double lo, double hi, Rng& rng, double gap = 1e-3) {
  std::vector<double> v(n);
  for (auto& x : v) {
    bool ok = false;
    while (!ok) {
      x = rng.uniform(lo, hi);
      ok = true;
      for (double k : kinks) ok = ok && std::fabs(x - k) > gap;
    }
  }
  return Tensor::vector(v);
}

}  // namespace

TEST(Elementwise, ExpOfZeroIsOne) {
  EXPECT_EQ(exp(Tensor::vector({0.0}))[0], 1.0);
}

TEST(Elementwise, PowHalfHalf) {
  auto y = pow(Tensor::vector({0.5}), Tensor::vector({0.5}));
  EXPECT_NEAR(y[0], std::sqrt(0.5), 1e-16);
  EXPECT_NEAR(y[0], 0.7071067811865476, 1e-16);
}

TEST(Elementwise, SigmoidOfZeroIsHalf) {
  EXPECT_EQ(sigmoid(Tensor::vector({0.0}))[0], 0.5);
}

TEST(Elementwise, DomainErrors) {
  EXPECT_THROW(ln(Tensor::vector({-1.0})), std::domain_error);
  EXPECT_THROW(pow(Tensor::vector({-2.0}), Tensor::scalar(0.5)), std::domain_error);
  EXPECT_NO_THROW(pow(Tensor::vector({-2.0}), Tensor::scalar(3.0)));
  EXPECT_EQ(pow(Tensor::vector({-2.0}), Tensor::scalar(3.0))[0], -8.0);
}

TEST(Elementwise, BroadcastShapes) {
  Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor b({3}, {10, 20, 30});
  auto c = a + b;
  EXPECT_EQ(c.shape(), (Shape{2, 3}));
  EXPECT_EQ(c.values(), (std::vector<double>{11, 22, 33, 14, 25, 36}));
  Tensor col({2, 1}, {1, 2});
  EXPECT_EQ((a * col).values(), (std::vector<double>{1, 2, 3, 8, 10, 12}));
  EXPECT_THROW(a + Tensor::vector({1, 2}), std::invalid_argument);
}

TEST(Elementwise, DispatcherMatchesDirectCalls) {
  Tensor a = Tensor::vector({0.3, 1.7, 2.2}), b = Tensor::vector({1.1, 0.4, 2.2});
  std::vector<Tensor> two{a, b}, one{a};
  EXPECT_EQ(elementwise(ElementwiseOp::Pow, two).values(), pow(a, b).values());
  EXPECT_EQ(elementwise(ElementwiseOp::Max, two).values(), maximum(a, b).values());
  EXPECT_EQ(elementwise(ElementwiseOp::Clamp, one, 0.5, 2.0).values(), clamp(a, 0.5, 2.0).values());
  EXPECT_THROW(elementwise(ElementwiseOp::Add, one), std::invalid_argument);
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto pos = away_from({}, 5, 0.2, 2.0, rng);
    auto any = away_from({0.0}, 5, -2.0, 2.0, rng);
    auto other = away_from({}, 5, 0.3, 1.5, rng);
    auto seed = static_cast<std::uint64_t>(trial);
    auto check = [&](auto f, const Tensor& x) {
      auto r = finite_diff_check([&](const Tensor& t) { return weighted_sum(f(t), seed); }, x);
      EXPECT_TRUE(r.passed) << "max rel err " << r.max_rel_error;
    };
    check([&](const Tensor& t) { return t + other; }, any);
    check([&](const Tensor& t) { return other - t; }, any);
    check([&](const Tensor& t) { return t * other; }, any);
    check([&](const Tensor& t) { return other / t; }, pos);
    check([&](const Tensor& t) { return t / other; }, any);
    check([&](const Tensor& t) { return exp(t); }, any);
    check([&](const Tensor& t) { return ln(t); }, pos);
    check([&](const Tensor& t) { return pow(t, other); }, pos);
    check([&](const Tensor& t) { return pow(other, t); }, any);
    check([&](const Tensor& t) { return abs(t); }, any);
    check([&](const Tensor& t) { return relu(t); }, any);
    check([&](const Tensor& t) { return sigmoid(t); }, any);
    check([&](const Tensor& t) { return clamp(t, -1.0, 1.0); }, away_from({-1.0, 1.0}, 5, -2.0, 2.0, rng));
    auto m = away_from({}, 5, -2.0, 2.0, rng);
    auto y = m + Tensor::full({5}, 0.01);
    check([&](const Tensor& t) { return maximum(t, y); }, m);
    check([&](const Tensor& t) { return minimum(t, y); }, m);
  }
}

TEST(Matmul, IdentityAndHandExample) {
  Tensor I({2, 2}, {1, 0, 0, 1});
  Tensor M({2, 2}, {3, -1, 2, 5});
  EXPECT_EQ(matmul(I, M).values(), M.values());
  auto r = matmul(Tensor({2, 2}, {1, 2, 3, 4}), Tensor({2, 1}, {1, 1}));
  EXPECT_EQ(r.shape(), (Shape{2, 1}));
  EXPECT_EQ(r.values(), (std::vector<double>{3, 7}));
  EXPECT_THROW(matmul(Tensor({2, 3}, std::vector<double>(6, 1)), M), std::invalid_argument);
}

TEST(Matmul, GradientsForBothOperands) {
  Rng rng(3);
  std::vector<double> av(6), bv(12);
  for (auto& v : av) v = rng.uniform(-1, 1);
  for (auto& v : bv) v = rng.uniform(-1, 1);
  Tensor a({2, 3}, av), b({3, 4}, bv);
  EXPECT_TRUE(finite_diff_check([&](const Tensor& t) { return weighted_sum(matmul(t, b), 1); }, a).passed);
  EXPECT_TRUE(finite_diff_check([&](const Tensor& t) { return weighted_sum(matmul(a, t), 2); }, b).passed);
}

TEST(Conv, MatchesDirectLoopAndGradients) {
  Rng rng(11);
  const std::size_t N = 2, C = 2, H = 5, W = 5, K = 3;
  std::vector<double> xv(N * C * H * W), wv(K * C * 9);
  for (auto& v : xv) v = rng.uniform(-1, 1);
  for (auto& v : wv) v = rng.uniform(-1, 1);
  Tensor x({N, C, H, W}, xv), w({K, C, 3, 3}, wv);
  for (std::size_t stride : {1u, 2u}) {
    auto y = conv2d(x, w, {stride, 1});
    const std::size_t Ho = (H + 2 - 3) / stride + 1, Wo = (W + 2 - 3) / stride + 1;
    ASSERT_EQ(y.shape(), (Shape{N, K, Ho, Wo}));
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t k = 0; k < K; ++k)
        for (std::size_t i = 0; i < Ho; ++i)
          for (std::size_t j = 0; j < Wo; ++j) {
            double acc = 0;
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t di = 0; di < 3; ++di)
                for (std::size_t dj = 0; dj < 3; ++dj) {
                  long yi = static_cast<long>(i * stride + di) - 1, xj = static_cast<long>(j * stride + dj) - 1;
                  if (yi < 0 || xj < 0 || yi >= static_cast<long>(H) || xj >= static_cast<long>(W)) continue;
                  acc += xv[((n * C + c) * H + yi) * W + xj] * wv[((k * C + c) * 3 + di) * 3 + dj];
                }
            EXPECT_NEAR(y[((n * K + k) * Ho + i) * Wo + j], acc, 1e-12);
          }
    EXPECT_TRUE(finite_diff_check([&](const Tensor& t) { return weighted_sum(conv2d(t, w, {stride, 1}), 5); }, x).passed);
    EXPECT_TRUE(finite_diff_check([&](const Tensor& t) { return weighted_sum(conv2d(x, t, {stride, 1}), 6); }, w).passed);
  }
  Tensor b = Tensor::vector({0.1, -0.2, 0.3});
  EXPECT_TRUE(finite_diff_check([&](const Tensor& t) { return weighted_sum(bias_add(conv2d(x, w), t), 9); }, b).passed);
}

TEST(Reduce, SumMeanMaxAlongAxes) {
  Tensor t({2, 3}, {1, 5, 3, 4, 2, 6});
  EXPECT_EQ(sum(t).item(), 21);
  EXPECT_EQ(sum(t, {0}).values(), (std::vector<double>{5, 7, 9}));
  EXPECT_EQ(mean(t, {1}).values(), (std::vector<double>{3, 4}));
  EXPECT_EQ(max(t, {1}).values(), (std::vector<double>{5, 6}));
  Rng rng(2);
  auto x = away_from({}, 6, -1, 1, rng);
  auto x2 = reshape(x, {2, 3});
  EXPECT_TRUE(finite_diff_check([&](const Tensor& v) { return weighted_sum(sum(reshape(v, {2, 3}), {0}), 1); }, x).passed);
  EXPECT_TRUE(finite_diff_check([&](const Tensor& v) { return weighted_sum(mean(reshape(v, {2, 3}), {1}), 2); }, x).passed);
  EXPECT_TRUE(finite_diff_check([&](const Tensor& v) { return weighted_sum(max(reshape(v, {2, 3}), {1}), 3); }, x).passed);
  EXPECT_TRUE(finite_diff_check([&](const Tensor& v) { return weighted_sum(gather(v, {4, 0, 4}), 4); }, x).passed);
  EXPECT_EQ(x2.values(), x.values());
}

TEST(Graph, GradientFlagRules) {
  Tensor a = Tensor::vector({1, 2}), b = Tensor::vector({3, 4}, true);
  auto y = sum(a * b);
  backward(y);
  EXPECT_FALSE(a.has_grad());
  EXPECT_EQ(b.grad(), (std::vector<double>{1, 2}));
  a.accumulate_grad(std::vector<double>{1, 1});
  EXPECT_FALSE(a.has_grad());
}

TEST(Graph, SharedSubexpressionVisitedOnce) {
  Tensor x = Tensor::vector({3.0}, true);
  auto a = x * x;
  auto y = sum(a + a * a);  // x^2 + x^4
  std::size_t visited = backward(y);
  EXPECT_EQ(visited, 4u);  // x*x, a*a, add, sum
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * 3.0 + 4 * 27.0);
}

TEST(Graph, RepeatedBackwardAccumulatesOnLeaves) {
  Tensor x = Tensor::vector({2.0}, true);
  auto y = sum(exp(x) * x);
  backward(y);
  double g = x.grad()[0];
  backward(y);
  EXPECT_DOUBLE_EQ(x.grad()[0], 2 * g);
  x.zero_grad();
  EXPECT_FALSE(x.has_grad());
}

TEST(Graph, NoGradGuardAndDetach) {
  Tensor x = Tensor::vector({1.5}, true);
  {
    NoGradGuard g;
    auto y = x * x;
    EXPECT_TRUE(y.is_leaf());
    EXPECT_FALSE(y.requires_grad());
  }
  auto y = x * detach(x);
  backward(sum(y));
  EXPECT_DOUBLE_EQ(x.grad()[0], 1.5);
  EXPECT_THROW(backward(Tensor::vector({1.0, 2.0}, true) * x), std::invalid_argument);
}

TEST(Graph, CustomGradient) {
  Tensor x = Tensor::vector({0.2, 1.4}, true);
  auto y = custom_grad([](std::span<const Tensor> in) { return in[0] * 3.0; },
                       [](const Tensor& out, std::span<const Tensor>) {
                         std::vector<double> g(out.grad());
                         for (auto& v : g) v *= 7.0;
                         return std::vector<std::vector<double>>{g};
                       },
                       {x});
  EXPECT_EQ(y.values(), (std::vector<double>{0.2 * 3.0, 1.4 * 3.0}));
  backward(sum(y));
  EXPECT_EQ(x.grad(), (std::vector<double>{7.0, 7.0}));
  auto bad = custom_grad([](std::span<const Tensor> in) { return in[0] * 1.0; },
                         [](const Tensor&, std::span<const Tensor>) { return std::vector<std::vector<double>>{}; }, {x});
  EXPECT_THROW(backward(sum(bad)), std::invalid_argument);
}

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), std::invalid_argument);
  EXPECT_THROW(Tensor({0}, {}), std::invalid_argument);
  Tensor t({2, 3}, std::vector<double>(6, 1.0), true);
  backward(sum(t * t));
  EXPECT_EQ(t.grad().size(), t.size());
  EXPECT_THROW(t.item(), std::logic_error);
}
