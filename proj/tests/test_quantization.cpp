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
#include <set>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "hqod/detector.hpp"
#include "hqod/optim.hpp"
#include "hqod/quantization.hpp"
#include "hqod/random.hpp"

using namespace hqod;

namespace {

// Independent reference: round half to even by integer parity.
double ref_round(double x) {
  double f = std::floor(x), d = x - f;
  if (d < 0.5) return f;
  if (d > 0.5) return f + 1;
  return std::fmod(f, 2.0) == 0.0 ? f : f + 1;
}

double ref_fq(double v, double s, std::int64_t lo, std::int64_t hi) {
  double q = ref_round(v / s);
  q = std::min<double>(std::max<double>(q, static_cast<double>(lo)), static_cast<double>(hi));
  return s * q;
}

}  // namespace

TEST(Range, SignedAndUnsignedFormulas) {
  for (int b : {2, 3, 4, 8}) {
    auto s = int_range(b, true), u = int_range(b, false);
    EXPECT_EQ(s.n_min, -static_cast<std::int64_t>(std::ldexp(1.0, b - 1)));
    EXPECT_EQ(s.n_max, static_cast<std::int64_t>(std::ldexp(1.0, b - 1)) - 1);
    EXPECT_EQ(u.n_min, 0);
    EXPECT_EQ(u.n_max, static_cast<std::int64_t>(std::ldexp(1.0, b)) - 1);
  }
  EXPECT_EQ(int_range(2, true), (IntRange{-2, 1}));
  EXPECT_THROW(int_range(1, true), std::invalid_argument);
}

TEST(Rounding, HalfToEven) {
  EXPECT_EQ(round_half_even(0.5), 0.0);
  EXPECT_EQ(round_half_even(1.5), 2.0);
  EXPECT_EQ(round_half_even(2.5), 2.0);
  EXPECT_EQ(round_half_even(-0.5), -0.0);
  EXPECT_EQ(round_half_even(-1.5), -2.0);
  EXPECT_EQ(round_half_even(0.6), 1.0);
  EXPECT_EQ(round_half_even(-2.8), -3.0);
}

TEST(FakeQuantize, HandExamples) {
  QuantParams qp(2, true, QuantMode::Fixed, 0.5);
  auto y = fake_quantize(Tensor::vector({0.3, -1.4, 0.0}), qp);
  EXPECT_EQ(y[0], 0.5);
  EXPECT_EQ(y[1], -1.0);
  EXPECT_EQ(y[2], 0.0);
  for (int b : {2, 4, 8})
    for (double s : {0.01, 0.3, 7.0}) EXPECT_EQ(fake_quantize(Tensor::vector({0.0}), QuantParams(b, false, QuantMode::Lsq, s))[0], 0.0);
}

TEST(FakeQuantize, NonPositiveStepRejected) {
  EXPECT_THROW(QuantParams(4, true, QuantMode::Fixed, 0.0), std::invalid_argument);
  QuantParams qp(4, true, QuantMode::Fixed, 1.0);
  qp.parameter().mutable_values()[0] = -1.0;
  EXPECT_THROW(fake_quantize(Tensor::vector({1.0}), qp), std::invalid_argument);
}

TEST(FakeQuantize, IdempotentCodomainAndMatchesReference) {
  Rng rng(123);
  for (int trial = 0; trial < 10000; ++trial) {
    int b = std::array<int, 3>{2, 4, 8}[rng.below(3)];
    bool sg = rng.below(2) == 1;
    double s = std::exp(rng.uniform(-5, 2));
    QuantParams qp(b, sg, QuantMode::Fixed, s);
    double v = rng.uniform(-2, 2) * s * std::ldexp(1.0, b);
    auto once = fake_quantize(Tensor::vector({v}), qp);
    auto twice = fake_quantize(once, qp);
    ASSERT_EQ(once[0], twice[0]);
    ASSERT_EQ(once[0], ref_fq(v, s, qp.n_min(), qp.n_max()));
    double n = std::round(once[0] / s);
    ASSERT_EQ(s * n, once[0]);
    ASSERT_GE(n, static_cast<double>(qp.n_min()));
    ASSERT_LE(n, static_cast<double>(qp.n_max()));
  }
}

TEST(FakeQuantize, MonotoneInInput) {
  QuantParams qp(3, true, QuantMode::Fixed, 0.37);
  double prev = -1e300;
  for (int i = -2000; i <= 2000; ++i) {
    double y = fake_quantize(Tensor::vector({i * 0.001}), qp)[0];
    ASSERT_GE(y, prev);
    prev = y;
  }
}

TEST(Ste, PassesInRangeBlocksOutside) {
  QuantParams qp(4, true, QuantMode::Fixed, 1.0);  // n_max = 7
  std::vector<double> up{2.0, 3.0, 5.0};
  std::vector<double> v{0.4, 100.0, -9.0};
  auto g = ste_backward(up, v, qp);
  EXPECT_EQ(g, (std::vector<double>{2.0, 0.0, 0.0}));
  std::vector<double> inr{0.1, -3.2, 6.9};
  EXPECT_EQ(ste_backward(up, inr, qp), up);
}

TEST(Ste, MatchesDeRoundedSurrogate) {
  // Gradient to v equals the derivative of s*clip(v/s, n_min, n_max).
  Rng rng(5);
  QuantParams qp(3, true, QuantMode::Fixed, 0.25);
  for (int trial = 0; trial < 100; ++trial) {
    double q;
    do q = rng.uniform(-6, 5); while (std::fabs(q - std::round(q)) > 0.5 - 1e-3 || std::fabs(q + 4) < 1e-3 || std::fabs(q - 3) < 1e-3);
    double v = q * 0.25, w = rng.uniform(-1, 1);
    Tensor x = Tensor::vector({v}, true);
    backward(sum(fake_quantize(x, qp) * w));
    const double h = 1e-5;
    auto sur = [&](double a) { return w * 0.25 * std::clamp(a / 0.25, -4.0, 3.0); };
    double num = (sur(v + h) - sur(v - h)) / (2 * h);
    EXPECT_NEAR(x.grad()[0], num, 1e-4 * std::max(1.0, std::fabs(num)));
  }
}

TEST(Lsq, StepSensitivityCases) {
  IntRange r{-4, 3};
  EXPECT_EQ(step_sensitivity(2.0, 1.0, r), 0.0);
  EXPECT_NEAR(step_sensitivity(0.6, 1.0, r), 0.4, 1e-15);
  EXPECT_EQ(step_sensitivity(100.0, 1.0, r), 3.0);
  EXPECT_EQ(step_sensitivity(-100.0, 1.0, r), -4.0);
}

TEST(Lsq, StepGradientThroughFakeQuantize) {
  Rng rng(8);
  QuantParams qp(4, true, QuantMode::Lsq, 0.3);
  std::vector<double> v(50), up(50);
  for (auto& x : v) x = rng.uniform(-4, 4);
  for (auto& x : up) x = rng.uniform(-1, 1);
  auto y = fake_quantize(Tensor::vector(v), qp);
  backward(sum(y * Tensor::vector(up)));
  double ref = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    double q = v[i] / 0.3, d = q < -8 ? -8.0 : q > 7 ? 7.0 : ref_round(q) - q;
    ref += up[i] * d;
  }
  ref /= std::sqrt(50.0 * 7.0);
  EXPECT_NEAR(qp.parameter().grad()[0], ref, 1e-12);
  EXPECT_NEAR(lsq_step_gradient(up, v, qp), ref, 1e-12);
}

TEST(Lsq, StepGradientMatchesFrozenResidualSurrogate) {
  // Rounding residual r held fixed (zero outside the range): s*(clip(v/s) + r)
  // has derivative r in range and the clip bound outside.
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    double s = rng.uniform(0.1, 1.0), v = rng.uniform(-3, 3);
    QuantParams qp(3, true, QuantMode::Lsq, s);
    double q0 = v / s;
    if (std::fabs(q0 - std::round(q0)) > 0.499 || std::fabs(q0 + 4) < 1e-2 || std::fabs(q0 - 3) < 1e-2) continue;
    double r = (q0 >= -4 && q0 <= 3) ? ref_round(q0) - q0 : 0.0;
    auto sur = [&](double st) { return st * (std::clamp(v / st, -4.0, 3.0) + r); };
    const double h = 1e-6;
    double num = (sur(s + h) - sur(s - h)) / (2 * h);
    backward(sum(fake_quantize(Tensor::vector({v}), qp)));
    double g = 1.0 / std::sqrt(3.0);
    EXPECT_NEAR(qp.parameter().grad()[0], g * num, 1e-6);
  }
}

TEST(Tqt, PowerOfTwoStep) {
  EXPECT_EQ(QuantParams(4, true, QuantMode::Tqt, 0.5).step_value(), 0.5);
  auto with_theta = [](double theta) {
    QuantParams qp(4, true, QuantMode::Tqt, 1.0);
    qp.parameter().mutable_values()[0] = theta;
    return qp;
  };
  EXPECT_EQ(with_theta(-1.4).step_value(), 0.5);
  EXPECT_EQ(with_theta(3.0).step_value(), 8.0);
  EXPECT_EQ(with_theta(0.5).step_value(), 1.0);
  EXPECT_EQ(tqt_pot_step(with_theta(-1.4)).item(), 0.5);
}

TEST(Tqt, StepStaysPowerOfTwoUnderTraining) {
  Rng rng(4);
  QuantParams qp(2, true, QuantMode::Tqt, 0.7);
  Adam opt({{{qp.parameter()}, 0.05}});
  std::vector<double> v(64);
  for (auto& x : v) x = rng.normal();
  for (int it = 0; it < 50; ++it) {
    opt.zero_grad();
    auto y = fake_quantize(Tensor::vector(v), qp);
    auto err = y - Tensor::vector(v);
    backward(sum(err * err));
    opt.step();
    double s = qp.step_value();
    int e;
    ASSERT_EQ(std::frexp(s, &e), 0.5) << s;
  }
}

TEST(InitStep, Formula) {
  QuantParams qp(2, true, QuantMode::Lsq);
  std::vector<double> pm{1, -1, 1, -1};
  EXPECT_EQ(init_step(pm, qp), 2.0);
  std::vector<double> z(5, 0.0);
  EXPECT_EQ(init_step(z, qp), 1.0);
  QuantParams q4(4, true, QuantMode::Lsq);
  std::vector<double> c(7, -0.3);
  EXPECT_NEAR(init_step(c, q4), 2 * 0.3 / std::sqrt(7.0), 1e-15);
}

TEST(StepClamp, FloorAndCounter) {
  QuantParams qp(4, true, QuantMode::Lsq, 0.1);
  qp.parameter().mutable_values()[0] = -0.5;
  EXPECT_TRUE(qp.clamp_step());
  EXPECT_EQ(qp.step_value(), kMinStep);
  EXPECT_FALSE(qp.clamp_step());
}

TEST(BitPolicy, BoundaryLayersStayAtEightBits) {
  for (int bw : {2, 4, 8}) {
    DetectorNet net;
    apply_bit_policy(net, BitPolicy{bw, {}}, QuantMode::Lsq);
    for (const auto& l : net.layers()) {
      int expect = l.boundary ? 8 : bw;
      ASSERT_TRUE(l.quant.weight && l.quant.activation) << l.name;
      EXPECT_EQ(l.quant.weight->bits(), expect) << l.name;
      EXPECT_EQ(l.quant.activation->bits(), expect) << l.name;
      EXPECT_TRUE(l.quant.weight->is_signed());
      EXPECT_EQ(l.quant.activation->is_signed(), !l.input_nonnegative);
    }
  }
  for (auto name : {"stem", "cls_head", "reg_head"}) {
    DetectorNet net;
    EXPECT_TRUE(net.layer(name).boundary);
  }
}

TEST(BitPolicy, OverridesAndValidation) {
  DetectorNet net;
  BitPolicy p{4, {{"block2", 3}}};
  apply_bit_policy(net, p, QuantMode::Fixed);
  EXPECT_EQ(net.layer("block2").quant.weight->bits(), 3);
  EXPECT_EQ(net.layer("block1").quant.weight->bits(), 4);
  EXPECT_THROW(apply_bit_policy(net, BitPolicy{4, {{"nope", 3}}}, QuantMode::Fixed), std::invalid_argument);
  EXPECT_THROW((BitPolicy{1, {}}.validate()), std::invalid_argument);
  DetectorNet fp;
  apply_bit_policy(fp, BitPolicy{}, QuantMode::Lsq);
  EXPECT_FALSE(fp.quantized());
  EXPECT_EQ(BitPolicy::from_kv(p.to_kv()), p);
}

TEST(QuantMode, Parsing) {
  EXPECT_EQ(parse_quant_mode("TQT"), QuantMode::Tqt);
  EXPECT_EQ(to_string(QuantMode::Lsq), "LSQ");
  EXPECT_THROW(parse_quant_mode("lsq"), std::invalid_argument);
}
