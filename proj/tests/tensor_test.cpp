/*
 * Copyright 2026 The pestnet Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "pestnet/gradcheck.hpp"
#include "pestnet/ops.hpp"
#include "test_util.hpp"

namespace pestnet {
namespace {

using testing::random_tensor;
using testing::weighted_sum;

constexpr double kGradTol = 1e-4;

// Reference oracles, written independently of the op implementations.

std::vector<double> triple_loop_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                       std::size_t k, std::size_t n) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

// Direct sliding window over an explicitly zero-padded image, single image, groups 1.
std::vector<double> sliding_window_conv(const Tensor& x, const Tensor& w, std::size_t stride, std::size_t pad) {
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const std::size_t Hp = H + 2 * pad, Wp = W + 2 * pad;
  std::vector<double> padded(C * Hp * Wp, 0.0);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t xx = 0; xx < W; ++xx) padded[(c * Hp + y + pad) * Wp + xx + pad] = x.at({c, y, xx});
  const std::size_t Ho = (Hp - kh) / stride + 1, Wo = (Wp - kw) / stride + 1;
  std::vector<double> out(O * Ho * Wo, 0.0);
  for (std::size_t o = 0; o < O; ++o)
    for (std::size_t y = 0; y < Ho; ++y)
      for (std::size_t xx = 0; xx < Wo; ++xx) {
        double acc = 0.0;
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j)
              acc += w.at({o, c, i, j}) * padded[(c * Hp + y * stride + i) * Wp + xx * stride + j];
        out[(o * Ho + y) * Wo + xx] = acc;
      }
  return out;
}

TEST(Elementwise, ReluSigmoidGeluAtDefiningPoints) {
  Tensor x({3}, {-1.0, 0.0, 2.0});
  EXPECT_EQ(relu(x).values(), (std::vector<double>{0.0, 0.0, 2.0}));
  EXPECT_EQ(sigmoid(Tensor::scalar(0.0)).item(), 0.5);
  EXPECT_EQ(gelu(Tensor::scalar(0.0)).item(), 0.0);
}

TEST(Elementwise, ShapeMismatchNamesBothShapes) {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({3, 2});
  try {
    (void)add(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    EXPECT_EQ(e.lhs, (Shape{2, 3}));
    EXPECT_EQ(e.rhs, (Shape{3, 2}));
    EXPECT_NE(std::string(e.what()).find("[2,3] vs [3,2]"), std::string::npos);
  }
}

TEST(Elementwise, DomainErrors) {
  EXPECT_THROW((void)log(Tensor({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW((void)log(Tensor({1}, {-2.0})), DomainError);
  EXPECT_THROW((void)div(Tensor::ones({2}), Tensor({2}, {1.0, 0.0})), DomainError);
  EXPECT_THROW((void)div(Tensor::ones({2}), 0.0), DomainError);
}

TEST(Elementwise, ScalarOperandsAndOperators) {
  Tensor x({2}, {1.0, 2.0});
  EXPECT_EQ(((x + 1.0) * 2.0 - 1.0).values(), (std::vector<double>{3.0, 5.0}));
  EXPECT_EQ((x / 2.0).values(), (std::vector<double>{0.5, 1.0}));
  EXPECT_EQ((-x).values(), (std::vector<double>{-1.0, -2.0}));
}

TEST(Matmul, IdentityAndZero) {
  Tensor eye({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor b = random_tensor(3, {3, 3});
  EXPECT_EQ(matmul(eye, b).values(), b.values());
  Tensor z = matmul(Tensor::zeros({2, 3}), random_tensor(4, {3, 4}));
  EXPECT_EQ(z.shape(), (Shape{2, 4}));
  for (double v : z.values()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, MatchesTripleLoopOracle) {
  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor b({2, 1}, {5, 6});
  EXPECT_EQ(triple_loop_matmul(a.values(), b.values(), 2, 2, 1), (std::vector<double>{17, 39}));
  EXPECT_EQ(matmul(a, b).values(), (std::vector<double>{17, 39}));

  Tensor r = random_tensor(5, {4, 6});
  Tensor s = random_tensor(6, {6, 3});
  const auto oracle = triple_loop_matmul(r.values(), s.values(), 4, 6, 3);
  const Tensor c = matmul(r, s);
  for (std::size_t i = 0; i < oracle.size(); ++i) EXPECT_NEAR(c[i], oracle[i], 1e-14);
}

TEST(Matmul, InnerDimensionMismatch) {
  EXPECT_THROW((void)matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3})), ShapeError);
}

TEST(Conv2d, IdentityKernelIsBitExact) {
  Tensor x = random_tensor(7, {1, 5, 5});
  Tensor w({1, 1, 1, 1}, {1.0});
  Tensor y = conv2d(x, w, Tensor::zeros({1}));
  EXPECT_EQ(y.values(), x.values());
}

TEST(Conv2d, AllOnesKernelOverConstantImage) {
  const double c = 0.7;
  Tensor x = Tensor::full({1, 6, 6}, c);
  Tensor w = Tensor::ones({1, 1, 3, 3});
  Tensor y = conv2d(x, w, std::nullopt);
  EXPECT_EQ(y.shape(), (Shape{1, 4, 4}));
  const auto oracle = sliding_window_conv(x, w, 1, 0);
  for (std::size_t i = 0; i < y.numel(); ++i) {
    EXPECT_DOUBLE_EQ(oracle[i], 9 * c);
    EXPECT_DOUBLE_EQ(y[i], oracle[i]);
  }
}

TEST(Conv2d, ShapeArithmeticAndOracle) {
  Tensor x = random_tensor(8, {3, 8, 8});
  Tensor w = random_tensor(9, {4, 3, 3, 3});
  Tensor y = conv2d(x, w, std::nullopt, {.stride = 1, .padding = 1});
  EXPECT_EQ(y.shape(), (Shape{4, 8, 8}));
  const auto oracle = sliding_window_conv(x, w, 1, 1);
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], oracle[i], 1e-13);

  Tensor y2 =
      conv2d(random_tensor(10, {2, 9, 9}), random_tensor(11, {3, 2, 3, 3}), std::nullopt, {.stride = 2, .padding = 1});
  EXPECT_EQ(y2.shape(), (Shape{3, 5, 5}));
}

TEST(Conv2d, BatchedMatchesPerImage) {
  Tensor xb = random_tensor(12, {2, 2, 5, 5});
  Tensor w = random_tensor(13, {3, 2, 3, 3});
  Tensor b = random_tensor(14, {3});
  Tensor yb = conv2d(xb, w, b, {.padding = 1});
  for (std::size_t n = 0; n < 2; ++n) {
    Tensor yn = conv2d(reshape(narrow(xb, 0, n, 1), {2, 5, 5}), w, b, {.padding = 1});
    for (std::size_t i = 0; i < yn.numel(); ++i) EXPECT_EQ(yb[n * yn.numel() + i], yn[i]);
  }
}

TEST(Conv2d, NonIntegralOutputIsConfigError) {
  EXPECT_THROW(
      (void)conv2d(Tensor::zeros({1, 16, 16}), Tensor::zeros({1, 1, 3, 3}), std::nullopt, {.stride = 2, .padding = 1}),
      ConfigError);
  EXPECT_THROW((void)conv2d(Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 1, 3, 3}), std::nullopt), ConfigError);
  EXPECT_THROW((void)conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 1, 3, 3}), std::nullopt), ShapeError);
}

TEST(Pool, GlobalAndWindowed) {
  Tensor c = Tensor::full({2, 3, 3}, 0.25);
  EXPECT_EQ(global_pool(PoolKind::Avg, c).values(), (std::vector<double>{0.25, 0.25}));
  Tensor x({1, 2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(pool2d(PoolKind::Max, x, 2, 2, 2).item(), 4.0);
  // Direct enumeration: (1+2+3+4)/4.
  EXPECT_EQ(pool2d(PoolKind::Avg, x, 2, 2, 2).item(), 2.5);
  EXPECT_THROW((void)pool2d(PoolKind::Max, x, 3, 3, 1), ConfigError);
}

TEST(Pool, MaxGradientGoesToFirstTie) {
  Tensor x({1, 2, 2}, {3, 3, 1, 3}, true);
  backward(sum(pool2d(PoolKind::Max, x, 2, 2, 2)));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{1, 0, 0, 0}));
  Tensor y({1, 1, 3}, {5, 2, 5}, true);
  backward(sum(global_pool(PoolKind::Max, y)));
  EXPECT_EQ(std::vector<double>(y.grad().begin(), y.grad().end()), (std::vector<double>{1, 0, 0}));
}

TEST(Softmax, DefiningCases) {
  EXPECT_EQ(softmax(Tensor({1}, {3.7}), 0).item(), 1.0);
  Tensor eq = softmax(Tensor::full({5}, 2.0), 0);
  for (double v : eq.values()) EXPECT_DOUBLE_EQ(v, 0.2);
  Tensor x = random_tensor(20, {4, 6}, -5, 5);
  Tensor a = softmax(x, 1);
  Tensor b = softmax(x + 3.25, 1);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Softmax, RowsSumToOneAndEntriesInOpenUnitInterval) {
  Rng rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor(rng, {3, 7, 2}, -5, 5);
    for (std::size_t axis = 0; axis < 3; ++axis) {
      Tensor y = softmax(x, axis);
      const auto sp = detail::split_at(y.shape(), axis);
      for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t i = 0; i < sp.inner; ++i) {
          double s = 0.0;
          for (std::size_t l = 0; l < sp.len; ++l) {
            const double v = y[(o * sp.len + l) * sp.inner + i];
            EXPECT_GT(v, 0.0);
            EXPECT_LT(v, 1.0);
            s += v;
          }
          EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
  }
}

TEST(Structural, ConcatUpsampleReshape) {
  Tensor a = random_tensor(30, {2, 3, 3});
  Tensor b = random_tensor(31, {5, 3, 3});
  EXPECT_EQ(concat({a, b}, 0).shape(), (Shape{7, 3, 3}));
  EXPECT_THROW((void)concat({a, Tensor::zeros({2, 4, 3})}, 0), ShapeError);

  Tensor m({2, 2}, {1, 2, 3, 4});
  EXPECT_EQ(upsample_nearest(m, 2).values(), (std::vector<double>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4}));

  Tensor r = reshape(reshape(a, {6, 3}), {2, 3, 3});
  EXPECT_EQ(r.values(), a.values());
  EXPECT_THROW((void)reshape(a, {4, 4}), ShapeError);
}

TEST(Structural, UpsampleGradientSumsPerSourceCell) {
  Tensor m({1, 2, 2}, {1, 2, 3, 4}, true);
  backward(sum(upsample_nearest(m, 3)));
  for (double g : m.grad()) EXPECT_EQ(g, 9.0);
}

TEST(Structural, PermuteTransposeNarrowBroadcast) {
  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  EXPECT_EQ(transpose(t).values(), (std::vector<double>{1, 4, 2, 5, 3, 6}));
  EXPECT_EQ(narrow(t, 1, 1, 2).values(), (std::vector<double>{2, 3, 5, 6}));
  Tensor col({2, 1}, {10, 20});
  EXPECT_EQ(broadcast_to(col, {2, 3}).values(), (std::vector<double>{10, 10, 10, 20, 20, 20}));
  EXPECT_THROW((void)broadcast_to(Tensor::zeros({2, 2}), {2, 3}), ShapeError);
  Tensor x = random_tensor(32, {2, 3, 4});
  Tensor p = permute(permute(x, {2, 0, 1}), {1, 2, 0});
  EXPECT_EQ(p.values(), x.values());
}

TEST(Backward, SumAndSquare) {
  Tensor x = random_tensor(40, {2, 3});
  x.set_requires_grad(true);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);

  Tensor y({3}, {1, 2, 3}, true);
  backward(sum(mul(y, y)));
  EXPECT_EQ(std::vector<double>(y.grad().begin(), y.grad().end()), (std::vector<double>{2, 4, 6}));
}

TEST(Backward, NonScalarLossIsContractError) {
  Tensor x = Tensor::ones({2}, true);
  EXPECT_THROW(backward(mul(x, 2.0)), ContractError);
}

TEST(Backward, GradsAreZeroedAtEachCall) {
  Tensor x({3}, {1, 2, 3}, true);
  backward(sum(mul(x, 3.0)));
  backward(sum(mul(x, 3.0)));
  for (double g : x.grad()) EXPECT_EQ(g, 3.0);
}

TEST(Backward, TapeVisitsEachNodeOnce) {
  Tensor x = Tensor({2}, {0.5, -0.3}, true);
  Tensor h = relu(x) + sigmoid(x);
  Tensor loss = sum(h * h + h);  // h used three times
  Tape tape = Tape::record(loss);
  std::set<const detail::Node*> unique(tape.order.begin(), tape.order.end());
  EXPECT_EQ(unique.size(), tape.order.size());
  EXPECT_EQ(tape.order.back(), loss.node().get());
  // Operands precede results.
  for (std::size_t i = 0; i < tape.order.size(); ++i)
    for (const auto& p : tape.order[i]->parents) {
      auto it = std::find(tape.order.begin(), tape.order.end(), p.get());
      EXPECT_LT(static_cast<std::size_t>(it - tape.order.begin()), i);
    }
}

TEST(Backward, NoGradGuardRecordsNothing) {
  Tensor x = Tensor::ones({2}, true);
  NoGradGuard guard;
  Tensor y = mul(x, 2.0);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

Tensor two_layer_net(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2) {
  Tensor h = relu(add(matmul(x, w1), broadcast_to(reshape(b1, {1, b1.numel()}), {x.dim(0), b1.numel()})));
  return sum(square(matmul(h, w2)));
}

TEST(GradCheck, TwoLayerNetwork) {
  Tensor x = random_tensor(50, {4, 5});
  Tensor w1 = random_tensor(51, {5, 6});
  Tensor b1 = random_tensor(52, {6});
  Tensor w2 = random_tensor(53, {6, 3});
  const double err = grad_check([&] { return two_layer_net(x, w1, b1, w2); }, {x, w1, b1, w2});
  EXPECT_LE(err, kGradTol);
}

TEST(GradCheck, DetectsAWrongGradient) {
  // A loss whose recorded backward is deliberately inconsistent with its forward.
  Tensor x({2}, {0.3, 0.7});
  auto f = [&] {
    Tensor y = mul(x, 2.0);
    return make_result(
        {}, {y[0] * y[0] + y[1]}, {y},
        [](detail::Node& self) {
          double* g = grad_sink(self.parents[0]);
          g[0] += self.grad[0];  // should be 2*y0
          g[1] += self.grad[0];
        },
        "broken");
  };
  EXPECT_GT(grad_check(f, {x}), 1e-2);
}

struct OpCase {
  const char* name;
  std::function<Tensor(const Tensor&)> op;
  Shape shape;
};

class UnaryGrad : public ::testing::TestWithParam<OpCase> {};

TEST_P(UnaryGrad, MatchesCentralDifferences) {
  const OpCase& c = GetParam();
  Tensor x = random_tensor(60, c.shape, 0.1, 2.0);
  if (std::string(c.name) != "log") x = random_tensor(61, c.shape);
  const double err = grad_check([&] { return weighted_sum(c.op(x), 62); }, {x});
  EXPECT_LE(err, kGradTol) << c.name;
}

INSTANTIATE_TEST_SUITE_P(
    Ops, UnaryGrad,
    ::testing::Values(OpCase{"relu", [](const Tensor& x) { return relu(x); }, {3, 4}},
                      OpCase{"gelu", [](const Tensor& x) { return gelu(x); }, {3, 4}},
                      OpCase{"sigmoid", [](const Tensor& x) { return sigmoid(x); }, {3, 4}},
                      OpCase{"exp", [](const Tensor& x) { return exp(x); }, {3, 4}},
                      OpCase{"log", [](const Tensor& x) { return log(x); }, {3, 4}},
                      OpCase{"softmax0", [](const Tensor& x) { return softmax(x, 0); }, {3, 4}},
                      OpCase{"softmax1", [](const Tensor& x) { return softmax(x, 1); }, {3, 4}},
                      OpCase{"avgpool", [](const Tensor& x) { return pool2d(PoolKind::Avg, x, 2, 2, 2); }, {2, 4, 4}},
                      OpCase{"maxpool", [](const Tensor& x) { return pool2d(PoolKind::Max, x, 2, 2, 1); }, {2, 4, 4}},
                      OpCase{"gap", [](const Tensor& x) { return global_pool(PoolKind::Avg, x); }, {2, 3, 3}},
                      OpCase{"gmp", [](const Tensor& x) { return global_pool(PoolKind::Max, x); }, {2, 3, 3}},
                      OpCase{"reduce_max", [](const Tensor& x) { return reduce(ReduceKind::Max, x, 1); }, {2, 3, 4}},
                      OpCase{
                          "reduce_mean", [](const Tensor& x) { return reduce(ReduceKind::Mean, x, 0, true); }, {2, 3}},
                      OpCase{"permute", [](const Tensor& x) { return permute(x, {2, 0, 1}); }, {2, 3, 4}},
                      OpCase{"narrow", [](const Tensor& x) { return narrow(x, 1, 1, 2); }, {2, 4}},
                      OpCase{"upsample", [](const Tensor& x) { return upsample_nearest(x, 2); }, {2, 2, 3}},
                      OpCase{"broadcast", [](const Tensor& x) { return broadcast_to(x, {2, 3, 4}); }, {2, 1, 4}},
                      OpCase{"concat", [](const Tensor& x) { return concat({x, square(x), x}, 1); }, {2, 2}}),
    [](const ::testing::TestParamInfo<OpCase>& info) { return std::string(info.param.name); });

TEST(GradCheckBinary, ElementwiseMatmulConv) {
  Tensor a = random_tensor(70, {3, 4});
  Tensor b = random_tensor(71, {3, 4}, 0.5, 2.0);
  EXPECT_LE(grad_check([&] { return weighted_sum(add(a, b), 1); }, {a, b}), kGradTol);
  EXPECT_LE(grad_check([&] { return weighted_sum(sub(a, b), 2); }, {a, b}), kGradTol);
  EXPECT_LE(grad_check([&] { return weighted_sum(mul(a, b), 3); }, {a, b}), kGradTol);
  EXPECT_LE(grad_check([&] { return weighted_sum(div(a, b), 4); }, {a, b}), kGradTol);

  Tensor m = random_tensor(72, {3, 5});
  Tensor n = random_tensor(73, {5, 2});
  EXPECT_LE(grad_check([&] { return weighted_sum(matmul(m, n), 5); }, {m, n}), kGradTol);

  Tensor x = random_tensor(74, {2, 2, 5, 5});
  Tensor w = random_tensor(75, {4, 2, 3, 3});
  Tensor bias = random_tensor(76, {4});
  EXPECT_LE(grad_check([&] { return weighted_sum(conv2d(x, w, bias, {.stride = 2, .padding = 1}), 6); }, {x, w, bias}),
            kGradTol);
  Tensor dw = random_tensor(77, {2, 1, 3, 3});
  EXPECT_LE(
      grad_check([&] { return weighted_sum(conv2d(x, dw, std::nullopt, {.padding = 1, .groups = 2}), 7); }, {x, dw}),
      kGradTol);
}

TEST(GradCheckNorm, BatchAndLayerNorm) {
  Tensor x = random_tensor(80, {4, 3, 2, 2});
  Tensor g = random_tensor(81, {3}, 0.5, 1.5);
  Tensor b = random_tensor(82, {3});
  EXPECT_LE(
      grad_check([&] { return weighted_sum(batch_norm(x, g, b, 1e-5, nullptr, nullptr, nullptr), 8); }, {x, g, b}),
      kGradTol);
  std::vector<double> rm{0.1, -0.2, 0.3}, rv{1.5, 0.7, 1.1};
  EXPECT_LE(grad_check([&] { return weighted_sum(batch_norm(x, g, b, 1e-5, &rm, &rv, nullptr), 9); }, {x, g, b}),
            kGradTol);
  Tensor y = random_tensor(83, {3, 5});
  Tensor lg = random_tensor(84, {5}, 0.5, 1.5);
  Tensor lb = random_tensor(85, {5});
  EXPECT_LE(grad_check([&] { return weighted_sum(layer_norm(y, lg, lb, 1e-5), 10); }, {y, lg, lb}), kGradTol);
}

TEST(GradCheckLoss, SoftmaxCrossEntropy) {
  Tensor logits = random_tensor(90, {5, 4}, -3, 3);
  std::vector<std::size_t> labels{0, 3, 1, 1, 2};
  EXPECT_LE(grad_check([&] { return softmax_cross_entropy(logits, labels); }, {logits}), kGradTol);
  EXPECT_THROW((void)softmax_cross_entropy(logits, {0, 4, 1, 1, 2}), DomainError);
}

TEST(Determinism, RepeatedForwardBackwardIsBitIdentical) {
  auto run = [] {
    Tensor x = random_tensor(100, {2, 2, 4, 4});
    Tensor w = random_tensor(101, {3, 2, 3, 3});
    w.set_requires_grad(true);
    backward(weighted_sum(softmax(reshape(conv2d(x, w, std::nullopt, {.padding = 1}), {2, 48}), 1), 102));
    return std::vector<double>(w.grad().begin(), w.grad().end());
  };
  EXPECT_EQ(run(), run());
}

}  // namespace
}  // namespace pestnet
