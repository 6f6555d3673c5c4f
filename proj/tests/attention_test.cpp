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

#include "pestnet/attention.hpp"
#include "pestnet/gradcheck.hpp"
#include "test_util.hpp"

namespace pestnet {
namespace {

using testing::random_tensor;
using testing::weighted_sum;
using testing::with_input;
using testing::zero_weights;

constexpr double kGradTol = 1e-4;

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void expect_open_unit(const Tensor& m) {
  for (double v : m.values()) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
}

/// Pool -> MLP -> sum -> sigmoid with explicit loops, one image [C,H,W].
std::vector<double> channel_oracle(const Tensor& f, const Tensor& w0, const Tensor& w1, bool max_only = false) {
  const std::size_t c = f.dim(0), hw = f.dim(1) * f.dim(2), hid = w0.dim(1);
  std::vector<double> avg(c, 0.0), mx(c, -INFINITY);
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < hw; ++i) {
      avg[k] += f.values()[k * hw + i];
      mx[k] = std::max(mx[k], f.values()[k * hw + i]);
    }
    avg[k] /= static_cast<double>(hw);
  }
  auto mlp = [&](const std::vector<double>& v) {
    std::vector<double> h(hid, 0.0), o(c, 0.0);
    for (std::size_t j = 0; j < hid; ++j) {
      for (std::size_t k = 0; k < c; ++k) h[j] += v[k] * w0.values()[k * hid + j];
      h[j] = std::max(h[j], 0.0);
    }
    for (std::size_t k = 0; k < c; ++k) {
      for (std::size_t j = 0; j < hid; ++j) o[k] += h[j] * w1.values()[j * c + k];
    }
    return o;
  };
  const auto a = mlp(avg), m = mlp(mx);
  std::vector<double> out(c);
  for (std::size_t k = 0; k < c; ++k) out[k] = logistic(max_only ? m[k] : a[k] + m[k]);
  return out;
}

TEST(ChannelAttention, ZeroParamsGiveHalf) {
  Rng rng(1);
  ChannelAttention ca(4, 2, rng);
  zero_weights(ca);
  Tensor m = ca.forward(random_tensor(2, {4, 3, 3}));
  ASSERT_EQ(m.shape(), (Shape{4}));
  for (double v : m.values()) EXPECT_EQ(v, 0.5);
}

TEST(ChannelAttention, ConstantMapPoolsCoincide) {
  Rng rng(3);
  ChannelAttention ca(4, 2, rng);
  Tensor f = Tensor::full({4, 5, 5}, 0.7);
  Tensor v = Tensor::full({1, 4}, 0.7);
  Tensor expect = sigmoid(mul(ca.mlp(v), 2.0));
  Tensor got = ca.forward(f);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(got[k], expect[k], 1e-15);
}

TEST(ChannelAttention, MatchesLoopOracle) {
  Rng rng(5);
  ChannelAttention ca(4, 2, rng);
  Tensor f = random_tensor(6, {4, 3, 2});
  const auto want = channel_oracle(f, ca.w0, ca.w1);
  Tensor got = ca.forward(f);
  expect_open_unit(got);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(got[k], want[k], 1e-12);
}

TEST(ChannelAttention, SumsBothPoolingBranches) {
  Rng rng(7);
  ChannelAttention ca(4, 2, rng);
  for (double& w : ca.w0.mutable_data()) w = 0.5;
  for (double& w : ca.w1.mutable_data()) w = 0.5;
  Tensor f = random_tensor(8, {4, 3, 3}, 0.0, 1.0);
  const auto both = channel_oracle(f, ca.w0, ca.w1);
  const auto max_only = channel_oracle(f, ca.w0, ca.w1, true);
  Tensor got = ca.forward(f);
  double gap = 0.0;
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_NEAR(got[k], both[k], 1e-12);
    gap = std::max(gap, std::abs(got[k] - max_only[k]));
  }
  EXPECT_GT(gap, 1e-3);
}

TEST(ChannelAttention, BatchedMatchesPerImage) {
  Rng rng(9);
  ChannelAttention ca(6, 3, rng);
  Tensor x = random_tensor(10, {2, 6, 3, 3});
  Tensor m = ca.forward(x);
  ASSERT_EQ(m.shape(), (Shape{2, 6}));
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor single = ca.forward(reshape(narrow(x, 0, b, 1), {6, 3, 3}));
    for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(m.at({b, k}), single[k], 1e-15);
  }
}

TEST(ChannelAttention, Errors) {
  Rng rng(1);
  EXPECT_THROW(ChannelAttention(6, 4, rng), ConfigError);
  ChannelAttention ca(4, 2, rng);
  EXPECT_THROW(ca.forward(Tensor::zeros({3, 2, 2})), ShapeError);
}

TEST(SpatialAttention, ZeroParamsAndShape) {
  Rng rng(1);
  SpatialAttention sa(rng);
  zero_weights(sa);
  Tensor m = sa.forward(random_tensor(2, {3, 5, 6}));
  ASSERT_EQ(m.shape(), (Shape{1, 5, 6}));
  for (double v : m.values()) EXPECT_EQ(v, 0.5);
}

TEST(SpatialAttention, SingleChannelDescriptor) {
  Tensor x = random_tensor(3, {1, 1, 4, 4});
  Tensor d = SpatialAttention::descriptor(x);
  ASSERT_EQ(d.shape(), (Shape{1, 2, 4, 4}));
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(d[i], x[i]);
    EXPECT_EQ(d[16 + i], x[i]);
  }
  Rng rng(4);
  SpatialAttention sa(rng);
  expect_open_unit(sa.forward(x));
}

TEST(Cbam, ZeroParamsScaleByQuarter) {
  Rng rng(1);
  Cbam cbam(4, 2, rng);
  zero_weights(cbam);
  Tensor f = random_tensor(2, {2, 4, 3, 3});
  Tensor y = cbam.forward(f);
  ASSERT_EQ(y.shape(), f.shape());
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_EQ(y[i], 0.25 * f[i]);
  Tensor single = random_tensor(3, {4, 3, 3});
  EXPECT_EQ(cbam.forward(single).shape(), single.shape());
}

TEST(Cbam, ChannelThenSpatialOrder) {
  Rng rng(11);
  Cbam cbam(4, 2, rng);
  Tensor f = random_tensor(12, {4, 4, 4});
  Tensor mc = cbam.channel->forward(f);
  Tensor refined = broadcast_mul(f, reshape(mc, {4, 1, 1}));
  Tensor ms = cbam.spatial->forward(refined);
  Tensor want = broadcast_mul(refined, ms);
  Tensor got = cbam.forward(f);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(got[i], want[i], 1e-15);
}

TEST(ResidualAttention, Identities) {
  Tensor f = random_tensor(1, {2, 3, 3});
  EXPECT_EQ(residual_attention(f, Tensor::zeros(f.shape())).values(), f.values());
  Tensor doubled = residual_attention(f, Tensor::ones(f.shape()));
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_EQ(doubled[i], 2.0 * f[i]);
  Tensor h = residual_attention(Tensor({2}, {1, 2}), Tensor({2}, {0.5, 0.25}));
  EXPECT_EQ(h.values(), (std::vector<double>{1.5, 2.5}));
  Tensor m = random_tensor(2, f.shape(), 0.0, 1.0);
  Tensor hm = residual_attention(f, m);
  for (std::size_t i = 0; i < f.numel(); ++i) EXPECT_NEAR(hm[i], f[i] + m[i] * f[i], 1e-12);
  EXPECT_THROW(residual_attention(f, Tensor::zeros({2, 3})), ShapeError);
}

TEST(AttentionModule, SaturatedMaskLeavesTrunk) {
  Rng rng(1);
  AttentionModule am(4, rng);
  am.set_mode(nn::Mode::Evaluation);
  std::fill(am.mask_out->weight.mutable_data().begin(), am.mask_out->weight.mutable_data().end(), 0.0);
  std::fill(am.mask_out->bias->mutable_data().begin(), am.mask_out->bias->mutable_data().end(), -30.0);
  Tensor x = random_tensor(2, {2, 4, 4, 4});
  Tensor y = am.forward(x);
  Tensor t = am.trunk(x);
  ASSERT_EQ(y.shape(), t.shape());
  for (std::size_t i = 0; i < y.numel(); ++i) EXPECT_NEAR(y[i], t[i], 1e-9);
}

TEST(AttentionModule, MaskInOpenUnit) {
  Rng rng(3);
  AttentionModule am(4, rng, 1, 2);
  Tensor x = random_tensor(4, {2, 4, 6, 6});
  Tensor m = am.mask(x);
  EXPECT_EQ(m.shape(), x.shape());
  expect_open_unit(m);
  EXPECT_THROW(am.forward(random_tensor(5, {2, 4, 5, 5})), ConfigError);
}

/// Scaled dot-product attention with explicit loops over tokens, heads and key dims.
std::vector<double> attention_oracle(const SelfAttention& sa, const Tensor& x) {
  const std::size_t n = x.dim(0), d = x.dim(1), dk = sa.d_k(), h = sa.heads();
  std::vector<double> cat(n * h * dk, 0.0);
  for (std::size_t head = 0; head < h; ++head) {
    auto proj = [&](const Tensor& w) {
      std::vector<double> o(n * dk, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < dk; ++j)
          for (std::size_t k = 0; k < d; ++k) o[i * dk + j] += x.values()[i * d + k] * w.values()[k * dk + j];
      return o;
    };
    const auto q = proj(sa.wq[head]), k = proj(sa.wk[head]), v = proj(sa.wv[head]);
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n, 0.0);
      double mx = -INFINITY, z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t t = 0; t < dk; ++t) s[j] += q[i * dk + t] * k[j * dk + t];
        s[j] /= std::sqrt(static_cast<double>(dk));
        mx = std::max(mx, s[j]);
      }
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t t = 0; t < dk; ++t) cat[i * h * dk + head * dk + t] += s[j] / z * v[j * dk + t];
      }
    }
  }
  std::vector<double> out(n * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < h * dk; ++k) out[i * d + j] += cat[i * h * dk + k] * sa.wo.values()[k * d + j];
  return out;
}

TEST(SelfAttention, SingleToken) {
  Rng rng(1);
  SelfAttention sa(4, 2, rng);
  Tensor x = random_tensor(2, {1, 4});
  Tensor s = sa.scores(x, 0);
  EXPECT_EQ(s.values(), (std::vector<double>{1.0}));
  Tensor v = matmul(x, sa.wv[0]);
  EXPECT_EQ(sa.head_output(x, 0).values(), v.values());
}

TEST(SelfAttention, IdenticalTokensSplitEvenly) {
  Rng rng(3);
  SelfAttention sa(4, 2, rng);
  Tensor row = random_tensor(4, {1, 4});
  Tensor x = concat({row, row}, 0);
  for (std::size_t h = 0; h < 2; ++h) {
    for (double v : sa.scores(x, h).values()) EXPECT_EQ(v, 0.5);
  }
}

TEST(SelfAttention, MatchesLoopOracle) {
  Rng rng(5);
  SelfAttention sa(4, 2, rng);
  ASSERT_EQ(sa.d_k(), 2u);
  Tensor x = random_tensor(6, {3, 4});
  const auto want = attention_oracle(sa, x);
  Tensor got = sa.forward(x);
  ASSERT_EQ(got.shape(), (Shape{3, 4}));
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-10);
}

TEST(SelfAttention, ScoreRowsSumToOne) {
  Rng rng(7);
  SelfAttention sa(6, 3, rng);
  Tensor x = random_tensor(8, {5, 6}, -2.0, 2.0);
  for (std::size_t h = 0; h < 3; ++h) {
    Tensor s = sa.scores(x, h);
    for (std::size_t i = 0; i < 5; ++i) {
      double z = 0.0;
      for (std::size_t j = 0; j < 5; ++j) z += s.at({i, j});
      EXPECT_NEAR(z, 1.0, 1e-12);
    }
    expect_open_unit(s);
  }
}

TEST(SelfAttention, PermutationEquivariant) {
  Rng rng(9);
  SelfAttention sa(4, 2, rng);
  Tensor x = random_tensor(10, {4, 4});
  const std::vector<std::size_t> perm = {2, 0, 3, 1};
  std::vector<Tensor> rows;
  for (std::size_t p : perm) rows.push_back(narrow(x, 0, p, 1));
  Tensor y = sa.forward(x);
  Tensor yp = sa.forward(concat(rows, 0));
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(yp.at({i, j}), y.at({perm[i], j}), 1e-12);
}

TEST(SelfAttention, BatchedMatchesPerSequence) {
  Rng rng(11);
  SelfAttention sa(4, 2, rng);
  Tensor x = random_tensor(12, {2, 3, 4});
  Tensor y = sa.forward(x);
  ASSERT_EQ(y.shape(), x.shape());
  for (std::size_t b = 0; b < 2; ++b) {
    Tensor single = sa.forward(reshape(narrow(x, 0, b, 1), {3, 4}));
    for (std::size_t i = 0; i < 12; ++i) EXPECT_EQ(y[b * 12 + i], single[i]);
  }
}

TEST(SelfAttention, Errors) {
  Rng rng(1);
  EXPECT_THROW(SelfAttention(5, 2, rng), ConfigError);
  SelfAttention sa(4, 2, rng);
  EXPECT_THROW(sa.forward(Tensor::zeros({3, 5})), ShapeError);
}

TEST(EncoderLayer, ZeroWeightsIdentity) {
  Rng rng(1);
  EncoderLayer layer(4, 2, 2, rng);
  zero_weights(layer);
  Tensor x = random_tensor(2, {2, 3, 4});
  EXPECT_EQ(layer.forward(x).values(), x.values());
}

TEST(Fpn, ShapesAndSingleLevel) {
  Rng rng(1);
  Fpn fpn({8, 4, 2}, 5, rng);
  auto out =
      fpn.forward({random_tensor(2, {2, 8, 2, 2}), random_tensor(3, {2, 4, 4, 4}), random_tensor(4, {2, 2, 8, 8})});
  ASSERT_EQ(out.size(), 3u);
  EXPECT_EQ(out[0].shape(), (Shape{2, 5, 2, 2}));
  EXPECT_EQ(out[1].shape(), (Shape{2, 5, 4, 4}));
  EXPECT_EQ(out[2].shape(), (Shape{2, 5, 8, 8}));

  Fpn one({3}, 4, rng);
  Tensor f = random_tensor(5, {3, 4, 4});
  auto single = one.forward({f});
  Tensor want = one.smooth[0]->forward(one.lateral[0]->forward(f));
  EXPECT_EQ(single[0].values(), want.values());
}

TEST(Fpn, ZeroCoarseIdentityPath) {
  Rng rng(2);
  Fpn fpn({3, 3}, 3, rng);
  zero_weights(fpn);
  for (std::size_t i = 0; i < 2; ++i) {
    auto lw = fpn.lateral[i]->weight.mutable_data();
    auto sw = fpn.smooth[i]->weight.mutable_data();
    for (std::size_t c = 0; c < 3; ++c) {
      lw[c * 3 + c] = 1.0;
      sw[(c * 3 + c) * 9 + 4] = 1.0;
    }
  }
  Tensor coarse = Tensor::zeros({3, 2, 2});
  Tensor fine = random_tensor(3, {3, 4, 4});
  auto out = fpn.forward({coarse, fine});
  EXPECT_EQ(out[0].values(), coarse.values());
  EXPECT_EQ(out[1].values(), fine.values());
}

TEST(Fpn, Errors) {
  Rng rng(1);
  Fpn fpn({2, 2}, 3, rng);
  EXPECT_THROW(fpn.forward({Tensor::zeros({2, 2, 2})}), ConfigError);
  EXPECT_THROW(fpn.forward({Tensor::zeros({2, 2, 2}), Tensor::zeros({2, 3, 3})}), ConfigError);
}

TEST(AttentionGrad, ChannelSpatialCbam) {
  Rng rng(21);
  ChannelAttention ca(4, 2, rng);
  Tensor x = random_tensor(22, {2, 4, 3, 3});
  EXPECT_LE(grad_check([&] { return weighted_sum(ca.forward(x), 1); }, with_input(ca, x)), kGradTol);
  SpatialAttention sa(rng);
  EXPECT_LE(grad_check([&] { return weighted_sum(sa.forward(x), 2); }, with_input(sa, x)), kGradTol);
  Cbam cbam(4, 2, rng);
  EXPECT_LE(grad_check([&] { return weighted_sum(cbam.forward(x), 3); }, with_input(cbam, x)), kGradTol);
}

TEST(AttentionGrad, ResidualAttention) {
  Tensor f = random_tensor(23, {2, 3, 3});
  Tensor m = random_tensor(24, {2, 3, 3}, 0.0, 1.0);
  EXPECT_LE(grad_check([&] { return weighted_sum(residual_attention(f, m), 4); }, {f, m}), kGradTol);
}

TEST(AttentionGrad, AttentionModuleBothModes) {
  for (auto mode : {nn::Mode::Training, nn::Mode::Evaluation}) {
    Rng rng(25);
    AttentionModule am(2, rng);
    am.set_mode(mode);
    Tensor x = random_tensor(26, {2, 2, 4, 4});
    EXPECT_LE(grad_check([&] { return weighted_sum(am.forward(x), 5); }, with_input(am, x)), kGradTol);
  }
}

TEST(AttentionGrad, SelfAttentionAndEncoder) {
  Rng rng(27);
  SelfAttention sa(4, 2, rng);
  Tensor x = random_tensor(28, {2, 3, 4});
  EXPECT_LE(grad_check([&] { return weighted_sum(sa.forward(x), 6); }, with_input(sa, x)), kGradTol);
  EncoderLayer layer(4, 2, 2, rng);
  EXPECT_LE(grad_check([&] { return weighted_sum(layer.forward(x), 7); }, with_input(layer, x)), kGradTol);
}

TEST(AttentionGrad, Fpn) {
  Rng rng(29);
  Fpn fpn({3, 2}, 2, rng);
  Tensor a = random_tensor(30, {3, 2, 2});
  Tensor b = random_tensor(31, {2, 4, 4});
  auto params = fpn.parameters();
  params.push_back(a);
  params.push_back(b);
  auto loss = [&] {
    auto out = fpn.forward({a, b});
    return add(weighted_sum(out[0], 8), weighted_sum(out[1], 9));
  };
  EXPECT_LE(grad_check(loss, params), kGradTol);
}

}  // namespace
}  // namespace pestnet
