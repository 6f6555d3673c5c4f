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

#pragma once

#include <chrono>
#include <functional>
#include <string>
#include <vector>

#include "pestnet/attention.hpp"
#include "pestnet/gradcheck.hpp"
#include "pestnet/models.hpp"
#include "pestnet/training.hpp"

namespace pestnet {

/// Finite-difference check of one differentiable op or layer.
struct GradCase {
  std::string name;
  std::function<double()> run;  // max relative error
};

struct GradResult {
  std::string name;
  double error = 0;
  double seconds = 0;
};

constexpr double kGradTolerance = 1e-4;

namespace suite_detail {

/// Uniform in [lo, hi) with |v| >= 1e-3 so probes do not cross relu kinks at 0.
inline Tensor rand(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel_of(shape));
  for (double& x : v) {
    do {
      x = rng.uniform(lo, hi);
    } while (std::abs(x) < 1e-3);
  }
  return Tensor(std::move(shape), std::move(v));
}

/// Uneven weighting so the scalar loss depends on every output element.
inline Tensor weighted(const Tensor& y, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(y, rand(rng, y.shape(), 0.5, 1.5)));
}

inline std::vector<Tensor> params_and(const nn::Module& m, std::vector<Tensor> extra) {
  auto p = m.parameters();
  for (auto& t : extra) p.push_back(t);
  return p;
}

inline GradCase unary(std::string name, std::function<Tensor(const Tensor&)> op, double lo, double hi,
                      std::uint64_t seed) {
  return {std::move(name), [=] {
            Rng rng(seed);
            Tensor x = rand(rng, {3, 4}, lo, hi);
            return grad_check([&] { return weighted(op(x), seed); }, {x});
          }};
}

inline GradCase binary(std::string name, std::function<Tensor(const Tensor&, const Tensor&)> op, double lo, double hi,
                       std::uint64_t seed) {
  return {std::move(name), [=] {
            Rng rng(seed);
            Tensor a = rand(rng, {3, 4}), b = rand(rng, {3, 4}, lo, hi);
            return grad_check([&] { return weighted(op(a, b), seed); }, {a, b});
          }};
}

}  // namespace suite_detail

/// Every differentiable operation and layer at fixed seeds.
inline std::vector<GradCase> gradient_suite() {
  using namespace suite_detail;
  std::vector<GradCase> c;
  c.push_back(binary("add", [](auto& a, auto& b) { return add(a, b); }, -1, 1, 1));
  c.push_back(binary("sub", [](auto& a, auto& b) { return sub(a, b); }, -1, 1, 2));
  c.push_back(binary("mul", [](auto& a, auto& b) { return mul(a, b); }, -1, 1, 3));
  c.push_back(binary("div", [](auto& a, auto& b) { return div(a, b); }, 0.5, 2, 4));
  c.push_back(unary("scalar_ops", [](auto& x) { return div(sub(mul(add(x, 0.5), 3.0), 1.0), 2.0); }, -1, 1, 5));
  c.push_back(unary("neg", [](auto& x) { return neg(x); }, -1, 1, 6));
  c.push_back(unary("relu", [](auto& x) { return relu(x); }, -1, 1, 7));
  c.push_back(unary("gelu", [](auto& x) { return gelu(x); }, -3, 3, 8));
  c.push_back(unary("sigmoid", [](auto& x) { return sigmoid(x); }, -4, 4, 9));
  c.push_back(unary("exp", [](auto& x) { return exp(x); }, -2, 2, 10));
  c.push_back(unary("log", [](auto& x) { return log(x); }, 0.2, 3, 11));
  c.push_back(unary("square", [](auto& x) { return square(x); }, -2, 2, 12));
  c.push_back(unary("softmax", [](auto& x) { return softmax(x, 1); }, -3, 3, 13));
  c.push_back(unary("softmax_axis0", [](auto& x) { return softmax(x, 0); }, -3, 3, 14));
  c.push_back(unary(
      "reduce_sum_mean_max",
      [](auto& x) {
        return concat({reduce(ReduceKind::Sum, x, 0), reduce(ReduceKind::Mean, x, 0), reduce(ReduceKind::Max, x, 1)},
                      0);
      },
      -1, 1, 15));
  c.push_back(unary(
      "shape_ops",
      [](auto& x) {
        Tensor r = permute(reshape(x, {2, 3, 2}), {2, 0, 1});
        return concat({reshape(transpose(x), {12}), reshape(narrow(r, 2, 1, 2), {8})}, 0);
      },
      -1, 1, 16));
  c.push_back({"matmul", [] {
                 Rng rng(17);
                 Tensor a = rand(rng, {3, 5}), b = rand(rng, {5, 4});
                 return grad_check([&] { return weighted(matmul(a, b), 17); }, {a, b});
               }});
  c.push_back({"conv2d", [] {
                 Rng rng(19);
                 Tensor x = rand(rng, {2, 2, 5, 5}), w = rand(rng, {3, 2, 3, 3}), b = rand(rng, {3});
                 return grad_check([&] { return weighted(conv2d(x, w, b, {.stride = 2, .padding = 1}), 19); },
                                   {x, w, b});
               }});
  c.push_back({"conv2d_grouped", [] {
                 Rng rng(20);
                 Tensor x = rand(rng, {1, 4, 4, 4}), w = rand(rng, {4, 1, 3, 3});
                 return grad_check(
                     [&] { return weighted(conv2d(x, w, std::nullopt, {.padding = 1, .groups = 4}), 20); }, {x, w});
               }});
  c.push_back({"pools", [] {
                 Rng rng(21);
                 Tensor x = rand(rng, {2, 2, 4, 4});
                 return grad_check(
                     [&] {
                       return add(add(weighted(pool2d(PoolKind::Max, x, 2, 2, 2), 21),
                                      weighted(pool2d(PoolKind::Avg, x, 3, 3, 1), 22)),
                                  add(weighted(global_pool(PoolKind::Avg, x), 23),
                                      weighted(global_pool(PoolKind::Max, x), 24)));
                     },
                     {x});
               }});
  c.push_back({"upsample_broadcast", [] {
                 Rng rng(25);
                 Tensor x = rand(rng, {1, 2, 2, 3}), m = rand(rng, {1, 1, 4, 6}), b = rand(rng, {1, 2, 1, 1});
                 return grad_check(
                     [&] {
                       Tensor u = upsample_nearest(x, 2);
                       return weighted(broadcast_add(broadcast_mul(u, m), b), 25);
                     },
                     {x, m, b});
               }});
  c.push_back({"softmax_cross_entropy", [] {
                 Rng rng(26);
                 Tensor z = rand(rng, {4, 5}, -2, 2);
                 return grad_check([&] { return softmax_cross_entropy(z, {0, 3, 4, 1}); }, {z});
               }});
  c.push_back({"cross_entropy", [] {
                 Rng rng(27);
                 Tensor z = rand(rng, {4, 5}, -2, 2);
                 return grad_check([&] { return cross_entropy(softmax(z, 1), {2, 0, 4, 4}); }, {z});
               }});
  c.push_back({"linear", [] {
                 Rng rng(28);
                 nn::Linear lin(5, 3, rng);
                 Tensor x = rand(rng, {4, 5});
                 return grad_check([&] { return weighted(lin.forward(x), 28); }, params_and(lin, {x}));
               }});
  c.push_back({"batch_norm", [] {
                 Rng rng(29);
                 nn::BatchNorm bn(3);
                 for (auto& p : bn.parameters()) p.mutable_data()[0] += 0.3;
                 Tensor x = rand(rng, {2, 3, 2, 2}), f = rand(rng, {5, 3});
                 return grad_check([&] { return add(weighted(bn.forward(x), 29), weighted(bn.forward(f), 30)); },
                                   params_and(bn, {x, f}));
               }});
  c.push_back({"layer_norm", [] {
                 Rng rng(31);
                 nn::LayerNorm ln(6);
                 for (auto& p : ln.parameters()) p.mutable_data()[1] += 0.4;
                 Tensor x = rand(rng, {3, 6});
                 return grad_check([&] { return weighted(ln.forward(x), 31); }, params_and(ln, {x}));
               }});
  c.push_back({"residual_block", [] {
                 Rng rng(32);
                 nn::ResidualBlock block(2, 3, rng);
                 Tensor x = rand(rng, {2, 2, 4, 4});
                 return grad_check([&] { return weighted(block.forward(x), 32); }, params_and(block, {x}));
               }});
  c.push_back({"convnext_block", [] {
                 Rng rng(33);
                 nn::ConvNeXtBlock block(4, rng, 2);
                 Tensor x = rand(rng, {1, 4, 4, 4});
                 return grad_check([&] { return weighted(block.forward(x), 33); }, params_and(block, {x}));
               }});
  c.push_back({"patch_embed", [] {
                 Rng rng(34);
                 nn::PatchEmbed pe(2, 4, 4, 2, 5, rng);
                 Tensor x = rand(rng, {2, 2, 4, 4});
                 return grad_check([&] { return weighted(pe.forward(x), 34); }, params_and(pe, {x}));
               }});
  c.push_back({"channel_attention", [] {
                 Rng rng(35);
                 ChannelAttention ca(4, 2, rng);
                 Tensor x = rand(rng, {2, 4, 3, 3});
                 return grad_check([&] { return weighted(ca.forward(x), 35); }, params_and(ca, {x}));
               }});
  c.push_back({"spatial_attention", [] {
                 Rng rng(36);
                 SpatialAttention sa(rng);
                 Tensor x = rand(rng, {1, 3, 4, 4});
                 return grad_check([&] { return weighted(sa.forward(x), 36); }, params_and(sa, {x}));
               }});
  c.push_back({"cbam", [] {
                 Rng rng(37);
                 Cbam cbam(4, 2, rng);
                 Tensor x = rand(rng, {1, 4, 4, 4});
                 return grad_check([&] { return weighted(cbam.forward(x), 37); }, params_and(cbam, {x}));
               }});
  c.push_back({"residual_attention", [] {
                 Rng rng(38);
                 Tensor t = rand(rng, {2, 3, 3}), m = rand(rng, {2, 3, 3}, 0, 1);
                 return grad_check([&] { return weighted(residual_attention(t, m), 38); }, {t, m});
               }});
  c.push_back({"attention_module", [] {
                 Rng rng(39);
                 AttentionModule am(2, rng);
                 Tensor x = rand(rng, {2, 2, 4, 4});
                 return grad_check([&] { return weighted(am.forward(x), 39); }, params_and(am, {x}));
               }});
  c.push_back({"self_attention", [] {
                 Rng rng(40);
                 SelfAttention sa(6, 2, rng);
                 Tensor x = rand(rng, {2, 4, 6});
                 return grad_check([&] { return weighted(sa.forward(x), 40); }, params_and(sa, {x}));
               }});
  c.push_back({"encoder_layer", [] {
                 Rng rng(41);
                 EncoderLayer enc(4, 2, 2, rng);
                 Tensor x = rand(rng, {3, 4});
                 return grad_check([&] { return weighted(enc.forward(x), 41); }, params_and(enc, {x}));
               }});
  c.push_back({"fpn", [] {
                 Rng rng(42);
                 Fpn fpn({4, 2}, 2, rng);
                 Tensor coarse = rand(rng, {1, 4, 2, 2}), fine = rand(rng, {1, 2, 4, 4});
                 return grad_check(
                     [&] {
                       auto levels = fpn.forward({coarse, fine});
                       return add(weighted(levels[0], 42), weighted(levels[1], 43));
                     },
                     params_and(fpn, {coarse, fine}));
               }});
  c.push_back({"fusion_model", [] {
                 ModelSpec s;
                 s.arch = Arch::Fusion;
                 s.height = s.width_px = 8;
                 s.width = 4;
                 s.depth = 1;
                 s.d_model = 4;
                 s.dropout = 0.0;
                 s.seed = 44;
                 auto m = build_model(s);
                 Rng rng(44);
                 Tensor x = rand(rng, {3, 3, 8, 8});
                 std::vector<Tensor> probe = {x};
                 for (auto& [name, t] : m->named_parameters()) {
                   if (name == "head.weight" || name == "fc1.weight") probe.push_back(t);
                 }
                 return grad_check([&] { return softmax_cross_entropy(m->forward(x), {0, 1, 2}); }, probe);
               }});
  return c;
}

inline std::vector<GradResult> run_gradient_suite(const std::function<void(const GradResult&)>& on_result = {}) {
  std::vector<GradResult> out;
  for (const auto& gc : gradient_suite()) {
    const auto t0 = std::chrono::steady_clock::now();
    GradResult r{gc.name, gc.run(), 0};
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (on_result) on_result(r);
    out.push_back(r);
  }
  return out;
}

}  // namespace pestnet
