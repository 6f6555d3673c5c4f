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

#include <cmath>
#include <memory>
#include <vector>

#include "pestnet/nn/blocks.hpp"

namespace pestnet {

using nn::Module;

/// Channel gate M_c = sigmoid(MLP(avgpool F) + MLP(maxpool F)) with the
/// bias-free bottleneck MLP(v) = relu(v W0) W1 shared by both branches.
/// [C,H,W] -> [C], [N,C,H,W] -> [N,C].
class ChannelAttention : public Module {
 public:
  ChannelAttention(std::size_t channels, std::size_t reduction, Rng& rng) : channels_(channels) {
    if (reduction == 0 || channels % reduction != 0) {
      throw ConfigError("ChannelAttention: reduction " + std::to_string(reduction) + " must divide " +
                        std::to_string(channels));
    }
    const std::size_t hidden = channels / reduction;
    w0 = register_parameter("w0", nn::fan_in_uniform(rng, {channels, hidden}, channels));
    w1 = register_parameter("w1", nn::fan_in_uniform(rng, {hidden, channels}, hidden));
  }

  Tensor mlp(const Tensor& v) const { return matmul(relu(matmul(v, w0)), w1); }

  Tensor forward(const Tensor& f) const {
    const auto s = detail::spatial_dims("ChannelAttention", f);
    if (s.c != channels_) throw ShapeError("ChannelAttention", f.shape(), Shape{channels_});
    const Tensor x = reshape(f, {s.n, s.c, s.h, s.w});
    Tensor avg = global_pool(PoolKind::Avg, x);
    Tensor mx = global_pool(PoolKind::Max, x);
    Tensor m = sigmoid(add(mlp(avg), mlp(mx)));
    return s.batched ? m : reshape(m, {s.c});
  }

  Tensor w0, w1;

 private:
  std::size_t channels_;
};

/// Spatial gate M_s = sigmoid(conv7x7([mean_c F; max_c F])), padding 3 so the
/// map keeps the input's spatial size. [C,H,W] -> [1,H,W].
class SpatialAttention : public Module {
 public:
  explicit SpatialAttention(Rng& rng) {
    conv = register_module("conv", std::make_shared<nn::Conv2d>(2, 1, 7, Conv2dOptions{.padding = 3}, rng));
  }

  /// Channel-wise [mean; max] descriptor, [N,2,H,W].
  static Tensor descriptor(const Tensor& x4) {
    return concat({reduce(ReduceKind::Mean, x4, 1, true), reduce(ReduceKind::Max, x4, 1, true)}, 1);
  }

  Tensor forward(const Tensor& f) const {
    const auto s = detail::spatial_dims("SpatialAttention", f);
    Tensor m = sigmoid(conv->forward(descriptor(reshape(f, {s.n, s.c, s.h, s.w}))));
    return s.batched ? m : reshape(m, {1, s.h, s.w});
  }

  std::shared_ptr<nn::Conv2d> conv;
};

/// Channel gate applied first, then the spatial gate computed on the
/// channel-refined features.
class Cbam : public Module {
 public:
  Cbam(std::size_t channels, std::size_t reduction, Rng& rng) {
    channel = register_module("channel", std::make_shared<ChannelAttention>(channels, reduction, rng));
    spatial = register_module("spatial", std::make_shared<SpatialAttention>(rng));
  }

  Tensor forward(const Tensor& f) const {
    const auto s = detail::spatial_dims("Cbam", f);
    const Tensor x = reshape(f, {s.n, s.c, s.h, s.w});
    Tensor refined = broadcast_mul(x, reshape(channel->forward(x), {s.n, s.c, 1, 1}));
    Tensor out = broadcast_mul(refined, spatial->forward(refined));
    return reshape(out, f.shape());
  }

  std::shared_ptr<ChannelAttention> channel;
  std::shared_ptr<SpatialAttention> spatial;
};

/// H = (1 + M) * F elementwise.
inline Tensor residual_attention(const Tensor& trunk, const Tensor& mask) {
  if (trunk.shape() != mask.shape()) throw ShapeError("residual_attention", trunk.shape(), mask.shape());
  return mul(add(mask, 1.0), trunk);
}

/// Residual-attention building block. Trunk: residual blocks. Mask:
/// maxpool 2x2 -> residual blocks -> nearest upsample x2 -> 1x1 conv ->
/// sigmoid, so M lies in (0,1). Input [N,C,H,W] with even H and W.
class AttentionModule : public Module {
 public:
  AttentionModule(std::size_t channels, Rng& rng, std::size_t trunk_depth = 1, std::size_t mask_depth = 1) {
    for (std::size_t i = 0; i < trunk_depth; ++i) {
      trunk_blocks.push_back(
          register_module("trunk" + std::to_string(i), std::make_shared<nn::ResidualBlock>(channels, channels, rng)));
    }
    for (std::size_t i = 0; i < mask_depth; ++i) {
      mask_blocks.push_back(
          register_module("mask" + std::to_string(i), std::make_shared<nn::ResidualBlock>(channels, channels, rng)));
    }
    mask_out = register_module("mask_out", std::make_shared<nn::Conv2d>(channels, channels, 1, Conv2dOptions{}, rng));
  }

  Tensor trunk(const Tensor& x) const {
    Tensor t = x;
    for (auto& b : trunk_blocks) t = b->forward(t);
    return t;
  }

  Tensor mask(const Tensor& x) const {
    if (x.dim(x.rank() - 1) % 2 != 0 || x.dim(x.rank() - 2) % 2 != 0) {
      throw ConfigError("AttentionModule: mask branch needs even spatial dims, got " + shape_str(x.shape()));
    }
    Tensor m = pool2d(PoolKind::Max, x, 2, 2, 2);
    for (auto& b : mask_blocks) m = b->forward(m);
    return sigmoid(mask_out->forward(upsample_nearest(m, 2)));
  }

  Tensor forward(const Tensor& x) const { return residual_attention(trunk(x), mask(x)); }

  std::vector<std::shared_ptr<nn::ResidualBlock>> trunk_blocks;
  std::vector<std::shared_ptr<nn::ResidualBlock>> mask_blocks;
  std::shared_ptr<nn::Conv2d> mask_out;
};

/// Multi-head scaled dot-product self-attention. Each head h has its own
/// Wq, Wk, Wv [d_model, d_k]; heads are concatenated and projected by
/// Wo [heads*d_k, d_model]. Tokens [n,d_model] or [N,n,d_model].
class SelfAttention : public Module {
 public:
  SelfAttention(std::size_t d_model, std::size_t heads, Rng& rng) : d_model_(d_model), heads_(heads) {
    if (heads == 0 || d_model % heads != 0) {
      throw ConfigError("SelfAttention: heads " + std::to_string(heads) + " must divide d_model " +
                        std::to_string(d_model));
    }
    d_k_ = d_model / heads;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::string p = "head" + std::to_string(h) + ".";
      wq.push_back(register_parameter(p + "wq", nn::fan_in_uniform(rng, {d_model, d_k_}, d_model)));
      wk.push_back(register_parameter(p + "wk", nn::fan_in_uniform(rng, {d_model, d_k_}, d_model)));
      wv.push_back(register_parameter(p + "wv", nn::fan_in_uniform(rng, {d_model, d_k_}, d_model)));
    }
    wo = register_parameter("wo", nn::fan_in_uniform(rng, {heads * d_k_, d_model}, heads * d_k_));
  }

  std::size_t heads() const { return heads_; }
  std::size_t d_k() const { return d_k_; }

  /// softmax(Q K^T / sqrt(d_k)) for one head of one sequence [n,d_model].
  Tensor scores(const Tensor& tokens, std::size_t head) const {
    check(tokens);
    return scores_from(matmul(tokens, wq.at(head)), matmul(tokens, wk.at(head)));
  }

  /// Per-head output scores * V, [n,d_k].
  Tensor head_output(const Tensor& tokens, std::size_t head) const {
    return matmul(scores(tokens, head), matmul(tokens, wv.at(head)));
  }

  Tensor forward(const Tensor& tokens) const {
    if (tokens.rank() == 2) {
      check(tokens);
      return sequence(tokens);
    }
    if (tokens.rank() != 3)
      throw ShapeError("SelfAttention", "expected [n,d] or [N,n,d], got " + shape_str(tokens.shape()));
    std::vector<Tensor> outs;
    const std::size_t n = tokens.dim(1);
    for (std::size_t b = 0; b < tokens.dim(0); ++b) {
      Tensor seq = reshape(narrow(tokens, 0, b, 1), {n, tokens.dim(2)});
      check(seq);
      outs.push_back(reshape(sequence(seq), {1, n, d_model_}));
    }
    return outs.size() == 1 ? outs[0] : concat(outs, 0);
  }

  std::vector<Tensor> wq, wk, wv;
  Tensor wo;

 private:
  void check(const Tensor& t) const {
    if (t.rank() != 2 || t.dim(1) != d_model_) throw ShapeError("SelfAttention", t.shape(), Shape{t.dim(0), d_model_});
  }

  Tensor scores_from(const Tensor& q, const Tensor& k) const {
    return softmax(mul(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(d_k_))), 1);
  }

  Tensor sequence(const Tensor& x) const {
    std::vector<Tensor> heads;
    heads.reserve(heads_);
    for (std::size_t h = 0; h < heads_; ++h) {
      heads.push_back(matmul(scores_from(matmul(x, wq[h]), matmul(x, wk[h])), matmul(x, wv[h])));
    }
    Tensor cat = heads_ == 1 ? heads[0] : concat(heads, 1);
    return matmul(cat, wo);
  }

  std::size_t d_model_, heads_, d_k_ = 0;
};

/// Pre-norm transformer encoder layer: x + MHSA(LN(x)), then x + MLP(LN(x))
/// with a GELU hidden layer.
class EncoderLayer : public Module {
 public:
  EncoderLayer(std::size_t d_model, std::size_t heads, std::size_t mlp_ratio, Rng& rng) {
    norm1 = register_module("norm1", std::make_shared<nn::LayerNorm>(d_model));
    attn = register_module("attn", std::make_shared<SelfAttention>(d_model, heads, rng));
    norm2 = register_module("norm2", std::make_shared<nn::LayerNorm>(d_model));
    fc1 = register_module("fc1", std::make_shared<nn::Linear>(d_model, d_model * mlp_ratio, rng));
    fc2 = register_module("fc2", std::make_shared<nn::Linear>(d_model * mlp_ratio, d_model, rng));
  }

  Tensor forward(const Tensor& x) const {
    Tensor h = add(x, attn->forward(norm1->forward(x)));
    return add(h, fc2->forward(gelu(fc1->forward(norm2->forward(h)))));
  }

  std::shared_ptr<nn::LayerNorm> norm1, norm2;
  std::shared_ptr<SelfAttention> attn;
  std::shared_ptr<nn::Linear> fc1, fc2;
};

/// Top-down feature pyramid. Levels are given coarse-to-fine, each twice the
/// spatial size of the previous. Level 0: smooth(lateral(f0)); level i:
/// smooth(lateral(fi) + upsample2(output[i-1])). All outputs have `width`
/// channels.
class Fpn : public Module {
 public:
  Fpn(const std::vector<std::size_t>& in_channels, std::size_t width, Rng& rng) {
    for (std::size_t i = 0; i < in_channels.size(); ++i) {
      lateral.push_back(register_module("lateral" + std::to_string(i),
                                        std::make_shared<nn::Conv2d>(in_channels[i], width, 1, Conv2dOptions{}, rng)));
      smooth.push_back(
          register_module("smooth" + std::to_string(i),
                          std::make_shared<nn::Conv2d>(width, width, 3, Conv2dOptions{.padding = 1}, rng)));
    }
  }

  std::vector<Tensor> forward(const std::vector<Tensor>& features) const {
    if (features.size() != lateral.size()) {
      throw ConfigError("Fpn: expected " + std::to_string(lateral.size()) + " levels, got " +
                        std::to_string(features.size()));
    }
    std::vector<Tensor> out;
    for (std::size_t i = 0; i < features.size(); ++i) {
      Tensor merged = lateral[i]->forward(features[i]);
      if (i > 0) {
        const Tensor& prev = features[i - 1];
        const std::size_t r = prev.rank();
        const Tensor& cur = features[i];
        if (cur.rank() != r || cur.dim(r - 2) != 2 * prev.dim(r - 2) || cur.dim(r - 1) != 2 * prev.dim(r - 1)) {
          throw ConfigError("Fpn: level " + std::to_string(i) + " " + shape_str(cur.shape()) +
                            " is not twice the spatial size of " + shape_str(prev.shape()));
        }
        merged = add(merged, upsample_nearest(out.back(), 2));
      }
      out.push_back(smooth[i]->forward(merged));
    }
    return out;
  }

  std::vector<std::shared_ptr<nn::Conv2d>> lateral, smooth;
};

}  // namespace pestnet
