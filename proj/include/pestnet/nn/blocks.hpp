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

#include <memory>

#include "pestnet/nn/layers.hpp"

namespace pestnet::nn {

/// conv3x3-bn-relu-conv3x3-bn plus skip, then relu. A 1x1 conv + bn projects
/// the skip when channel counts differ.
class ResidualBlock : public Module {
 public:
  ResidualBlock(std::size_t in, std::size_t out, Rng& rng) {
    conv1 = register_module("conv1", std::make_shared<Conv2d>(in, out, 3, Conv2dOptions{.padding = 1}, rng, false));
    bn1 = register_module("bn1", std::make_shared<BatchNorm>(out));
    conv2 = register_module("conv2", std::make_shared<Conv2d>(out, out, 3, Conv2dOptions{.padding = 1}, rng, false));
    bn2 = register_module("bn2", std::make_shared<BatchNorm>(out));
    if (in != out) {
      proj = register_module("proj", std::make_shared<Conv2d>(in, out, 1, Conv2dOptions{}, rng, false));
      proj_bn = register_module("proj_bn", std::make_shared<BatchNorm>(out));
    }
  }

  Tensor forward(const Tensor& x) {
    Tensor f = bn2->forward(conv2->forward(relu(bn1->forward(conv1->forward(x)))));
    Tensor skip = proj ? proj_bn->forward(proj->forward(x)) : x;
    if (f.shape() != skip.shape()) throw ShapeError("ResidualBlock", f.shape(), skip.shape());
    return relu(add(f, skip));
  }

  std::shared_ptr<Conv2d> conv1, conv2, proj;
  std::shared_ptr<BatchNorm> bn1, bn2, proj_bn;
};

/// Depthwise 7x7 conv -> layer norm over channels -> pointwise expand ->
/// GELU -> pointwise contract, added to the input. Input [N,C,H,W].
class ConvNeXtBlock : public Module {
 public:
  ConvNeXtBlock(std::size_t width, Rng& rng, std::size_t expansion = 4) : width_(width) {
    dwconv = register_module(
        "dwconv", std::make_shared<Conv2d>(width, width, 7, Conv2dOptions{.padding = 3, .groups = width}, rng));
    norm = register_module("norm", std::make_shared<LayerNorm>(width));
    expand = register_module("expand", std::make_shared<Linear>(width, width * expansion, rng));
    contract = register_module("contract", std::make_shared<Linear>(width * expansion, width, rng));
  }

  Tensor forward(const Tensor& x) {
    const auto s = detail::spatial_dims("ConvNeXtBlock", x);
    if (s.c != width_) throw ShapeError("ConvNeXtBlock", x.shape(), Shape{width_});
    Tensor h = dwconv->forward(x);
    const Shape nchw{s.n, s.c, s.h, s.w};
    // Channels-last so the norm and pointwise linears act per location.
    h = reshape(permute(reshape(h, nchw), {0, 2, 3, 1}), {s.n * s.h * s.w, s.c});
    h = contract->forward(gelu(expand->forward(norm->forward(h))));
    h = permute(reshape(h, {s.n, s.h, s.w, s.c}), {0, 3, 1, 2});
    return add(x, reshape(h, x.shape()));
  }

  std::shared_ptr<Conv2d> dwconv;
  std::shared_ptr<LayerNorm> norm;
  std::shared_ptr<Linear> expand, contract;

 private:
  std::size_t width_;
};

/// Splits an image into non-overlapping p x p patches, projects each to
/// d_model, and adds a learned positional embedding per patch position.
/// [C,H,W] -> [T,d_model]; [N,C,H,W] -> [N,T,d_model], T = (H/p)(W/p).
class PatchEmbed : public Module {
 public:
  PatchEmbed(std::size_t channels, std::size_t height, std::size_t width, std::size_t patch, std::size_t d_model,
             Rng& rng)
      : channels_(channels), height_(height), width_(width), patch_(patch), d_model_(d_model) {
    if (patch == 0 || height % patch != 0 || width % patch != 0) {
      throw ConfigError("PatchEmbed: patch " + std::to_string(patch) + " does not divide " + std::to_string(height) +
                        "x" + std::to_string(width));
    }
    proj = register_module("proj",
                           std::make_shared<Conv2d>(channels, d_model, patch, Conv2dOptions{.stride = patch}, rng));
    position = register_parameter("position", Tensor::zeros({num_tokens(), d_model}));
  }

  std::size_t num_tokens() const { return (height_ / patch_) * (width_ / patch_); }
  std::size_t grid_h() const { return height_ / patch_; }
  std::size_t grid_w() const { return width_ / patch_; }

  /// Projected patch grid [N,d_model,H/p,W/p] before flattening.
  Tensor grid(const Tensor& x) const {
    const auto s = detail::spatial_dims("PatchEmbed", x);
    if (s.c != channels_ || s.h != height_ || s.w != width_) {
      throw ShapeError("PatchEmbed", x.shape(), Shape{channels_, height_, width_});
    }
    return proj->forward(reshape(x, {s.n, s.c, s.h, s.w}));
  }

  /// Tokens from a grid produced by grid().
  Tensor tokens_from_grid(const Tensor& g, bool batched) const {
    const std::size_t n = g.dim(0), t = num_tokens();
    Tensor tokens = reshape(permute(reshape(g, {n, d_model_, t}), {0, 2, 1}), {n, t, d_model_});
    tokens = broadcast_add(tokens, reshape(position, {1, t, d_model_}));
    return batched ? tokens : reshape(tokens, {t, d_model_});
  }

  Tensor forward(const Tensor& x) const { return tokens_from_grid(grid(x), x.rank() == 4); }

  std::shared_ptr<Conv2d> proj;
  Tensor position;

 private:
  std::size_t channels_, height_, width_, patch_, d_model_;
};

}  // namespace pestnet::nn
