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

#include <cstdint>
#include <optional>
#include <vector>

#include "pestnet/nn/module.hpp"
#include "pestnet/ops.hpp"

namespace pestnet::nn {

/// x [n,d_in] * W [d_in,d_out] + b, with b broadcast over rows.
inline Tensor linear(const Tensor& x, const Tensor& w, const std::optional<Tensor>& b) {
  if (x.rank() != 2 || w.rank() != 2 || x.dim(1) != w.dim(0)) throw ShapeError("linear", x.shape(), w.shape());
  Tensor y = matmul(x, w);
  if (!b) return y;
  if (b->numel() != w.dim(1)) throw ShapeError("linear(bias)", b->shape(), Shape{w.dim(1)});
  return broadcast_add(y, reshape(*b, {1, w.dim(1)}));
}

class Linear : public Module {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true) : in_(in), out_(out) {
    weight = register_parameter("weight", fan_in_uniform(rng, {in, out}, in));
    if (bias) this->bias = register_parameter("bias", Tensor::zeros({out}));
  }

  /// Accepts [n,in] or any [..., in]; leading dims are flattened and restored.
  Tensor forward(const Tensor& x) const {
    if (x.rank() == 2) return linear(x, weight, bias);
    if (x.rank() < 1 || x.dim(x.rank() - 1) != in_) throw ShapeError("Linear", x.shape(), weight.shape());
    Shape out_shape = x.shape();
    out_shape.back() = out_;
    return reshape(linear(reshape(x, {x.numel() / in_, in_}), weight, bias), out_shape);
  }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  Tensor weight;
  std::optional<Tensor> bias;

 private:
  std::size_t in_, out_;
};

class Conv2d : public Module {
 public:
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, Conv2dOptions opt, Rng& rng, bool bias = true)
      : opt_(opt) {
    if (opt.groups == 0 || in % opt.groups != 0 || out % opt.groups != 0) {
      throw ConfigError("Conv2d: channels " + std::to_string(in) + "->" + std::to_string(out) +
                        " not divisible by groups " + std::to_string(opt.groups));
    }
    const std::size_t cig = in / opt.groups;
    weight = register_parameter("weight", fan_in_uniform(rng, {out, cig, kernel, kernel}, cig * kernel * kernel));
    if (bias) this->bias = register_parameter("bias", Tensor::zeros({out}));
  }

  Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, opt_); }

  const Conv2dOptions& options() const { return opt_; }

  Tensor weight;
  std::optional<Tensor> bias;

 private:
  Conv2dOptions opt_;
};

/// Per-channel affine parameters and running statistics of a batch norm.
struct BatchNormState {
  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

/// Training: normalize by batch statistics and fold them into the running
/// estimates (running_var takes the unbiased batch variance). Evaluation:
/// normalize by the running estimates. Works over axis 1 of [N,F] or [N,C,H,W].
inline Tensor batch_norm(const Tensor& x, BatchNormState& st, Mode mode) {
  if (mode == Mode::Evaluation) {
    return pestnet::batch_norm(x, st.gamma, st.beta, st.epsilon, &st.running_mean.values(), &st.running_var.values(),
                               nullptr);
  }
  BatchStats stats;
  Tensor y = pestnet::batch_norm(x, st.gamma, st.beta, st.epsilon, nullptr, nullptr, &stats);
  auto rm = st.running_mean.mutable_data();
  auto rv = st.running_var.mutable_data();
  const double correction = static_cast<double>(stats.count) / static_cast<double>(stats.count - 1);
  for (std::size_t c = 0; c < rm.size(); ++c) {
    rm[c] = (1.0 - st.momentum) * rm[c] + st.momentum * stats.mean[c];
    rv[c] = (1.0 - st.momentum) * rv[c] + st.momentum * stats.var[c] * correction;
  }
  return y;
}

class BatchNorm : public Module {
 public:
  explicit BatchNorm(std::size_t channels, double momentum = 0.1, double epsilon = 1e-5) {
    if (!(momentum > 0.0 && momentum < 1.0)) throw ConfigError("BatchNorm: momentum must be in (0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("BatchNorm: epsilon must be positive");
    state.gamma = register_parameter("gamma", Tensor::ones({channels}));
    state.beta = register_parameter("beta", Tensor::zeros({channels}));
    state.running_mean = register_buffer("running_mean", Tensor::zeros({channels}));
    state.running_var = register_buffer("running_var", Tensor::ones({channels}));
    state.momentum = momentum;
    state.epsilon = epsilon;
  }

  Tensor forward(const Tensor& x) { return batch_norm(x, state, mode()); }

  BatchNormState state;
};

class LayerNorm : public Module {
 public:
  explicit LayerNorm(std::size_t dim, double epsilon = 1e-5) : epsilon_(epsilon) {
    gamma = register_parameter("gamma", Tensor::ones({dim}));
    beta = register_parameter("beta", Tensor::zeros({dim}));
  }

  Tensor forward(const Tensor& x) const { return layer_norm(x, gamma, beta, epsilon_); }

  Tensor gamma;
  Tensor beta;

 private:
  double epsilon_;
};

inline void check_dropout_rate(double rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout: rate must be in [0,1), got " + std::to_string(rate));
}

/// Keep-mask scaled by 1/(1-rate): entries are 0 or 1/(1-rate).
inline Tensor dropout_mask(const Shape& shape, double rate, Rng& rng) {
  check_dropout_rate(rate);
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> m(numel_of(shape));
  for (double& v : m) v = rng.uniform() < rate ? 0.0 : keep_scale;
  return Tensor(shape, std::move(m));
}

/// Inverted dropout. Evaluation mode and rate 0 return x itself.
inline Tensor dropout(const Tensor& x, double rate, Mode mode, Rng& rng) {
  check_dropout_rate(rate);
  if (mode == Mode::Evaluation || rate == 0.0) return x;
  return mul(x, dropout_mask(x.shape(), rate, rng));
}

class Dropout : public Module {
 public:
  explicit Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
    check_dropout_rate(rate);
    register_rng("rng", &rng_);
  }

  Tensor forward(const Tensor& x) { return dropout(x, rate_, mode(), rng_); }

  double rate() const { return rate_; }

 private:
  double rate_;
  Rng rng_;
};

}  // namespace pestnet::nn
