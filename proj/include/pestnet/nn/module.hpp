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
#include <string>
#include <utility>
#include <vector>

#include "pestnet/error.hpp"
#include "pestnet/rng.hpp"
#include "pestnet/tensor.hpp"

namespace pestnet::nn {

enum class Mode { Training, Evaluation };

/// Base for every layer and model: owns named parameters (trainable
/// tensors), buffers (persistent non-trainable tensors), RNG streams, and
/// child modules. Names compose with '.' and are stable across save/load.
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  using Named = std::vector<std::pair<std::string, Tensor>>;

  Named named_parameters() const {
    Named out;
    collect(out, "", &Module::params_);
    return out;
  }

  Named named_buffers() const {
    Named out;
    collect(out, "", &Module::buffers_);
    return out;
  }

  std::vector<std::pair<std::string, Rng*>> named_rngs() {
    std::vector<std::pair<std::string, Rng*>> out;
    collect_rngs(out, "");
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  void set_mode(Mode m) {
    mode_ = m;
    for (auto& [name, c] : children_) c->set_mode(m);
  }
  Mode mode() const { return mode_; }
  bool training() const { return mode_ == Mode::Training; }

  void zero_grad() {
    for (auto& [name, t] : named_parameters()) t.zero_grad();
  }

  /// Excludes every parameter of this module from gradient computation and
  /// optimizer updates.
  void freeze() {
    for (auto& [name, t] : named_parameters()) t.set_requires_grad(false);
  }

  std::shared_ptr<Module> child(const std::string& name) const {
    for (auto& [n, c] : children_) {
      if (n == name) return c;
    }
    return nullptr;
  }

 protected:
  Tensor register_parameter(std::string name, Tensor t) {
    t.set_requires_grad(true);
    params_.emplace_back(std::move(name), t);
    return t;
  }

  Tensor register_buffer(std::string name, Tensor t) {
    buffers_.emplace_back(std::move(name), t);
    return t;
  }

  void register_rng(std::string name, Rng* rng) { rngs_.emplace_back(std::move(name), rng); }

  template <typename M>
  std::shared_ptr<M> register_module(std::string name, std::shared_ptr<M> m) {
    m->set_mode(mode_);
    children_.emplace_back(std::move(name), m);
    return m;
  }

  /// Swaps a registered child in place, keeping its name and position.
  template <typename M>
  std::shared_ptr<M> replace_module(const std::string& name, std::shared_ptr<M> m) {
    for (auto& [n, c] : children_) {
      if (n == name) {
        m->set_mode(mode_);
        c = m;
        return m;
      }
    }
    throw ContractError("replace_module: no child named '" + name + "'");
  }

 private:
  void collect(Named& out, const std::string& prefix, Named Module::* field) const {
    for (auto& [n, t] : this->*field) out.emplace_back(prefix + n, t);
    for (auto& [n, c] : children_) c->collect(out, prefix + n + ".", field);
  }

  void collect_rngs(std::vector<std::pair<std::string, Rng*>>& out, const std::string& prefix) {
    for (auto& [n, r] : rngs_) out.emplace_back(prefix + n, r);
    for (auto& [n, c] : children_) c->collect_rngs(out, prefix + n + ".");
  }

  Named params_;
  Named buffers_;
  std::vector<std::pair<std::string, Rng*>> rngs_;
  std::vector<std::pair<std::string, std::shared_ptr<Module>>> children_;
  Mode mode_ = Mode::Training;
};

/// Uniform in +-sqrt(3 / fan_in), i.e. unit-variance preserving for linear maps.
inline Tensor fan_in_uniform(Rng& rng, Shape shape, std::size_t fan_in) {
  const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
  std::vector<double> v(numel_of(shape));
  for (double& x : v) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(v));
}

}  // namespace pestnet::nn
