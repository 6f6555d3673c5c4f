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

#include <algorithm>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pestnet/attention.hpp"

namespace pestnet {

enum class Arch { TinyResNet, TinyConvNeXt, TinyViT, Ran, FpnClassifier, Fusion };

inline std::string arch_name(Arch a) {
  switch (a) {
    case Arch::TinyResNet: return "tiny-resnet";
    case Arch::TinyConvNeXt: return "tiny-convnext";
    case Arch::TinyViT: return "tiny-vit";
    case Arch::Ran: return "ran";
    case Arch::FpnClassifier: return "fpn";
    case Arch::Fusion: return "fusion";
  }
  return "unknown";
}

inline Arch parse_arch(const std::string& s) {
  for (Arch a : {Arch::TinyResNet, Arch::TinyConvNeXt, Arch::TinyViT, Arch::Ran, Arch::FpnClassifier, Arch::Fusion}) {
    if (s == arch_name(a)) return a;
  }
  if (s == "fpn-classifier") return Arch::FpnClassifier;
  throw ConfigError("unknown architecture '" + s +
                    "' (expected tiny-resnet, tiny-convnext, tiny-vit, ran, fpn or fusion)");
}

/// Architecture and hyperparameters. `width` is the base channel count of
/// the CNN backbones; `d_model` is the ViT token width.
struct ModelSpec {
  Arch arch = Arch::TinyResNet;
  std::size_t num_classes = 3;
  std::size_t channels = 3;
  std::size_t height = 16;
  std::size_t width_px = 16;
  std::size_t width = 16;
  std::size_t depth = 2;
  std::size_t patch = 4;
  std::size_t d_model = 24;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 2;
  bool cbam = false;
  std::size_t reduction = 4;
  Arch branch_a = Arch::TinyConvNeXt;
  Arch branch_b = Arch::TinyViT;
  std::size_t hidden = 0;  // 0: fused width / 2
  double dropout = 0.1;
  std::uint64_t seed = 0;
};

/// Every violated constraint, so callers can report them together.
inline std::vector<std::string> spec_problems(const ModelSpec& s) {
  std::vector<std::string> p;
  auto need = [&](bool ok, const std::string& what) {
    if (!ok) p.push_back(what);
  };
  need(s.num_classes >= 2, "model.num_classes must be >= 2");
  need(s.channels >= 1 && s.height >= 1 && s.width_px >= 1, "model input dims must be positive");
  need(s.width >= 1 && s.depth >= 1, "model.width and model.depth must be positive");
  need(s.dropout >= 0.0 && s.dropout < 1.0, "model.dropout must be in [0,1)");
  std::vector<Arch> used = {s.arch};
  if (s.arch == Arch::Fusion) {
    need(s.branch_a != Arch::Fusion && s.branch_b != Arch::Fusion, "fusion branches must be backbones");
    used = {s.branch_a, s.branch_b};
  }
  for (Arch a : used) {
    switch (a) {
      case Arch::TinyResNet:
      case Arch::Ran:
        need(s.height % 2 == 0 && s.width_px % 2 == 0, arch_name(a) + " needs even input height and width");
        if (a == Arch::Ran) {
          need(s.height % 4 == 0 && s.width_px % 4 == 0, "ran needs input height and width divisible by 4");
        }
        if (a == Arch::TinyResNet && s.cbam) {
          need(s.reduction >= 1 && s.width % s.reduction == 0, "model.reduction must divide model.width");
        }
        break;
      case Arch::TinyConvNeXt:
        need(s.height % 2 == 0 && s.width_px % 2 == 0, "tiny-convnext needs even input height and width");
        break;
      case Arch::TinyViT:
        need(s.patch >= 1 && s.height % s.patch == 0 && s.width_px % s.patch == 0,
             "model.patch must divide input height and width");
        need(s.heads >= 1 && s.d_model % s.heads == 0, "model.heads must divide model.d_model");
        need(s.mlp_ratio >= 1, "model.mlp_ratio must be positive");
        break;
      case Arch::FpnClassifier:
        need(s.height % 8 == 0 && s.width_px % 8 == 0, "fpn needs input height and width divisible by 8");
        break;
      case Arch::Fusion: break;
    }
  }
  return p;
}

inline void validate(const ModelSpec& s) {
  auto p = spec_problems(s);
  if (p.empty()) return;
  std::string msg = "invalid model spec:";
  for (auto& e : p) msg += "\n  " + e;
  throw ConfigError(msg);
}

using TapMap = std::map<std::string, Tensor>;

/// Records named intermediate feature maps when a map is attached.
class Taps {
 public:
  Taps() = default;
  Taps(TapMap* map, std::string prefix) : map_(map), prefix_(std::move(prefix)) {}
  Tensor operator()(const std::string& name, Tensor t) const {
    if (map_) (*map_)[prefix_ + name] = t;
    return t;
  }
  Taps nested(const std::string& prefix) const { return Taps(map_, prefix_ + prefix); }

 private:
  TapMap* map_ = nullptr;
  std::string prefix_;
};

/// Feature extractor: [N,C,H,W] -> [N,feature_width].
class Backbone : public Module {
 public:
  Backbone(std::size_t channels, std::size_t height, std::size_t width)
      : channels_(channels), height_(height), width_(width) {}

  virtual Tensor features(const Tensor& x, const Taps& taps) = 0;
  virtual std::size_t feature_width() const = 0;
  /// Names accepted by `features` taps, each a [N,C',H',W'] map.
  virtual std::vector<std::string> layer_names() const = 0;

  Shape input_shape() const { return {channels_, height_, width_}; }

 protected:
  std::size_t channels_, height_, width_;
};

/// Global average pool of [N,C,H,W] to [N,C].
inline Tensor pooled(const Tensor& x) { return global_pool(PoolKind::Avg, x); }

/// LayerNorm over the channel dim of [N,C,H,W].
inline Tensor channel_norm(const nn::LayerNorm& ln, const Tensor& x) {
  const Shape nhwc{x.dim(0), x.dim(2), x.dim(3), x.dim(1)};
  Tensor h = ln.forward(permute(x, {0, 2, 3, 1}));
  return permute(reshape(h, nhwc), {0, 3, 1, 2});
}

/// conv3x3 -> BN -> relu -> maxpool 2, then residual blocks (width, then
/// 2*width for the rest), optionally CBAM after each block, then GAP.
class TinyResNet : public Backbone {
 public:
  TinyResNet(const ModelSpec& s, Rng& rng) : Backbone(s.channels, s.height, s.width_px) {
    stem = register_module(
        "stem", std::make_shared<nn::Conv2d>(s.channels, s.width, 3, Conv2dOptions{.padding = 1}, rng, false));
    stem_bn = register_module("stem_bn", std::make_shared<nn::BatchNorm>(s.width));
    std::size_t c = s.width;
    for (std::size_t i = 0; i < s.depth; ++i) {
      const std::size_t out = i == 0 ? s.width : 2 * s.width;
      blocks.push_back(register_module("block" + std::to_string(i), std::make_shared<nn::ResidualBlock>(c, out, rng)));
      if (s.cbam)
        cbams.push_back(register_module("cbam" + std::to_string(i), std::make_shared<Cbam>(out, s.reduction, rng)));
      c = out;
    }
    out_ = c;
  }

  Tensor features(const Tensor& x, const Taps& taps) override {
    Tensor h = taps("stem", relu(stem_bn->forward(stem->forward(x))));
    h = pool2d(PoolKind::Max, h, 2, 2, 2);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      h = blocks[i]->forward(h);
      if (!cbams.empty()) h = cbams[i]->forward(h);
      h = taps("block" + std::to_string(i), h);
    }
    return pooled(h);
  }

  std::size_t feature_width() const override { return out_; }

  std::vector<std::string> layer_names() const override {
    std::vector<std::string> n = {"stem"};
    for (std::size_t i = 0; i < blocks.size(); ++i) n.push_back("block" + std::to_string(i));
    return n;
  }

  std::shared_ptr<nn::Conv2d> stem;
  std::shared_ptr<nn::BatchNorm> stem_bn;
  std::vector<std::shared_ptr<nn::ResidualBlock>> blocks;
  std::vector<std::shared_ptr<Cbam>> cbams;

 private:
  std::size_t out_;
};

/// Patchify stem (k = s = 2) -> channel LN -> ConvNeXt blocks -> GAP -> LN.
class TinyConvNeXt : public Backbone {
 public:
  TinyConvNeXt(const ModelSpec& s, Rng& rng) : Backbone(s.channels, s.height, s.width_px), width_(s.width) {
    stem =
        register_module("stem", std::make_shared<nn::Conv2d>(s.channels, s.width, 2, Conv2dOptions{.stride = 2}, rng));
    stem_norm = register_module("stem_norm", std::make_shared<nn::LayerNorm>(s.width, 1e-6));
    for (std::size_t i = 0; i < s.depth; ++i) {
      blocks.push_back(register_module("block" + std::to_string(i), std::make_shared<nn::ConvNeXtBlock>(s.width, rng)));
    }
    norm = register_module("norm", std::make_shared<nn::LayerNorm>(s.width, 1e-6));
  }

  Tensor features(const Tensor& x, const Taps& taps) override {
    Tensor h = taps("stem", channel_norm(*stem_norm, stem->forward(x)));
    for (std::size_t i = 0; i < blocks.size(); ++i) h = taps("block" + std::to_string(i), blocks[i]->forward(h));
    return norm->forward(pooled(h));
  }

  std::size_t feature_width() const override { return width_; }

  std::vector<std::string> layer_names() const override {
    std::vector<std::string> n = {"stem"};
    for (std::size_t i = 0; i < blocks.size(); ++i) n.push_back("block" + std::to_string(i));
    return n;
  }

  std::shared_ptr<nn::Conv2d> stem;
  std::shared_ptr<nn::LayerNorm> stem_norm, norm;
  std::vector<std::shared_ptr<nn::ConvNeXtBlock>> blocks;

 private:
  std::size_t width_;
};

/// Patch embedding -> pre-norm encoder layers -> LN -> mean over tokens.
class TinyViT : public Backbone {
 public:
  TinyViT(const ModelSpec& s, Rng& rng) : Backbone(s.channels, s.height, s.width_px), d_model_(s.d_model) {
    patch = register_module(
        "patch", std::make_shared<nn::PatchEmbed>(s.channels, s.height, s.width_px, s.patch, s.d_model, rng));
    for (std::size_t i = 0; i < s.depth; ++i) {
      layers.push_back(register_module("layer" + std::to_string(i),
                                       std::make_shared<EncoderLayer>(s.d_model, s.heads, s.mlp_ratio, rng)));
    }
    norm = register_module("norm", std::make_shared<nn::LayerNorm>(s.d_model, 1e-6));
  }

  Tensor features(const Tensor& x, const Taps& taps) override {
    Tensor h = patch->tokens_from_grid(taps("patch", patch->grid(x)), true);
    for (auto& l : layers) h = l->forward(h);
    h = norm->forward(h);
    return reduce(ReduceKind::Mean, h, 1, false);
  }

  std::size_t feature_width() const override { return d_model_; }
  std::vector<std::string> layer_names() const override { return {"patch"}; }

  std::shared_ptr<nn::PatchEmbed> patch;
  std::vector<std::shared_ptr<EncoderLayer>> layers;
  std::shared_ptr<nn::LayerNorm> norm;

 private:
  std::size_t d_model_;
};

/// conv3x3 -> BN -> relu -> maxpool 2 -> stacked attention modules -> GAP.
class Ran : public Backbone {
 public:
  Ran(const ModelSpec& s, Rng& rng) : Backbone(s.channels, s.height, s.width_px), width_(s.width) {
    stem = register_module(
        "stem", std::make_shared<nn::Conv2d>(s.channels, s.width, 3, Conv2dOptions{.padding = 1}, rng, false));
    stem_bn = register_module("stem_bn", std::make_shared<nn::BatchNorm>(s.width));
    for (std::size_t i = 0; i < s.depth; ++i) {
      modules.push_back(
          register_module("attention" + std::to_string(i), std::make_shared<AttentionModule>(s.width, rng)));
    }
  }

  Tensor features(const Tensor& x, const Taps& taps) override {
    Tensor h = taps("stem", relu(stem_bn->forward(stem->forward(x))));
    h = pool2d(PoolKind::Max, h, 2, 2, 2);
    for (std::size_t i = 0; i < modules.size(); ++i) h = taps("attention" + std::to_string(i), modules[i]->forward(h));
    return pooled(h);
  }

  std::size_t feature_width() const override { return width_; }

  std::vector<std::string> layer_names() const override {
    std::vector<std::string> n = {"stem"};
    for (std::size_t i = 0; i < modules.size(); ++i) n.push_back("attention" + std::to_string(i));
    return n;
  }

  std::shared_ptr<nn::Conv2d> stem;
  std::shared_ptr<nn::BatchNorm> stem_bn;
  std::vector<std::shared_ptr<AttentionModule>> modules;

 private:
  std::size_t width_;
};

/// Three stride-2 stages (width, 2w, 4w) fused top-down by an FPN of width
/// w; every pyramid level is average pooled and the results concatenated.
class FpnClassifier : public Backbone {
 public:
  FpnClassifier(const ModelSpec& s, Rng& rng) : Backbone(s.channels, s.height, s.width_px), width_(s.width) {
    std::size_t c = s.channels;
    for (std::size_t i = 0; i < 3; ++i) {
      const std::size_t out = s.width << i;
      stages.push_back(register_module("stage" + std::to_string(i),
                                       std::make_shared<nn::Conv2d>(c, out, 2, Conv2dOptions{.stride = 2}, rng)));
      c = out;
    }
    fpn = register_module(
        "fpn", std::make_shared<Fpn>(std::vector<std::size_t>{4 * s.width, 2 * s.width, s.width}, s.width, rng));
  }

  Tensor features(const Tensor& x, const Taps& taps) override {
    std::vector<Tensor> levels;
    Tensor h = x;
    for (std::size_t i = 0; i < stages.size(); ++i) {
      h = taps("stage" + std::to_string(i), relu(stages[i]->forward(h)));
      levels.insert(levels.begin(), h);
    }
    auto fused = fpn->forward(levels);
    std::vector<Tensor> pooled_levels;
    for (std::size_t i = 0; i < fused.size(); ++i)
      pooled_levels.push_back(pooled(taps("fpn" + std::to_string(i), fused[i])));
    return concat(pooled_levels, 1);
  }

  std::size_t feature_width() const override { return 3 * width_; }

  std::vector<std::string> layer_names() const override {
    return {"stage0", "stage1", "stage2", "fpn0", "fpn1", "fpn2"};
  }

  std::vector<std::shared_ptr<nn::Conv2d>> stages;
  std::shared_ptr<Fpn> fpn;

 private:
  std::size_t width_;
};

inline std::shared_ptr<Backbone> build_backbone(Arch arch, const ModelSpec& s, Rng& rng) {
  switch (arch) {
    case Arch::TinyResNet: return std::make_shared<TinyResNet>(s, rng);
    case Arch::TinyConvNeXt: return std::make_shared<TinyConvNeXt>(s, rng);
    case Arch::TinyViT: return std::make_shared<TinyViT>(s, rng);
    case Arch::Ran: return std::make_shared<Ran>(s, rng);
    case Arch::FpnClassifier: return std::make_shared<FpnClassifier>(s, rng);
    case Arch::Fusion: break;
  }
  throw ConfigError("build_backbone: fusion is not a backbone");
}

/// Classifier over one backbone (head = linear) or two fused backbones
/// (head preceded by BN1d -> linear -> relu -> dropout -> BN1d).
class Model : public Module {
 public:
  /// Single backbone with a linear head.
  Model(std::shared_ptr<Backbone> backbone, std::size_t num_classes, Rng& rng) {
    if (num_classes < 2) throw ConfigError("Model: num_classes must be >= 2");
    input_ = backbone->input_shape();
    this->backbone = register_module("backbone", std::move(backbone));
    head = register_module("head", std::make_shared<nn::Linear>(this->backbone->feature_width(), num_classes, rng));
  }

  /// Dual-backbone fusion classifier.
  Model(std::shared_ptr<Backbone> a, std::shared_ptr<Backbone> b, std::size_t num_classes, std::size_t hidden,
        double dropout, Rng& rng) {
    if (num_classes < 2) throw ConfigError("Model: num_classes must be >= 2");
    if (a->input_shape() != b->input_shape()) {
      throw ConfigError("fusion: branch input specs differ: " + shape_str(a->input_shape()) + " vs " +
                        shape_str(b->input_shape()));
    }
    input_ = a->input_shape();
    branch_a = register_module("a", std::move(a));
    branch_b = register_module("b", std::move(b));
    const std::size_t fused = fused_width();
    if (hidden == 0) hidden = std::max<std::size_t>(1, fused / 2);
    bn1 = register_module("bn1", std::make_shared<nn::BatchNorm>(fused));
    fc1 = register_module("fc1", std::make_shared<nn::Linear>(fused, hidden, rng));
    drop = register_module("drop", std::make_shared<nn::Dropout>(dropout, rng.next_u64()));
    bn2 = register_module("bn2", std::make_shared<nn::BatchNorm>(hidden));
    head = register_module("head", std::make_shared<nn::Linear>(hidden, num_classes, rng));
  }

  bool is_fusion() const { return branch_a != nullptr; }
  std::size_t num_classes() const { return head->out_features(); }
  Shape input_shape() const { return input_; }
  std::size_t fused_width() const { return branch_a->feature_width() + branch_b->feature_width(); }

  /// Backbone features, [N,F].
  Tensor features(const Tensor& x, const Taps& taps = {}) {
    check_input(x);
    if (!is_fusion()) return backbone->features(x, taps);
    return concat({branch_a->features(x, taps.nested("a.")), branch_b->features(x, taps.nested("b."))}, 1);
  }

  /// Everything after the features, [N,F] -> [N,K].
  Tensor classify(const Tensor& f) {
    if (!is_fusion()) return head->forward(f);
    Tensor h = drop->forward(relu(fc1->forward(bn1->forward(f))));
    return head->forward(bn2->forward(h));
  }

  Tensor forward(const Tensor& x, const Taps& taps = {}) { return classify(features(x, taps)); }

  std::vector<std::string> layer_names() const {
    if (!is_fusion()) return backbone->layer_names();
    std::vector<std::string> n;
    for (auto& s : branch_a->layer_names()) n.push_back("a." + s);
    for (auto& s : branch_b->layer_names()) n.push_back("b." + s);
    return n;
  }

  /// Fresh head with `num_classes` outputs; optionally freeze the rest.
  void replace_head(std::size_t num_classes, bool freeze_backbone, Rng& rng) {
    if (!head) throw ContractError("replace_head: model has no designated head");
    if (num_classes < 2) throw ConfigError("replace_head: num_classes must be >= 2");
    const std::size_t in = head->in_features();
    if (freeze_backbone) freeze();
    head = replace_module("head", std::make_shared<nn::Linear>(in, num_classes, rng));
  }

  std::shared_ptr<Backbone> backbone, branch_a, branch_b;
  std::shared_ptr<nn::BatchNorm> bn1, bn2;
  std::shared_ptr<nn::Linear> fc1, head;
  std::shared_ptr<nn::Dropout> drop;

 private:
  void check_input(const Tensor& x) const {
    if (x.rank() != 4 || Shape{x.dim(1), x.dim(2), x.dim(3)} != input_) {
      throw ShapeError("Model", x.shape(), Shape{0, input_[0], input_[1], input_[2]});
    }
  }

  Shape input_;
};

/// Model for a spec, initialized from `spec.seed`.
inline std::shared_ptr<Model> build_model(const ModelSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  if (spec.arch != Arch::Fusion) {
    return std::make_shared<Model>(build_backbone(spec.arch, spec, rng), spec.num_classes, rng);
  }
  auto a = build_backbone(spec.branch_a, spec, rng);
  auto b = build_backbone(spec.branch_b, spec, rng);
  return std::make_shared<Model>(a, b, spec.num_classes, spec.hidden, spec.dropout, rng);
}

/// Class-activation heatmap for one image [C,H,W] at a named feature map.
/// alpha_c = spatial mean of d score / d feature_c; map = relu(sum_c
/// alpha_c feature_c), min-max scaled to [0,1]. A constant map becomes all
/// zeros if it is zero and all ones otherwise.
inline Tensor grad_cam(Model& model, const Tensor& image, std::size_t target, const std::string& layer) {
  const auto names = model.layer_names();
  if (std::find(names.begin(), names.end(), layer) == names.end()) {
    std::string known;
    for (auto& n : names) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("grad_cam: unknown layer '" + layer + "' (available: " + known + ")");
  }
  if (target >= model.num_classes()) {
    throw DomainError("grad_cam: class " + std::to_string(target) + " out of range [0," +
                      std::to_string(model.num_classes()) + ")");
  }
  if (image.rank() != 3) throw ShapeError("grad_cam", "expected image [C,H,W], got " + shape_str(image.shape()));
  const nn::Mode saved = model.mode();
  model.set_mode(nn::Mode::Evaluation);
  Tensor x = reshape(image, {1, image.dim(0), image.dim(1), image.dim(2)}).detach();
  x.set_requires_grad(true);
  TapMap taps;
  Tensor logits = model.forward(x, Taps(&taps, ""));
  backward(sum(narrow(logits, 1, target, 1)));
  model.set_mode(saved);
  const Tensor& fmap = taps.at(layer);
  const std::size_t c = fmap.dim(1), hw = fmap.dim(2) * fmap.dim(3);
  const auto& f = fmap.values();
  const auto g = fmap.grad();
  std::vector<double> cam(hw, 0.0);
  for (std::size_t k = 0; k < c; ++k) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < hw; ++i) alpha += g[k * hw + i];
    alpha /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) cam[i] += alpha * f[k * hw + i];
  }
  for (double& v : cam) v = std::max(v, 0.0);
  const auto [lo, hi] = std::minmax_element(cam.begin(), cam.end());
  const double mn = *lo, mx = *hi;
  for (double& v : cam) v = mx > mn ? (v - mn) / (mx - mn) : (mx > 0.0 ? 1.0 : 0.0);
  model.zero_grad();
  return Tensor({fmap.dim(2), fmap.dim(3)}, std::move(cam));
}

}  // namespace pestnet
