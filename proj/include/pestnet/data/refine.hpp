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

#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pestnet/data/manifest.hpp"

namespace pestnet::data {

enum class Strategy { CroginalTrain, CropTrain, CropAllSplits, DiscardAllSplits };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::CroginalTrain: return "croginal-train";
    case Strategy::CropTrain: return "crop-train";
    case Strategy::CropAllSplits: return "crop-all-splits";
    case Strategy::DiscardAllSplits: return "discard-all-splits";
  }
  return "?";
}

inline Strategy parse_strategy(const std::string& s) {
  for (Strategy v :
       {Strategy::CroginalTrain, Strategy::CropTrain, Strategy::CropAllSplits, Strategy::DiscardAllSplits}) {
    if (s == strategy_name(v)) return v;
  }
  throw ConfigError("unknown refine strategy '" + s +
                    "' (expected croginal-train, crop-train, crop-all-splits or discard-all-splits)");
}

/// A box qualifies when its confidence is at least the threshold.
inline bool qualifies(const DetectionBox& b, double threshold) { return b.confidence >= threshold; }

/// Pixel bounds of a center-normalized box: floor of the low edge, ceil of
/// the high edge, clamped to the image. Empty after clamping: nullopt.
inline std::optional<CropRect> box_to_rect(const DetectionBox& b, std::size_t width, std::size_t height) {
  auto edge = [](double v, std::size_t n) {
    return std::clamp(v * static_cast<double>(n), 0.0, static_cast<double>(n));
  };
  const double x0 = std::floor(edge(b.cx - b.w / 2, width)), x1 = std::ceil(edge(b.cx + b.w / 2, width));
  const double y0 = std::floor(edge(b.cy - b.h / 2, height)), y1 = std::ceil(edge(b.cy + b.h / 2, height));
  if (!(x1 > x0) || !(y1 > y0)) return std::nullopt;
  return CropRect{static_cast<std::size_t>(x0), static_cast<std::size_t>(y0), static_cast<std::size_t>(x1),
                  static_cast<std::size_t>(y1)};
}

struct RefineReport {
  std::array<std::size_t, 3> in{}, out{};
  std::vector<std::string> warnings;

  std::string summary() const {
    std::string s;
    for (Split sp : kSplits) {
      const auto i = static_cast<std::size_t>(sp);
      s += std::string(split_name(sp)) + ": " + std::to_string(in[i]) + " -> " + std::to_string(out[i]) + "\n";
    }
    return s;
  }
};

/// (width, height) of a sample's image.
using DimsFn = std::function<std::pair<std::size_t, std::size_t>(const Manifest&, const Sample&)>;

inline std::pair<std::size_t, std::size_t> image_dims(const Manifest& m, const Sample& s) {
  const Image img = read_image(m.resolve(s));
  return {img.width, img.height};
}

/// Applies a refinement strategy:
///   croginal-train: train samples keep the original and add one crop per
///     qualifying box; val/test untouched.
///   crop-train: train samples become their crops; box-less ones are
///     dropped; val/test untouched.
///   crop-all-splits: crop-train on every split.
///   discard-all-splits: samples without a qualifying box are dropped from
///     every split; survivors stay uncropped.
/// Crops whose box is empty after clamping are skipped with a warning.
inline Manifest refine(const Manifest& m, Strategy strategy, double threshold, RefineReport* report = nullptr,
                       const DimsFn& dims = image_dims) {
  if (!(threshold >= 0.0 && threshold <= 1.0)) throw ConfigError("refine: threshold must be in [0,1]");
  RefineReport local;
  RefineReport& rep = report ? *report : local;
  rep = {};
  Manifest out;
  out.base_dir = m.base_dir;
  auto crops_split = [&](Split s) {
    switch (strategy) {
      case Strategy::CroginalTrain:
      case Strategy::CropTrain: return s == Split::Train;
      case Strategy::CropAllSplits: return true;
      case Strategy::DiscardAllSplits: return false;
    }
    return false;
  };
  for (const auto& s : m.samples) {
    ++rep.in[static_cast<std::size_t>(s.split)];
    std::vector<DetectionBox> good;
    for (const auto& b : s.boxes) {
      if (qualifies(b, threshold)) good.push_back(b);
    }
    auto emit = [&](Sample x) {
      ++rep.out[static_cast<std::size_t>(x.split)];
      out.samples.push_back(std::move(x));
    };
    if (strategy == Strategy::DiscardAllSplits) {
      if (!good.empty()) emit(s);
      continue;
    }
    if (!crops_split(s.split)) {
      emit(s);
      continue;
    }
    if (strategy == Strategy::CroginalTrain) emit(s);
    if (good.empty()) continue;
    const auto [w, h] = dims(m, s);
    for (std::size_t k = 0; k < good.size(); ++k) {
      auto rect = box_to_rect(good[k], w, h);
      if (!rect) {
        rep.warnings.push_back(s.path + ": box " + std::to_string(k) + " is empty after clamping, skipped");
        continue;
      }
      Sample c = s;
      c.boxes = {good[k]};
      c.crop = rect;
      emit(std::move(c));
    }
  }
  return out;
}

/// Writes each cropped sample as a PPM under `out_dir/crops` and returns a
/// manifest rooted at `out_dir` whose paths point at the written crops or
/// the original images.
inline Manifest materialize(const Manifest& m, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(out_dir) / "crops");
  Manifest out;
  out.base_dir = out_dir;
  std::map<std::string, std::size_t> counter;
  const fs::path root = fs::absolute(out_dir);
  for (const auto& s : m.samples) {
    Sample x = s;
    if (s.crop) {
      const std::string stem = fs::path(s.path).stem().string();
      const std::string name = "crops/" + stem + "_crop" + std::to_string(counter[stem]++) + ".ppm";
      write_image((fs::path(out_dir) / name).string(), crop(read_image(m.resolve(s)), *s.crop));
      x.path = name;
      x.crop.reset();
    } else {
      x.path = fs::proximate(fs::absolute(m.resolve(s)), root).generic_string();
    }
    out.samples.push_back(std::move(x));
  }
  return out;
}

}  // namespace pestnet::data
