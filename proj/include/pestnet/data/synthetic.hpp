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
#include <cstdio>
#include <filesystem>
#include <string>

#include "pestnet/data/manifest.hpp"
#include "pestnet/format.hpp"

namespace pestnet::data {

struct SyntheticSpec {
  std::size_t num_classes = 3;
  std::size_t per_class = 100;
  std::size_t size = 16;
  std::uint64_t seed = 0;
  double noise = 0.1;
  std::array<double, 3> ratios = {6, 1, 3};
};

/// Class c draws pattern c % 3 (disk, bar, checker) in grid cell and color
/// chosen by c / 3, on a dark background.
struct ClassPattern {
  std::size_t kind, cell_x, cell_y, grid;
  std::array<double, 3> color;
};

inline constexpr std::array<std::array<double, 3>, 8> kPalette = {{{0.9, 0.2, 0.2},
                                                                   {0.2, 0.9, 0.2},
                                                                   {0.2, 0.3, 0.9},
                                                                   {0.9, 0.9, 0.2},
                                                                   {0.9, 0.2, 0.9},
                                                                   {0.2, 0.9, 0.9},
                                                                   {0.95, 0.95, 0.95},
                                                                   {0.9, 0.55, 0.1}}};

inline ClassPattern class_pattern(std::size_t c, std::size_t num_classes) {
  const std::size_t slots = (num_classes + 2) / 3;
  std::size_t grid = 1;
  while (grid < 3 && grid * grid < slots) ++grid;
  const std::size_t cells = grid * grid;
  const std::size_t slot = c / 3;
  const std::size_t color = slot / cells;
  if ((slots + cells - 1) / cells > kPalette.size()) {
    throw ConfigError("generate_synthetic: at most " + std::to_string(3 * 9 * kPalette.size()) + " classes supported");
  }
  return {c % 3, (slot % cells) % grid, (slot % cells) / grid, grid, kPalette[color]};
}

/// Ground-truth box of a class's grid cell.
inline DetectionBox synthetic_box(std::size_t c, std::size_t num_classes) {
  const auto p = class_pattern(c, num_classes);
  const double s = 1.0 / static_cast<double>(p.grid);
  return {c, (static_cast<double>(p.cell_x) + 0.5) * s, (static_cast<double>(p.cell_y) + 0.5) * s, s, s, 1.0};
}

inline Image render_synthetic(std::size_t c, std::size_t num_classes, std::size_t size, double noise, Rng& rng) {
  const auto p = class_pattern(c, num_classes);
  const double cell = static_cast<double>(size) / static_cast<double>(p.grid);
  const double ox = static_cast<double>(p.cell_x) * cell, oy = static_cast<double>(p.cell_y) * cell;
  Image img;
  img.width = img.height = size;
  img.pixels.resize(size * size * 3);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      // Cell-local coordinates in [0,1).
      const double u = (static_cast<double>(x) + 0.5 - ox) / cell, v = (static_cast<double>(y) + 0.5 - oy) / cell;
      bool on = false;
      if (u >= 0 && u < 1 && v >= 0 && v < 1) {
        switch (p.kind) {
          case 0: on = (u - 0.5) * (u - 0.5) + (v - 0.5) * (v - 0.5) <= 0.16; break;
          case 1: on = v >= 0.3 && v < 0.7; break;
          default: on = (static_cast<int>(std::floor(u * 4)) + static_cast<int>(std::floor(v * 4))) % 2 == 0; break;
        }
      }
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double base = on ? p.color[ch] : 0.1;
        const double val = std::clamp(base + rng.uniform(-noise, noise), 0.0, 1.0);
        img.pixels[(y * size + x) * 3 + ch] = static_cast<std::uint8_t>(std::round(255.0 * val));
      }
    }
  }
  return img;
}

/// Writes images/, annotations/ and manifest.csv (stratified by `ratios`)
/// under `out_dir`; returns the manifest.
inline Manifest generate_synthetic(const SyntheticSpec& spec, const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (spec.num_classes < 2 || spec.per_class < 1 || spec.size < 3) {
    throw ConfigError("generate_synthetic: need >= 2 classes, >= 1 sample per class and size >= 3");
  }
  class_pattern(spec.num_classes - 1, spec.num_classes);
  fs::create_directories(fs::path(out_dir) / "images");
  fs::create_directories(fs::path(out_dir) / "annotations");
  Rng rng(spec.seed);
  std::vector<Sample> samples;
  char stem[64];
  for (std::size_t c = 0; c < spec.num_classes; ++c) {
    const DetectionBox box = synthetic_box(c, spec.num_classes);
    const std::string line = std::to_string(c) + " " + format_g17(box.cx) + " " + format_g17(box.cy) + " " +
                             format_g17(box.w) + " " + format_g17(box.h) + " 1\n";
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      std::snprintf(stem, sizeof stem, "c%03zu_%05zu", c, i);
      write_image((fs::path(out_dir) / "images" / (std::string(stem) + ".ppm")).string(),
                  render_synthetic(c, spec.num_classes, spec.size, spec.noise, rng));
      write_file((fs::path(out_dir) / "annotations" / (std::string(stem) + ".txt")).string(), line);
      samples.push_back(Sample{"images/" + std::string(stem) + ".ppm", c, Split::Train, {box}, std::nullopt});
    }
  }
  Manifest m;
  m.base_dir = out_dir;
  m.samples = split_dataset(std::move(samples), spec.ratios, spec.seed);
  write_file((fs::path(out_dir) / "manifest.csv").string(), format_manifest(m));
  return m;
}

}  // namespace pestnet::data
