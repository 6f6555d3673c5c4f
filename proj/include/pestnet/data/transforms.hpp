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
#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "pestnet/rng.hpp"
#include "pestnet/tensor.hpp"

namespace pestnet::data {

constexpr std::array<double, 3> kImageNetMean = {0.485, 0.456, 0.406};
constexpr std::array<double, 3> kImageNetStd = {0.229, 0.224, 0.225};

namespace detail {

inline void check_rgb(const char* op, const Tensor& x) {
  if (x.rank() != 3 || x.dim(0) != 3) throw ShapeError(op, "expected [3,H,W], got " + shape_str(x.shape()));
}

inline void check_image(const char* op, const Tensor& x) {
  if (x.rank() != 3) throw ShapeError(op, "expected [C,H,W], got " + shape_str(x.shape()));
}

}  // namespace detail

/// Per-channel (x - mean) / std.
inline Tensor normalize(const Tensor& x, const std::array<double, 3>& mean = kImageNetMean,
                        const std::array<double, 3>& std = kImageNetStd) {
  detail::check_rgb("normalize", x);
  Tensor out = x.clone();
  const std::size_t hw = x.dim(1) * x.dim(2);
  auto d = out.mutable_data();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < hw; ++i) d[c * hw + i] = (d[c * hw + i] - mean[c]) / std[c];
  }
  return out;
}

inline Tensor denormalize(const Tensor& x, const std::array<double, 3>& mean = kImageNetMean,
                          const std::array<double, 3>& std = kImageNetStd) {
  detail::check_rgb("denormalize", x);
  Tensor out = x.clone();
  const std::size_t hw = x.dim(1) * x.dim(2);
  auto d = out.mutable_data();
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < hw; ++i) d[c * hw + i] = d[c * hw + i] * std[c] + mean[c];
  }
  return out;
}

/// Bilinear resize of [C,H,W] with half-pixel centers (corners not
/// aligned); source coordinates are clamped to the image.
inline Tensor resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  detail::check_image("resize", x);
  if (out_h == 0 || out_w == 0) throw ConfigError("resize: target size must be positive");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h == out_h && w == out_w) return x.clone();
  const double sy = static_cast<double>(h) / static_cast<double>(out_h);
  const double sx = static_cast<double>(w) / static_cast<double>(out_w);
  struct Tap {
    std::size_t i0, i1;
    double f;
  };
  auto taps = [](std::size_t n_out, std::size_t n_in, double scale) {
    std::vector<Tap> t(n_out);
    for (std::size_t o = 0; o < n_out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(n_in - 1));
      const std::size_t i0 = static_cast<std::size_t>(std::floor(src));
      t[o] = {i0, std::min(i0 + 1, n_in - 1), src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(out_h, h, sy), tx = taps(out_w, w, sx);
  std::vector<double> out(c * out_h * out_w);
  const auto& v = x.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = &v[ch * h * w];
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[oy];
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[ox];
        const double top = src[a.i0 * w + b.i0] * (1 - b.f) + src[a.i0 * w + b.i1] * b.f;
        const double bot = src[a.i1 * w + b.i0] * (1 - b.f) + src[a.i1 * w + b.i1] * b.f;
        out[(ch * out_h + oy) * out_w + ox] = top * (1 - a.f) + bot * a.f;
      }
    }
  }
  return Tensor({c, out_h, out_w}, std::move(out));
}

inline Tensor flip_horizontal(const Tensor& x) {
  detail::check_image("flip_horizontal", x);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < c * h; ++i) {
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = x.values()[i * w + (w - 1 - j)];
  }
  return Tensor(x.shape(), std::move(out));
}

inline Tensor flip_vertical(const Tensor& x) {
  detail::check_image("flip_vertical", x);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  std::vector<double> out(x.numel());
  for (std::size_t k = 0; k < c; ++k) {
    for (std::size_t i = 0; i < h; ++i) {
      std::copy_n(&x.values()[(k * h + (h - 1 - i)) * w], w, &out[(k * h + i) * w]);
    }
  }
  return Tensor(x.shape(), std::move(out));
}

/// Rotation by `degrees` (counter-clockwise in image coordinates with y
/// down) composed with horizontal shear x' = x + shear * y, both about the
/// image center. Bilinear sampling; outside the source reads as 0.
inline Tensor affine(const Tensor& x, double degrees, double shear) {
  detail::check_image("affine", x);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const double t = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(t), sn = std::sin(t);
  // Forward map A = R * S with S = [[1, shear], [0, 1]]; sample at A^-1.
  const double a00 = cs, a01 = cs * shear - sn, a10 = sn, a11 = sn * shear + cs;
  const double det = a00 * a11 - a01 * a10;
  const double i00 = a11 / det, i01 = -a01 / det, i10 = -a10 / det, i11 = a00 / det;
  const double cx = (static_cast<double>(w) - 1) / 2, cy = (static_cast<double>(h) - 1) / 2;
  std::vector<double> out(x.numel(), 0.0);
  const auto& v = x.values();
  auto px = [&](std::size_t ch, long yy, long xx) {
    if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) return 0.0;
    return v[(ch * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
  };
  for (std::size_t oy = 0; oy < h; ++oy) {
    for (std::size_t ox = 0; ox < w; ++ox) {
      const double dx = static_cast<double>(ox) - cx, dy = static_cast<double>(oy) - cy;
      const double sx = i00 * dx + i01 * dy + cx, sy = i10 * dx + i11 * dy + cy;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      const double ax = sx - fx, ay = sy - fy;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double top = px(ch, y0, x0) * (1 - ax) + px(ch, y0, x0 + 1) * ax;
        const double bot = px(ch, y0 + 1, x0) * (1 - ax) + px(ch, y0 + 1, x0 + 1) * ax;
        out[(ch * h + oy) * w + ox] = top * (1 - ay) + bot * ay;
      }
    }
  }
  return Tensor(x.shape(), std::move(out));
}

struct AugmentSpec {
  bool horizontal_flip = true;
  bool vertical_flip = true;
  double rotation_degrees = 10.0;
  double shear = 0.2;
  bool apply_to_validation = true;
};

inline std::vector<std::string> augment_problems(const AugmentSpec& s) {
  std::vector<std::string> p;
  if (!(s.rotation_degrees >= 0.0 && s.rotation_degrees < 180.0))
    p.push_back("augment.rotation_degrees must be in [0,180)");
  if (!(s.shear >= 0.0)) p.push_back("augment.shear must be >= 0");
  return p;
}

/// One draw of augmentation parameters.
struct AugmentParams {
  bool hflip = false, vflip = false;
  double degrees = 0.0, shear = 0.0;
};

/// Draw order: horizontal coin, vertical coin, angle, shear; disabled
/// transforms consume nothing.
inline AugmentParams draw_augment(const AugmentSpec& s, Rng& rng) {
  AugmentParams p;
  if (s.horizontal_flip) p.hflip = rng.coin();
  if (s.vertical_flip) p.vflip = rng.coin();
  if (s.rotation_degrees > 0) p.degrees = rng.uniform(-s.rotation_degrees, s.rotation_degrees);
  if (s.shear > 0) p.shear = rng.uniform(-s.shear, s.shear);
  return p;
}

inline Tensor apply_augment(const Tensor& x, const AugmentParams& p) {
  Tensor out = x;
  if (p.hflip) out = flip_horizontal(out);
  if (p.vflip) out = flip_vertical(out);
  if (p.degrees != 0.0 || p.shear != 0.0) out = affine(out, p.degrees, p.shear);
  return out;
}

inline Tensor augment(const Tensor& x, const AugmentSpec& s, Rng& rng) {
  return apply_augment(x, draw_augment(s, rng));
}

}  // namespace pestnet::data
