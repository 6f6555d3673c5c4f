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
#include <cctype>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pestnet/checkpoint.hpp"
#include "pestnet/tensor.hpp"

namespace pestnet::data {

/// 8-bit image, channel-interleaved rows. channels is 1 (PGM) or 3 (PPM).
struct Image {
  std::size_t width = 0, height = 0, channels = 3;
  std::vector<std::uint8_t> pixels;

  std::uint8_t at(std::size_t c, std::size_t y, std::size_t x) const { return pixels[(y * width + x) * channels + c]; }
};

inline std::string encode_pnm(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw ContractError("encode_pnm: channels must be 1 or 3");
  if (img.pixels.size() != img.width * img.height * img.channels)
    throw ContractError("encode_pnm: pixel count mismatch");
  std::string out =
      (img.channels == 3 ? "P6\n" : "P5\n") + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  out.append(reinterpret_cast<const char*>(img.pixels.data()), img.pixels.size());
  return out;
}

/// Binary P6 or P5 with maxval 255; '#' comments allowed in the header.
inline Image decode_pnm(const std::string& b, const std::string& source = "image") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < b.size()) {
      if (b[pos] == '#') {
        while (pos < b.size() && b[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(b[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&](const char* what) {
    skip_space();
    const std::size_t start = pos;
    std::size_t v = 0;
    while (pos < b.size() && std::isdigit(static_cast<unsigned char>(b[pos]))) {
      v = v * 10 + static_cast<std::size_t>(b[pos] - '0');
      if (v > (1u << 24)) throw ParseError(source, start, std::string(what) + " too large");
      ++pos;
    }
    if (pos == start) throw ParseError(source, start, std::string("expected ") + what);
    return v;
  };
  if (b.size() < 2 || b[0] != 'P' || (b[1] != '6' && b[1] != '5')) {
    throw ParseError(source, 0, "not a binary PPM/PGM (expected P6 or P5)");
  }
  Image img;
  img.channels = b[1] == '6' ? 3 : 1;
  pos = 2;
  img.width = number("width");
  img.height = number("height");
  const std::size_t maxval = number("maxval");
  if (img.width == 0 || img.height == 0) throw ParseError(source, pos, "zero-sized image");
  if (maxval != 255) throw ParseError(source, pos, "only maxval 255 is supported, got " + std::to_string(maxval));
  if (pos >= b.size() || !std::isspace(static_cast<unsigned char>(b[pos]))) {
    throw ParseError(source, pos, "expected whitespace after maxval");
  }
  ++pos;
  const std::size_t n = img.width * img.height * img.channels;
  if (b.size() - pos < n) throw ParseError(source, pos, "truncated pixel data");
  img.pixels.assign(b.begin() + static_cast<std::ptrdiff_t>(pos), b.begin() + static_cast<std::ptrdiff_t>(pos + n));
  return img;
}

inline Image read_image(const std::string& path) { return decode_pnm(read_file(path), path); }
inline void write_image(const std::string& path, const Image& img) { write_file(path, encode_pnm(img)); }

/// [C,H,W] tensor with values byte/255.
inline Tensor to_tensor(const Image& img) {
  std::vector<double> v(img.pixels.size());
  const std::size_t hw = img.width * img.height;
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) v[c * hw + i] = img.pixels[i * img.channels + c] / 255.0;
  }
  return Tensor({img.channels, img.height, img.width}, std::move(v));
}

/// [C,H,W] or [H,W] in [0,1] to bytes via round(255 v), clamped.
inline Image from_tensor(const Tensor& t) {
  Image img;
  if (t.rank() == 2) {
    img.channels = 1;
    img.height = t.dim(0);
    img.width = t.dim(1);
  } else if (t.rank() == 3 && (t.dim(0) == 1 || t.dim(0) == 3)) {
    img.channels = t.dim(0);
    img.height = t.dim(1);
    img.width = t.dim(2);
  } else {
    throw ShapeError("from_tensor", "expected [H,W], [1,H,W] or [3,H,W], got " + shape_str(t.shape()));
  }
  const std::size_t hw = img.width * img.height;
  img.pixels.resize(hw * img.channels);
  for (std::size_t c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = std::round(255.0 * std::clamp(t.values()[c * hw + i], 0.0, 1.0));
      img.pixels[i * img.channels + c] = static_cast<std::uint8_t>(v);
    }
  }
  return img;
}

/// Pixel rectangle [x0,x1) x [y0,y1).
struct CropRect {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool operator==(const CropRect&) const = default;
};

inline Image crop(const Image& img, const CropRect& r) {
  if (r.x1 > img.width || r.y1 > img.height || r.x0 >= r.x1 || r.y0 >= r.y1) {
    throw ContractError("crop: rectangle outside image");
  }
  Image out;
  out.channels = img.channels;
  out.width = r.x1 - r.x0;
  out.height = r.y1 - r.y0;
  out.pixels.reserve(out.width * out.height * out.channels);
  for (std::size_t y = r.y0; y < r.y1; ++y) {
    const auto* row = &img.pixels[(y * img.width + r.x0) * img.channels];
    out.pixels.insert(out.pixels.end(), row, row + out.width * out.channels);
  }
  return out;
}

}  // namespace pestnet::data
