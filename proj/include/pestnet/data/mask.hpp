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
#include <cstdint>
#include <map>
#include <vector>

#include "pestnet/tensor.hpp"

namespace pestnet::data {

/// Binary foreground from a segmentation label map [h*w]: pixels of the
/// most frequent label (ties to the smaller label) versus the rest; the side
/// covering more pixels is kept, and within it only its largest
/// 4-connected component (ties to the first in raster order).
inline std::vector<std::uint8_t> foreground_mask(const std::vector<int>& labels, std::size_t h, std::size_t w) {
  if (labels.size() != h * w || labels.empty())
    throw ShapeError("foreground_mask", "label map size does not match h*w");
  std::map<int, std::size_t> freq;
  for (int l : labels) ++freq[l];
  int modal = freq.begin()->first;
  for (auto& [l, n] : freq) {
    if (n > freq[modal]) modal = l;
  }
  const std::size_t modal_count = freq[modal];
  const bool keep_modal = modal_count >= labels.size() - modal_count;
  std::vector<std::uint8_t> side(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) side[i] = (labels[i] == modal) == keep_modal;

  std::vector<int> comp(labels.size(), -1);
  std::vector<std::size_t> sizes;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < side.size(); ++start) {
    if (!side[start] || comp[start] >= 0) continue;
    const int id = static_cast<int>(sizes.size());
    sizes.push_back(0);
    stack.push_back(start);
    comp[start] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      ++sizes[id];
      const std::size_t y = p / w, x = p % w;
      auto visit = [&](std::size_t q) {
        if (side[q] && comp[q] < 0) {
          comp[q] = id;
          stack.push_back(q);
        }
      };
      if (x > 0) visit(p - 1);
      if (x + 1 < w) visit(p + 1);
      if (y > 0) visit(p - w);
      if (y + 1 < h) visit(p + w);
    }
  }
  std::vector<std::uint8_t> mask(labels.size(), 0);
  if (sizes.empty()) return mask;
  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = comp[i] == best;
  return mask;
}

/// image [C,H,W] times a binary mask [H*W] broadcast over channels.
inline Tensor apply_mask(const Tensor& image, const std::vector<std::uint8_t>& mask) {
  if (image.rank() != 3 || image.dim(1) * image.dim(2) != mask.size()) {
    throw ShapeError("apply_mask", image.shape(), Shape{mask.size()});
  }
  Tensor out = image.clone();
  auto d = out.mutable_data();
  const std::size_t hw = mask.size();
  for (std::size_t c = 0; c < image.dim(0); ++c) {
    for (std::size_t i = 0; i < hw; ++i) {
      if (!mask[i]) d[c * hw + i] = 0.0;
    }
  }
  return out;
}

inline Tensor mask_overlay(const Tensor& image, const std::vector<int>& labels) {
  if (image.rank() != 3) throw ShapeError("mask_overlay", "expected [C,H,W], got " + shape_str(image.shape()));
  return apply_mask(image, foreground_mask(labels, image.dim(1), image.dim(2)));
}

}  // namespace pestnet::data
