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

#include <string>

#include "pestnet/data/manifest.hpp"
#include "pestnet/data/transforms.hpp"
#include "pestnet/training.hpp"

namespace pestnet::data {

/// Decoded, cropped and resized RGB image in [0,1], [3,h,w].
inline Tensor load_sample(const Manifest& m, const Sample& s, std::size_t h, std::size_t w) {
  Image img = read_image(m.resolve(s));
  if (img.channels != 3) throw IoError(m.resolve(s) + ": expected an RGB (P6) image");
  if (s.crop) img = crop(img, *s.crop);
  return resize(to_tensor(img), h, w);
}

inline LabeledSet load_split(const Manifest& m, Split split, std::size_t h, std::size_t w) {
  LabeledSet out;
  for (const auto& s : m.samples) {
    if (s.split != split) continue;
    out.images.push_back(load_sample(m, s, h, w));
    out.labels.push_back(s.label);
  }
  return out;
}

inline SampleTransform normalize_transform() {
  return [](const Tensor& x, std::size_t, std::size_t) { return normalize(x); };
}

/// Augment with an RNG keyed by (seed, sample index, epoch), then normalize.
inline SampleTransform augment_transform(const AugmentSpec& spec, std::uint64_t seed) {
  return [spec, seed](const Tensor& x, std::size_t idx, std::size_t epoch) {
    Rng rng = Rng::keyed({seed, idx, epoch});
    return normalize(augment(x, spec, rng));
  };
}

}  // namespace pestnet::data
