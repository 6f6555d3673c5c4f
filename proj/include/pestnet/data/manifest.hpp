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
#include <charconv>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pestnet/data/image_io.hpp"
#include "pestnet/rng.hpp"

namespace pestnet::data {

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  return std::nullopt;
}

constexpr std::array<Split, 3> kSplits = {Split::Train, Split::Val, Split::Test};

/// Center-normalized box with detector confidence.
struct DetectionBox {
  std::size_t class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;
  double confidence = 1.0;
};

struct Sample {
  std::string path;  // relative to the manifest directory, or absolute
  std::size_t label = 0;
  Split split = Split::Train;
  std::vector<DetectionBox> boxes;
  std::optional<CropRect> crop;
};

struct Manifest {
  std::string base_dir;
  std::vector<Sample> samples;

  std::string resolve(const Sample& s) const {
    const std::filesystem::path p(s.path);
    return p.is_absolute() || base_dir.empty() ? p.string() : (std::filesystem::path(base_dir) / p).string();
  }

  std::size_t count(Split s) const {
    std::size_t n = 0;
    for (auto& x : samples) n += x.split == s;
    return n;
  }

  std::size_t num_classes() const {
    std::size_t k = 0;
    for (auto& x : samples) k = std::max(k, x.label + 1);
    return k;
  }
};

/// Locale-independent number parsing of a whole token.
template <typename T>
std::optional<T> parse_number(std::string_view s) {
  T v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) return std::nullopt;
  return v;
}

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_fields(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto p = line.find(sep, start);
    out.push_back(trim(line.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start)));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

/// CSV with header `path,label,split`; `source` names the text in errors,
/// which carry 1-based line numbers.
inline Manifest parse_manifest(const std::string& text, const std::string& source, std::string base_dir = "") {
  Manifest m;
  m.base_dir = std::move(base_dir);
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    auto f = split_fields(line, ',');
    if (!header) {
      if (f != std::vector<std::string>{"path", "label", "split"}) {
        throw ParseError(source, lineno, "expected header 'path,label,split'");
      }
      header = true;
      continue;
    }
    if (f.size() != 3) throw ParseError(source, lineno, "expected 3 fields, got " + std::to_string(f.size()));
    if (f[0].empty()) throw ParseError(source, lineno, "empty path");
    auto label = parse_number<std::size_t>(f[1]);
    if (!label) throw ParseError(source, lineno, "invalid label '" + f[1] + "'");
    auto split = parse_split(f[2]);
    if (!split) throw ParseError(source, lineno, "unknown split '" + f[2] + "' (expected train, val or test)");
    m.samples.push_back(Sample{f[0], *label, *split, {}, std::nullopt});
  }
  if (!header) throw ParseError(source, 1, "missing header 'path,label,split'");
  return m;
}

/// Reads a manifest; with `verify_images` every referenced image must decode.
inline Manifest load_manifest(const std::string& path, bool verify_images = false) {
  Manifest m = parse_manifest(read_file(path), path, std::filesystem::path(path).parent_path().string());
  if (verify_images) {
    std::vector<std::string> bad;
    for (const auto& s : m.samples) {
      try {
        read_image(m.resolve(s));
      } catch (const Error& e) {
        bad.push_back(e.what());
      }
    }
    if (!bad.empty()) {
      std::string msg = std::to_string(bad.size()) + " unreadable image(s) in " + path + ":";
      for (std::size_t i = 0; i < bad.size() && i < 10; ++i) msg += "\n  " + bad[i];
      throw IoError(msg);
    }
  }
  return m;
}

inline std::string format_manifest(const Manifest& m) {
  std::string out = "path,label,split\n";
  for (const auto& s : m.samples) out += s.path + "," + std::to_string(s.label) + "," + split_name(s.split) + "\n";
  return out;
}

/// Summary line such as "train=60 val=10 test=30 total=100 classes=3".
inline std::string summarize(const Manifest& m) {
  return "train=" + std::to_string(m.count(Split::Train)) + " val=" + std::to_string(m.count(Split::Val)) +
         " test=" + std::to_string(m.count(Split::Test)) + " total=" + std::to_string(m.samples.size()) +
         " classes=" + std::to_string(m.num_classes());
}

/// Per-split target counts for `n` samples: val = floor(n rv / R), test =
/// floor(n rt / R), train takes the remainder.
inline std::array<std::size_t, 3> split_targets(std::size_t n, const std::array<double, 3>& ratios) {
  for (double r : ratios) {
    if (!(r >= 0.0)) throw ConfigError("split: ratios must be non-negative");
  }
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (!(total > 0.0)) throw ConfigError("split: ratios must not all be zero");
  const auto part = [&](double r) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r / total + 1e-9));
  };
  const std::size_t val = part(ratios[1]), test = part(ratios[2]);
  return {n - val - test, val, test};
}

/// Stratified split. Global val/test targets follow `split_targets`; they
/// are apportioned to classes by largest remainder of n_c * r (ties to the
/// lower class). Each class is shuffled with `seed` and assigned
/// contiguously: train, then val, then test.
inline std::vector<Sample> split_dataset(std::vector<Sample> samples, const std::array<double, 3>& ratios,
                                         std::uint64_t seed) {
  const auto global = split_targets(samples.size(), ratios);
  const double total = ratios[0] + ratios[1] + ratios[2];
  std::map<std::size_t, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < samples.size(); ++i) by_class[samples[i].label].push_back(i);
  std::vector<std::size_t> classes;
  for (auto& [c, v] : by_class) classes.push_back(c);

  std::vector<std::array<std::size_t, 3>> quota(classes.size(), {0, 0, 0});
  std::vector<std::size_t> room(classes.size());
  for (std::size_t k = 0; k < classes.size(); ++k) room[k] = by_class[classes[k]].size();
  for (std::size_t s : {1u, 2u}) {
    const double r = ratios[s] / total;
    std::vector<double> frac(classes.size());
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < classes.size(); ++k) {
      const double ideal = static_cast<double>(by_class[classes[k]].size()) * r;
      std::size_t q = static_cast<std::size_t>(std::floor(ideal + 1e-9));
      q = std::min(q, room[k]);
      quota[k][s] = q;
      frac[k] = ideal - static_cast<double>(q);
      assigned += q;
    }
    std::vector<std::size_t> order(classes.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
    while (assigned < global[s]) {
      bool progressed = false;
      for (std::size_t k : order) {
        if (assigned == global[s]) break;
        if (quota[k][s] < room[k]) {
          ++quota[k][s];
          ++assigned;
          progressed = true;
        }
      }
      if (!progressed) break;
    }
    for (std::size_t k = 0; k < classes.size(); ++k) room[k] -= quota[k][s];
  }

  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(samples.size());
  for (std::size_t k = 0; k < classes.size(); ++k) {
    auto idx = by_class[classes[k]];
    rng.shuffle(idx);
    const std::size_t n_train = idx.size() - quota[k][1] - quota[k][2];
    for (std::size_t j = 0; j < idx.size(); ++j) {
      Sample s = samples[idx[j]];
      s.split = j < n_train ? Split::Train : (j < n_train + quota[k][1] ? Split::Val : Split::Test);
      out.push_back(std::move(s));
    }
  }
  return out;
}

/// Boxes from `<ann_dir>/<image stem>.txt`, one `class cx cy w h [conf]` per
/// line. A missing file means no detections.
inline std::vector<DetectionBox> parse_annotations(const std::string& text, const std::string& source) {
  std::vector<DetectionBox> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::vector<std::string> f;
    std::istringstream ls(t);
    for (std::string tok; ls >> tok;) f.push_back(tok);
    if (f.size() != 5 && f.size() != 6) throw ParseError(source, lineno, "expected 'class cx cy w h [confidence]'");
    DetectionBox b;
    auto cls = parse_number<std::size_t>(f[0]);
    if (!cls) throw ParseError(source, lineno, "invalid class id '" + f[0] + "'");
    b.class_id = *cls;
    double* dst[] = {&b.cx, &b.cy, &b.w, &b.h, &b.confidence};
    for (std::size_t i = 1; i < f.size(); ++i) {
      auto v = parse_number<double>(f[i]);
      if (!v || !(*v >= 0.0 && *v <= 1.0)) throw ParseError(source, lineno, "value '" + f[i] + "' not in [0,1]");
      *dst[i - 1] = *v;
    }
    out.push_back(b);
  }
  return out;
}

inline void attach_annotations(Manifest& m, const std::string& ann_dir) {
  for (auto& s : m.samples) {
    const auto p = std::filesystem::path(ann_dir) / (std::filesystem::path(s.path).stem().string() + ".txt");
    s.boxes.clear();
    if (std::filesystem::exists(p)) s.boxes = parse_annotations(read_file(p.string()), p.string());
  }
}

}  // namespace pestnet::data
