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

#include <functional>
#include <set>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "pestnet/checkpoint.hpp"
#include "pestnet/data/manifest.hpp"
#include "pestnet/data/refine.hpp"
#include "pestnet/data/transforms.hpp"
#include "pestnet/format.hpp"
#include "pestnet/models.hpp"
#include "pestnet/training.hpp"

namespace pestnet::config {

struct DataConfig {
  std::string manifest;
  std::string annotations;
  std::string refine = "none";
  double threshold = 0.5;
};

struct AugmentConfig {
  bool enabled = true;
  data::AugmentSpec spec;
};

struct EnsembleConfig {
  std::string mode = "soft";
};

struct RunConfig {
  DataConfig data;
  ModelSpec model;
  TrainConfig train;
  AugmentConfig augment;
  EnsembleConfig ensemble;
};

/// One `section.key` entry with text conversion both ways.
struct Field {
  std::string section, key;
  std::function<bool(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline std::string format_value(double v) { return format_g17(v); }

template <typename T>
bool parse_value(const std::string& s, T& out) {
  if constexpr (std::is_same_v<T, std::string>) {
    out = s;
    return true;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") return out = true, true;
    if (s == "false" || s == "0") return out = false, true;
    return false;
  } else if constexpr (std::is_same_v<T, Arch>) {
    try {
      out = parse_arch(s);
      return true;
    } catch (const ConfigError&) {
      return false;
    }
  } else {
    auto v = data::parse_number<T>(s);
    if (!v) return false;
    out = *v;
    return true;
  }
}

template <typename T>
std::string to_text(const T& v) {
  if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, Arch>) {
    return arch_name(v);
  } else if constexpr (std::is_floating_point_v<T>) {
    return format_value(v);
  } else {
    return std::to_string(v);
  }
}

template <typename Get>
Field make_field(std::string section, std::string key, Get part) {
  return Field{std::move(section), std::move(key),
               [part](RunConfig& c, const std::string& s) { return parse_value(s, part(c)); },
               [part](const RunConfig& c) { return to_text(part(const_cast<RunConfig&>(c))); }};
}

#define PESTNET_FIELD(sec, path, name) make_field(#sec, #name, [](RunConfig& c) -> auto& { return c.path.name; })

inline const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      PESTNET_FIELD(data, data, manifest),
      PESTNET_FIELD(data, data, annotations),
      PESTNET_FIELD(data, data, refine),
      PESTNET_FIELD(data, data, threshold),
      PESTNET_FIELD(model, model, arch),
      PESTNET_FIELD(model, model, num_classes),
      PESTNET_FIELD(model, model, channels),
      PESTNET_FIELD(model, model, height),
      PESTNET_FIELD(model, model, width_px),
      PESTNET_FIELD(model, model, width),
      PESTNET_FIELD(model, model, depth),
      PESTNET_FIELD(model, model, patch),
      PESTNET_FIELD(model, model, d_model),
      PESTNET_FIELD(model, model, heads),
      PESTNET_FIELD(model, model, mlp_ratio),
      PESTNET_FIELD(model, model, cbam),
      PESTNET_FIELD(model, model, reduction),
      PESTNET_FIELD(model, model, branch_a),
      PESTNET_FIELD(model, model, branch_b),
      PESTNET_FIELD(model, model, hidden),
      PESTNET_FIELD(model, model, dropout),
      PESTNET_FIELD(model, model, seed),
      PESTNET_FIELD(train, train, batch_size),
      PESTNET_FIELD(train, train, lr0),
      PESTNET_FIELD(train, train, lr_decay_factor),
      PESTNET_FIELD(train, train, lr_patience_epochs),
      PESTNET_FIELD(train, train, early_stop_patience),
      PESTNET_FIELD(train, train, improvement_threshold),
      PESTNET_FIELD(train, train, min_epochs),
      PESTNET_FIELD(train, train, max_epochs),
      PESTNET_FIELD(train, train, seed),
      PESTNET_FIELD(train, train, beta1),
      PESTNET_FIELD(train, train, beta2),
      PESTNET_FIELD(train, train, adam_epsilon),
      PESTNET_FIELD(train, train, record_train_accuracy),
      PESTNET_FIELD(train, train, workers),
      PESTNET_FIELD(augment, augment, enabled),
      PESTNET_FIELD(augment, augment.spec, horizontal_flip),
      PESTNET_FIELD(augment, augment.spec, vertical_flip),
      PESTNET_FIELD(augment, augment.spec, rotation_degrees),
      PESTNET_FIELD(augment, augment.spec, shear),
      PESTNET_FIELD(augment, augment.spec, apply_to_validation),
      PESTNET_FIELD(ensemble, ensemble, mode),
  };
  return table;
}

#undef PESTNET_FIELD

inline const Field* find_field(const std::string& section, const std::string& key) {
  for (const auto& f : fields()) {
    if (f.section == section && f.key == key) return &f;
  }
  return nullptr;
}

constexpr const char* kSections[] = {"data", "model", "train", "augment", "ensemble"};

inline bool known_section(const std::string& s) {
  for (const char* k : kSections) {
    if (s == k) return true;
  }
  return false;
}

/// Applies `section.key = value`; problems are appended rather than thrown.
inline void assign(RunConfig& c, const std::string& section, const std::string& key, const std::string& value,
                   const std::string& where, std::vector<std::string>& problems) {
  const Field* f = find_field(section, key);
  if (!f) {
    problems.push_back(where + ": unknown key '" + section + "." + key + "'");
  } else if (!f->set(c, value)) {
    problems.push_back(where + ": invalid value '" + value + "' for " + section + "." + key);
  }
}

/// INI text: `[section]`, `key = value`, full-line `#` or `;` comments.
inline void apply_ini(RunConfig& c, const std::string& text, const std::string& source,
                      std::vector<std::string>& problems) {
  std::string section;
  std::set<std::string> seen;
  std::size_t line_no = 0, start = 0;
  while (start <= text.size()) {
    const auto end = std::min(text.find('\n', start), text.size());
    const std::string line = data::trim(std::string_view(text).substr(start, end - start));
    start = end + 1;
    ++line_no;
    const std::string where = source + ":" + std::to_string(line_no);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        problems.push_back(where + ": malformed section header");
        continue;
      }
      section = data::trim(std::string_view(line).substr(1, line.size() - 2));
      if (!known_section(section)) problems.push_back(where + ": unknown section '" + section + "'");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      problems.push_back(where + ": expected key = value");
      continue;
    }
    if (section.empty()) {
      problems.push_back(where + ": key outside a section");
      continue;
    }
    if (!known_section(section)) continue;
    const std::string key = data::trim(std::string_view(line).substr(0, eq));
    const std::string value = data::trim(std::string_view(line).substr(eq + 1));
    if (!seen.insert(section + "." + key).second) {
      problems.push_back(where + ": duplicate key '" + section + "." + key + "'");
      continue;
    }
    assign(c, section, key, value, where, problems);
  }
}

/// Overrides of the form ("train.lr0", "0.01").
using Overrides = std::vector<std::pair<std::string, std::string>>;

inline void apply_overrides(RunConfig& c, const Overrides& o, std::vector<std::string>& problems) {
  for (const auto& [name, value] : o) {
    const auto dot = name.find('.');
    if (dot == std::string::npos) {
      problems.push_back("--" + name + ": expected --section.key");
      continue;
    }
    assign(c, name.substr(0, dot), name.substr(dot + 1), value, "--" + name, problems);
  }
}

inline std::vector<std::string> validate(const RunConfig& c) {
  std::vector<std::string> p = spec_problems(c.model);
  for (auto& s : config_problems(c.train)) p.push_back(s);
  for (auto& s : data::augment_problems(c.augment.spec)) p.push_back(s);
  if (!(c.data.threshold >= 0.0 && c.data.threshold <= 1.0)) p.push_back("data.threshold must be in [0,1]");
  if (c.data.refine != "none") {
    try {
      data::parse_strategy(c.data.refine);
    } catch (const ConfigError& e) {
      p.push_back(std::string("data.refine: ") + e.what());
    }
    if (c.data.annotations.empty()) p.push_back("data.refine needs data.annotations");
  }
  if (c.ensemble.mode != "soft" && c.ensemble.mode != "hard") p.push_back("ensemble.mode must be soft or hard");
  return p;
}

inline std::string join_problems(const std::vector<std::string>& p) {
  std::string out = std::to_string(p.size()) + " configuration problem" + (p.size() == 1 ? "" : "s") + ":";
  for (const auto& s : p) out += "\n  " + s;
  return out;
}

/// Parses `text`, applies overrides, validates, and throws one ConfigError listing every problem.
inline RunConfig resolve(const std::string& text, const std::string& source, const Overrides& overrides = {},
                         RunConfig base = {}) {
  std::vector<std::string> problems;
  apply_ini(base, text, source, problems);
  apply_overrides(base, overrides, problems);
  for (auto& s : validate(base)) problems.push_back(s);
  if (!problems.empty()) throw ConfigError(join_problems(problems));
  return base;
}

inline RunConfig load(const std::string& path, const Overrides& overrides = {}, RunConfig base = {}) {
  return resolve(path.empty() ? std::string() : read_file(path), path.empty() ? "<defaults>" : path, overrides,
                 std::move(base));
}

/// Every key in fixed order, suitable for reparsing.
inline std::string format_config(const RunConfig& c) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      out += (section.empty() ? "[" : "\n[") + f.section + "]\n";
      section = f.section;
    }
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

}  // namespace pestnet::config
