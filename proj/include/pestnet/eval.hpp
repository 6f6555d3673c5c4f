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
#include <cmath>
#include <string>
#include <vector>

#include "json.hpp"
#include "pestnet/data/manifest.hpp"
#include "pestnet/error.hpp"
#include "pestnet/format.hpp"

namespace pestnet::eval {

/// Per-sample probability rows of one model.
using Rows = std::vector<std::vector<double>>;

inline void check_rows(const Rows& rows, const std::string& what) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double s = 0;
    for (double v : rows[i]) {
      if (!(v >= 0.0 && v <= 1.0))
        throw DomainError(what + ": row " + std::to_string(i) + " has an entry outside [0,1]");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-9) throw DomainError(what + ": row " + std::to_string(i) + " does not sum to 1");
  }
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax(const std::vector<double>& row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

struct Vote {
  Rows probs;
  std::vector<std::size_t> labels;
};

/// Mean of the models' probabilities. Values are summed in sorted order so the result
/// does not depend on model order; identical values are returned unchanged.
inline Vote soft_vote(const std::vector<Rows>& models) {
  if (models.empty()) throw ConfigError("soft_vote: no models");
  const std::size_t n = models[0].size();
  const std::size_t k = n ? models[0][0].size() : 0;
  for (std::size_t i = 0; i < models.size(); ++i) {
    if (models[i].size() != n) {
      throw ShapeError("soft_vote", "model " + std::to_string(i) + " has " + std::to_string(models[i].size()) +
                                        " samples, expected " + std::to_string(n));
    }
    for (const auto& row : models[i]) {
      if (row.size() != k)
        throw ShapeError("soft_vote", "model " + std::to_string(i) + " has a row of width " +
                                          std::to_string(row.size()) + ", expected " + std::to_string(k));
    }
    check_rows(models[i], "soft_vote: model " + std::to_string(i));
  }
  Vote out;
  out.probs.assign(n, std::vector<double>(k));
  std::vector<double> col(models.size());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < k; ++j) {
      for (std::size_t i = 0; i < models.size(); ++i) col[i] = models[i][s][j];
      std::sort(col.begin(), col.end());
      if (col.front() == col.back()) {
        out.probs[s][j] = col.front();
        continue;
      }
      double sum = 0;
      for (double v : col) sum += v;
      out.probs[s][j] = sum / static_cast<double>(col.size());
    }
    out.labels.push_back(argmax(out.probs[s]));
  }
  return out;
}

/// Majority label per sample; ties go to the lowest class index.
inline std::vector<std::size_t> hard_vote(const std::vector<std::vector<std::size_t>>& labels, std::size_t k) {
  if (labels.empty()) throw ConfigError("hard_vote: no models");
  const std::size_t n = labels[0].size();
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i].size() != n) {
      throw ShapeError("hard_vote", "model " + std::to_string(i) + " has " + std::to_string(labels[i].size()) +
                                        " samples, expected " + std::to_string(n));
    }
    for (std::size_t l : labels[i]) {
      if (l >= k) throw DomainError("hard_vote: label " + std::to_string(l) + " outside [0," + std::to_string(k) + ")");
    }
  }
  std::vector<std::size_t> out(n);
  std::vector<std::size_t> votes(k);
  for (std::size_t s = 0; s < n; ++s) {
    std::fill(votes.begin(), votes.end(), 0);
    for (const auto& m : labels) ++votes[m[s]];
    out[s] = static_cast<std::size_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return out;
}

/// counts[t * K + p] = samples of true class t predicted as p.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;

  std::size_t at(std::size_t t, std::size_t p) const { return counts[t * classes + p]; }
  std::size_t total() const {
    std::size_t s = 0;
    for (auto c : counts) s += c;
    return s;
  }
};

inline ConfusionMatrix confusion(const std::vector<std::size_t>& truth, const std::vector<std::size_t>& pred,
                                 std::size_t k) {
  if (truth.size() != pred.size()) {
    throw ShapeError("confusion",
                     std::to_string(truth.size()) + " truths vs " + std::to_string(pred.size()) + " predictions");
  }
  ConfusionMatrix cm{k, std::vector<std::size_t>(k * k, 0)};
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= k || pred[i] >= k) {
      throw DomainError("confusion: label outside [0," + std::to_string(k) + ") at sample " + std::to_string(i));
    }
    ++cm.counts[truth[i] * k + pred[i]];
  }
  return cm;
}

struct ClassStats {
  double precision = 0, recall = 0, f1 = 0;
  std::size_t support = 0;
};

struct Report {
  double accuracy = 0;
  std::vector<ClassStats> per_class;
  double macro_precision = 0, macro_recall = 0, macro_f1 = 0;
};

/// Zero denominators give 0 for that statistic.
inline Report metrics(const ConfusionMatrix& cm) {
  const std::size_t k = cm.classes, total = cm.total();
  if (k == 0 || total == 0) throw DomainError("metrics: empty confusion matrix");
  Report r;
  std::size_t trace = 0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t row = 0, col = 0;
    for (std::size_t j = 0; j < k; ++j) {
      row += cm.at(c, j);
      col += cm.at(j, c);
    }
    const std::size_t tp = cm.at(c, c);
    trace += tp;
    ClassStats s;
    s.support = row;
    s.recall = row ? static_cast<double>(tp) / static_cast<double>(row) : 0.0;
    s.precision = col ? static_cast<double>(tp) / static_cast<double>(col) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    r.macro_precision += s.precision;
    r.macro_recall += s.recall;
    r.macro_f1 += s.f1;
    r.per_class.push_back(s);
  }
  r.accuracy = static_cast<double>(trace) / static_cast<double>(total);
  r.macro_precision /= static_cast<double>(k);
  r.macro_recall /= static_cast<double>(k);
  r.macro_f1 /= static_cast<double>(k);
  return r;
}

inline nlohmann::ordered_json report_json(const Report& r, const ConfusionMatrix& cm) {
  nlohmann::ordered_json j;
  j["accuracy"] = r.accuracy;
  j["accuracy_percent"] = r.accuracy * 100.0;
  j["macro_precision"] = r.macro_precision;
  j["macro_recall"] = r.macro_recall;
  j["macro_f1"] = r.macro_f1;
  auto per = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    const auto& s = r.per_class[c];
    per.push_back(
        {{"class", c}, {"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}});
  }
  j["per_class"] = per;
  j["confusion_matrix"] = cm.counts;
  return j;
}

/// Prediction file `sample_id,p_0,...,p_{K-1}`.
struct Predictions {
  std::vector<std::string> ids;
  Rows probs;
};

inline std::string format_predictions(const Predictions& p) {
  const std::size_t k = p.probs.empty() ? 0 : p.probs[0].size();
  std::string out = "sample_id";
  for (std::size_t j = 0; j < k; ++j) out += ",p_" + std::to_string(j);
  out += '\n';
  for (std::size_t i = 0; i < p.ids.size(); ++i) {
    out += p.ids[i];
    for (double v : p.probs[i]) out += "," + format_g17(v);
    out += '\n';
  }
  return out;
}

inline std::vector<std::string> csv_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      lines.push_back(data::trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!data::trim(cur).empty()) lines.push_back(data::trim(cur));
  return lines;
}

inline Predictions parse_predictions(const std::string& text, const std::string& source) {
  const auto lines = csv_lines(text);
  if (lines.empty()) throw ParseError(source, 1, "empty prediction file");
  const auto header = data::split_fields(lines[0], ',');
  if (header.size() < 2 || header[0] != "sample_id") throw ParseError(source, 1, "header must be sample_id,p_0,...");
  for (std::size_t j = 1; j < header.size(); ++j) {
    if (header[j] != "p_" + std::to_string(j - 1)) throw ParseError(source, 1, "unexpected column '" + header[j] + "'");
  }
  const std::size_t k = header.size() - 1;
  Predictions p;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = data::split_fields(lines[i], ',');
    if (f.size() != k + 1) {
      throw ParseError(source, i + 1, "expected " + std::to_string(k + 1) + " fields, got " + std::to_string(f.size()));
    }
    std::vector<double> row;
    for (std::size_t j = 1; j <= k; ++j) {
      auto v = data::parse_number<double>(f[j]);
      if (!v) throw ParseError(source, i + 1, "bad probability '" + f[j] + "'");
      row.push_back(*v);
    }
    p.ids.push_back(f[0]);
    p.probs.push_back(std::move(row));
  }
  try {
    check_rows(p.probs, source);
  } catch (const DomainError& e) {
    throw ParseError(source, 0, e.what());
  }
  return p;
}

/// Truth file `sample_id,label`.
struct Truth {
  std::vector<std::string> ids;
  std::vector<std::size_t> labels;
};

inline std::string format_truth(const Truth& t) {
  std::string out = "sample_id,label\n";
  for (std::size_t i = 0; i < t.ids.size(); ++i) out += t.ids[i] + "," + std::to_string(t.labels[i]) + "\n";
  return out;
}

inline Truth parse_truth(const std::string& text, const std::string& source) {
  const auto lines = csv_lines(text);
  if (lines.empty() || lines[0] != "sample_id,label") throw ParseError(source, 1, "header must be sample_id,label");
  Truth t;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    const auto f = data::split_fields(lines[i], ',');
    auto v = f.size() == 2 ? data::parse_number<std::size_t>(f[1]) : std::nullopt;
    if (!v) throw ParseError(source, i + 1, "expected sample_id,label");
    t.ids.push_back(f[0]);
    t.labels.push_back(*v);
  }
  return t;
}

/// Checks every file lists the same samples in the same order as `ref`.
inline void check_aligned(const std::vector<std::string>& ref, const std::vector<std::string>& ids,
                          const std::string& source) {
  if (ids.size() != ref.size()) {
    throw ShapeError("ensemble",
                     source + " has " + std::to_string(ids.size()) + " rows, expected " + std::to_string(ref.size()));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != ref[i])
      throw ShapeError("ensemble",
                       source + " row " + std::to_string(i + 2) + " is '" + ids[i] + "', expected '" + ref[i] + "'");
  }
}

}  // namespace pestnet::eval
