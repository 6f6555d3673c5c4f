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

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "pestnet/checkpoint.hpp"
#include "pestnet/format.hpp"
#include "pestnet/models.hpp"

namespace pestnet {

struct TrainConfig {
  std::size_t batch_size = 32;
  double lr0 = 0.001;
  double lr_decay_factor = 0.1;
  std::size_t lr_patience_epochs = 7;
  std::size_t early_stop_patience = 10;
  double improvement_threshold = 1e-4;
  std::size_t min_epochs = 25;
  std::size_t max_epochs = 100;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  bool record_train_accuracy = false;
  std::size_t workers = 1;
};

inline std::vector<std::string> config_problems(const TrainConfig& c) {
  std::vector<std::string> p;
  auto need = [&](bool ok, const std::string& what) {
    if (!ok) p.push_back(what);
  };
  need(c.batch_size >= 2, "train.batch_size must be >= 2");
  need(c.lr0 > 0.0, "train.lr0 must be positive");
  need(c.lr_decay_factor > 0.0 && c.lr_decay_factor < 1.0, "train.lr_decay_factor must be in (0,1)");
  need(c.lr_patience_epochs >= 1, "train.lr_patience_epochs must be >= 1");
  need(c.early_stop_patience >= 1, "train.early_stop_patience must be >= 1");
  need(c.improvement_threshold > 0.0, "train.improvement_threshold must be positive");
  need(c.max_epochs >= 1, "train.max_epochs must be >= 1");
  need(c.beta1 >= 0.0 && c.beta1 < 1.0 && c.beta2 >= 0.0 && c.beta2 < 1.0, "train.beta1/beta2 must be in [0,1)");
  need(c.adam_epsilon > 0.0, "train.adam_epsilon must be positive");
  need(c.workers >= 1, "train.workers must be >= 1");
  return p;
}

/// Mean over rows of -log Q[i, label_i] for probability rows Q [n,K].
inline Tensor cross_entropy(const Tensor& q, const std::vector<std::size_t>& labels) {
  if (q.rank() != 2) throw ShapeError("cross_entropy", "probabilities must be [n,K], got " + shape_str(q.shape()));
  const std::size_t n = q.dim(0), k = q.dim(1);
  if (labels.size() != n) throw ShapeError("cross_entropy", q.shape(), Shape{labels.size()});
  const auto& qv = q.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= k) {
      throw DomainError("cross_entropy: label " + std::to_string(labels[i]) + " out of range [0," + std::to_string(k) +
                        ")");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double v = qv[i * k + j];
      if (!(v >= 0.0 && v <= 1.0)) throw DomainError("cross_entropy: probability outside [0,1]");
      z += v;
    }
    if (std::abs(z - 1.0) > 1e-9) {
      throw DomainError("cross_entropy: row " + std::to_string(i) + " sums to " + std::to_string(z));
    }
    const double p = qv[i * k + labels[i]];
    if (p <= 0.0) throw DomainError("cross_entropy: zero probability on the true label");
    loss -= std::log(p);
  }
  loss /= static_cast<double>(n);
  return make_result(
      {}, {loss}, {q},
      [n, k, labels](detail::Node& self) {
        double* g = grad_sink(self.parents[0]);
        if (!g) return;
        const auto& qv = self.parents[0]->data;
        for (std::size_t i = 0; i < n; ++i) {
          g[i * k + labels[i]] -= self.grad[0] / (static_cast<double>(n) * qv[i * k + labels[i]]);
        }
      },
      "cross_entropy");
}

/// Adam with bias correction. Moments are keyed by parameter name; only
/// parameters with requires_grad are updated.
class Adam {
 public:
  struct Moments {
    Shape shape;
    std::vector<double> m, v;
  };

  Adam(double beta1 = 0.9, double beta2 = 0.999, double epsilon = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(epsilon) {}

  void step(const Module& model, double lr) {
    ++steps;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps));
    for (auto& [name, p] : model.named_parameters()) {
      if (!p.requires_grad()) continue;
      auto it = moments.find(name);
      if (it == moments.end()) {
        it = moments
                 .emplace(name,
                          Moments{p.shape(), std::vector<double>(p.numel(), 0.0), std::vector<double>(p.numel(), 0.0)})
                 .first;
      } else if (it->second.shape != p.shape()) {
        throw ShapeError("adam_step(" + name + ")", it->second.shape, p.shape());
      }
      auto& mo = it->second;
      auto data = p.mutable_data();
      const auto g = p.grad();
      if (g.empty()) continue;
      for (std::size_t i = 0; i < data.size(); ++i) {
        mo.m[i] = beta1_ * mo.m[i] + (1.0 - beta1_) * g[i];
        mo.v[i] = beta2_ * mo.v[i] + (1.0 - beta2_) * g[i] * g[i];
        const double mhat = mo.m[i] / c1;
        const double vhat = mo.v[i] / c2;
        data[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  std::uint64_t steps = 0;
  std::map<std::string, Moments> moments;

 private:
  double beta1_, beta2_, eps_;
};

/// metric > best + threshold.
inline bool improves(double metric, double best, double threshold) { return metric > best + threshold; }

/// Decay the learning rate by `factor` after `patience` consecutive
/// non-improving epochs; the counter resets on improvement and on decay.
struct PlateauSchedule {
  double lr0 = 0.001, factor = 0.1, threshold = 1e-4;
  std::size_t patience = 7;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  std::size_t decays = 0;

  static PlateauSchedule from(const TrainConfig& c) {
    PlateauSchedule s;
    s.lr0 = c.lr0;
    s.factor = c.lr_decay_factor;
    s.threshold = c.improvement_threshold;
    s.patience = c.lr_patience_epochs;
    return s;
  }

  double lr() const { return lr0 * std::pow(factor, static_cast<double>(decays)); }

  /// Returns true when this call decayed the rate.
  bool update(double metric) {
    if (improves(metric, best, threshold)) {
      best = metric;
      stale = 0;
      return false;
    }
    if (++stale >= patience) {
      ++decays;
      stale = 0;
      return true;
    }
    return false;
  }
};

/// Stop after `patience` consecutive non-improving epochs once at least
/// `min_epochs` have completed, or unconditionally at `max_epochs`.
struct EarlyStopping {
  double threshold = 1e-4;
  std::size_t patience = 10, min_epochs = 25, max_epochs = 100;
  double best = -std::numeric_limits<double>::infinity();
  std::size_t stale = 0;

  static EarlyStopping from(const TrainConfig& c) {
    EarlyStopping e;
    e.threshold = c.improvement_threshold;
    e.patience = c.early_stop_patience;
    e.min_epochs = c.min_epochs;
    e.max_epochs = c.max_epochs;
    return e;
  }

  /// `epochs_done` counts the epoch just finished. Returns true to stop.
  bool update(std::size_t epochs_done, double metric) {
    if (improves(metric, best, threshold)) {
      best = metric;
      stale = 0;
    } else {
      ++stale;
    }
    if (epochs_done >= max_epochs) return true;
    return stale >= patience && epochs_done >= min_epochs;
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
  double train_accuracy = std::numeric_limits<double>::quiet_NaN();
};

struct TrainState {
  std::size_t epoch = 0;  // completed epochs
  Adam adam;
  PlateauSchedule schedule;
  EarlyStopping stopper;
  double best_val_accuracy = -1.0;
  std::size_t best_epoch = 0;
  bool stopped = false;
  Rng rng;
  std::vector<EpochRecord> history;
};

inline TrainState initial_state(const TrainConfig& c) {
  TrainState s;
  s.adam = Adam(c.beta1, c.beta2, c.adam_epsilon);
  s.schedule = PlateauSchedule::from(c);
  s.stopper = EarlyStopping::from(c);
  s.rng = Rng(c.seed);
  return s;
}

/// Images [C,H,W] with class labels.
struct LabeledSet {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;
  std::size_t size() const { return images.size(); }
};

/// Per-sample transform given (image, sample index, epoch).
using SampleTransform = std::function<Tensor(const Tensor&, std::size_t, std::size_t)>;

struct TrainData {
  LabeledSet train, val;
  SampleTransform train_transform;  // empty: identity
  SampleTransform val_transform;
  SampleTransform eval_transform;  // deterministic transform for train accuracy
};

/// Stacks `set.images[idx[i]]` into [n,C,H,W], transforming each sample on
/// `workers` threads. Output is independent of the worker count.
inline Tensor assemble_batch(const LabeledSet& set, const std::vector<std::size_t>& idx, const SampleTransform& tf,
                             std::size_t epoch, std::size_t workers = 1) {
  const Shape s = set.images.at(idx.at(0)).shape();
  const std::size_t per = numel_of(s);
  std::vector<double> out(idx.size() * per);
  auto fill = [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const Tensor& src = set.images[idx[i]];
      Tensor img = tf ? tf(src, idx[i], epoch) : src;
      if (img.shape() != s) throw ShapeError("assemble_batch", img.shape(), s);
      std::copy(img.values().begin(), img.values().end(), out.begin() + static_cast<std::ptrdiff_t>(i * per));
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, idx.size()));
  if (workers == 1) {
    fill(0, idx.size());
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    const std::size_t chunk = (idx.size() + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          fill(w * chunk, std::min(idx.size(), (w + 1) * chunk));
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  Shape shape{idx.size()};
  shape.insert(shape.end(), s.begin(), s.end());
  return Tensor(std::move(shape), std::move(out));
}

/// Index batches of `size`; a trailing batch of one sample is merged into
/// the previous batch so batch statistics stay defined.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += size) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + size)));
  }
  if (out.size() > 1 && out.back().size() == 1) {
    out[out.size() - 2].push_back(out.back()[0]);
    out.pop_back();
  }
  return out;
}

/// Index of the largest entry, ties to the lowest index.
inline std::size_t argmax_row(const double* row, std::size_t k) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j) {
    if (row[j] > row[best]) best = j;
  }
  return best;
}

/// Evaluation-mode class probabilities [n,K] for a whole set.
inline Tensor predict(Model& model, const LabeledSet& set, std::size_t batch_size, const SampleTransform& tf = {},
                      std::size_t epoch = 0, std::size_t workers = 1) {
  const nn::Mode saved = model.mode();
  model.set_mode(nn::Mode::Evaluation);
  NoGradGuard guard;
  std::vector<std::size_t> order(set.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> probs;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(i),
                                 order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
    Tensor p = softmax(model.forward(assemble_batch(set, idx, tf, epoch, workers)), 1);
    probs.insert(probs.end(), p.values().begin(), p.values().end());
  }
  model.set_mode(saved);
  return Tensor({set.size(), model.num_classes()}, std::move(probs));
}

inline double accuracy_of(const Tensor& probs, const std::vector<std::size_t>& labels) {
  const std::size_t n = probs.dim(0), k = probs.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += argmax_row(&probs.values()[i * k], k) == labels[i];
  return static_cast<double>(correct) / static_cast<double>(n);
}

// Checkpoint mapping.

namespace detail {

inline Record scalar_record(std::string name, double v) { return Record{std::move(name), {1}, {v}}; }

inline Record tensor_record(std::string name, const Tensor& t) {
  return Record{std::move(name), t.shape(), t.values()};
}

inline double scalar_of(const Section& s, const std::string& name, const std::string& src) {
  const Record& r = find_record(s, name, src);
  if (r.values.size() != 1) throw ParseError(src, r.offset, "record '" + name + "' is not a scalar");
  return r.values[0];
}

inline std::size_t count_of(const Section& s, const std::string& name, const std::string& src) {
  const double v = scalar_of(s, name, src);
  if (!(v >= 0.0 && v <= 9007199254740992.0) || v != std::floor(v)) {
    throw ParseError(src, find_record(s, name, src).offset, "record '" + name + "' is not a count");
  }
  return static_cast<std::size_t>(v);
}

inline std::vector<std::uint64_t> words_of(const Record& r, const std::string& src) {
  for (double v : r.values) {
    if (!(v >= 0.0 && v <= 4294967295.0) || v != std::floor(v)) {
      throw ParseError(src, r.offset, "record '" + r.name + "' is not a 32-bit word array");
    }
  }
  if (r.values.size() % 2 != 0) throw ParseError(src, r.offset, "record '" + r.name + "' has odd word count");
  return values_to_words(r.values);
}

inline void put_spec(Section& s, const ModelSpec& m) {
  auto put = [&](const char* k, double v) { s.push_back(scalar_record(std::string("spec.") + k, v)); };
  put("arch", static_cast<double>(m.arch));
  put("num_classes", static_cast<double>(m.num_classes));
  put("channels", static_cast<double>(m.channels));
  put("height", static_cast<double>(m.height));
  put("width_px", static_cast<double>(m.width_px));
  put("width", static_cast<double>(m.width));
  put("depth", static_cast<double>(m.depth));
  put("patch", static_cast<double>(m.patch));
  put("d_model", static_cast<double>(m.d_model));
  put("heads", static_cast<double>(m.heads));
  put("mlp_ratio", static_cast<double>(m.mlp_ratio));
  put("cbam", m.cbam ? 1.0 : 0.0);
  put("reduction", static_cast<double>(m.reduction));
  put("branch_a", static_cast<double>(m.branch_a));
  put("branch_b", static_cast<double>(m.branch_b));
  put("hidden", static_cast<double>(m.hidden));
  put("dropout", m.dropout);
  s.push_back(Record{"spec.seed", {2}, words_to_values({m.seed})});
}

inline ModelSpec get_spec(const Section& s, const std::string& src) {
  ModelSpec m;
  auto n = [&](const char* k) { return count_of(s, std::string("spec.") + k, src); };
  auto arch = [&](const char* k) {
    const std::size_t v = n(k);
    if (v > static_cast<std::size_t>(Arch::Fusion)) {
      throw ParseError(src, find_record(s, std::string("spec.") + k, src).offset, "unknown architecture code");
    }
    return static_cast<Arch>(v);
  };
  m.arch = arch("arch");
  m.num_classes = n("num_classes");
  m.channels = n("channels");
  m.height = n("height");
  m.width_px = n("width_px");
  m.width = n("width");
  m.depth = n("depth");
  m.patch = n("patch");
  m.d_model = n("d_model");
  m.heads = n("heads");
  m.mlp_ratio = n("mlp_ratio");
  m.cbam = n("cbam") != 0;
  m.reduction = n("reduction");
  m.branch_a = arch("branch_a");
  m.branch_b = arch("branch_b");
  m.hidden = n("hidden");
  m.dropout = scalar_of(s, "spec.dropout", src);
  const auto seed = words_of(find_record(s, "spec.seed", src), src);
  if (seed.size() != 1) throw ParseError(src, find_record(s, "spec.seed", src).offset, "bad seed record");
  m.seed = seed[0];
  return m;
}

}  // namespace detail

/// Full snapshot of model parameters, buffers and RNGs plus trainer state.
inline Checkpoint make_checkpoint(Model& model, ModelSpec spec, const TrainState& st) {
  using detail::scalar_record;
  spec.num_classes = model.num_classes();
  Checkpoint c;
  std::vector<double> trainable;
  for (auto& [name, t] : model.named_parameters()) {
    c.tensors.push_back(detail::tensor_record(name, t));
    trainable.push_back(t.requires_grad() ? 1.0 : 0.0);
  }
  for (auto& [name, t] : model.named_buffers()) c.tensors.push_back(detail::tensor_record(name, t));

  c.optimizer.push_back(scalar_record("adam.steps", static_cast<double>(st.adam.steps)));
  for (auto& [name, mo] : st.adam.moments) {
    c.optimizer.push_back(Record{"adam.m." + name, mo.shape, mo.m});
    c.optimizer.push_back(Record{"adam.v." + name, mo.shape, mo.v});
  }

  auto& k = c.counters;
  k.push_back(scalar_record("epoch", static_cast<double>(st.epoch)));
  k.push_back(scalar_record("best_val_accuracy", st.best_val_accuracy));
  k.push_back(scalar_record("best_epoch", static_cast<double>(st.best_epoch)));
  k.push_back(scalar_record("stopped", st.stopped ? 1.0 : 0.0));
  k.push_back(scalar_record("schedule.best", st.schedule.best));
  k.push_back(scalar_record("schedule.stale", static_cast<double>(st.schedule.stale)));
  k.push_back(scalar_record("schedule.decays", static_cast<double>(st.schedule.decays)));
  k.push_back(scalar_record("stop.best", st.stopper.best));
  k.push_back(scalar_record("stop.stale", static_cast<double>(st.stopper.stale)));
  if (!st.history.empty()) {
    std::vector<double> h;
    for (auto& e : st.history) {
      h.insert(h.end(), {static_cast<double>(e.epoch), e.train_loss, e.val_accuracy, e.lr, e.train_accuracy});
    }
    k.push_back(Record{"history", {st.history.size(), 5}, std::move(h)});
  }
  if (!trainable.empty()) k.push_back(Record{"model.trainable", {trainable.size()}, std::move(trainable)});
  detail::put_spec(k, spec);

  auto words = words_to_values(st.rng.state());
  c.rng.push_back(Record{"trainer", {words.size()}, words});
  for (auto& [name, r] : model.named_rngs()) {
    auto v = words_to_values(r->state());
    c.rng.push_back(Record{"module." + name, {v.size()}, v});
  }
  return c;
}

struct Restored {
  ModelSpec spec;
  std::shared_ptr<Model> model;
  TrainState state;
};

/// Rebuilds the model from the stored spec and restores every record.
/// Schedule and stopping thresholds come from `config`.
inline Restored restore_checkpoint(const Checkpoint& c, const TrainConfig& config,
                                   const std::string& src = "checkpoint") {
  Restored out;
  out.spec = detail::get_spec(c.counters, src);
  try {
    out.model = build_model(out.spec);
  } catch (const Error& e) {
    throw ParseError(src, 0, std::string("stored model spec is invalid: ") + e.what());
  }
  Model& m = *out.model;
  std::size_t seen = 0;
  auto load = [&](const nn::Module::Named& named) {
    for (auto& [name, t] : named) {
      const Record& r = find_record(c.tensors, name, src);
      if (r.shape != t.shape()) {
        throw ParseError(
            src, r.offset,
            "record '" + name + "' has shape " + shape_str(r.shape) + ", model expects " + shape_str(t.shape()));
      }
      Tensor h = t;
      std::copy(r.values.begin(), r.values.end(), h.mutable_data().begin());
      ++seen;
    }
  };
  const auto params = m.named_parameters();
  load(params);
  load(m.named_buffers());
  if (seen != c.tensors.size()) throw ParseError(src, 0, "checkpoint has tensors the model does not define");

  auto it =
      std::find_if(c.counters.begin(), c.counters.end(), [](const Record& r) { return r.name == "model.trainable"; });
  if (it != c.counters.end()) {
    if (it->values.size() != params.size()) throw ParseError(src, it->offset, "trainable mask size mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) Tensor(params[i].second).set_requires_grad(it->values[i] != 0.0);
  }

  TrainState& st = out.state;
  st = initial_state(config);
  st.adam.steps = detail::count_of(c.optimizer, "adam.steps", src);
  for (const auto& r : c.optimizer) {
    if (r.name.rfind("adam.m.", 0) != 0) continue;
    const std::string name = r.name.substr(7);
    const Record& v = find_record(c.optimizer, "adam.v." + name, src);
    if (v.shape != r.shape) throw ParseError(src, v.offset, "moment shapes disagree for '" + name + "'");
    st.adam.moments[name] = Adam::Moments{r.shape, r.values, v.values};
  }

  const Section& k = c.counters;
  st.epoch = detail::count_of(k, "epoch", src);
  st.best_val_accuracy = detail::scalar_of(k, "best_val_accuracy", src);
  st.best_epoch = detail::count_of(k, "best_epoch", src);
  st.stopped = detail::count_of(k, "stopped", src) != 0;
  st.schedule.best = detail::scalar_of(k, "schedule.best", src);
  st.schedule.stale = detail::count_of(k, "schedule.stale", src);
  st.schedule.decays = detail::count_of(k, "schedule.decays", src);
  st.stopper.best = detail::scalar_of(k, "stop.best", src);
  st.stopper.stale = detail::count_of(k, "stop.stale", src);
  auto h = std::find_if(k.begin(), k.end(), [](const Record& r) { return r.name == "history"; });
  if (h != k.end()) {
    if (h->shape.size() != 2 || h->shape[1] != 5) throw ParseError(src, h->offset, "history must be [E,5]");
    for (std::size_t i = 0; i < h->shape[0]; ++i) {
      const double* row = &h->values[i * 5];
      st.history.push_back({static_cast<std::size_t>(row[0]), row[1], row[2], row[3], row[4]});
    }
  }
  if (st.history.size() != st.epoch) throw ParseError(src, 0, "history length does not match epoch counter");

  try {
    st.rng.set_state(detail::words_of(find_record(c.rng, "trainer", src), src));
    for (auto& [name, r] : m.named_rngs()) {
      const Record& rec = find_record(c.rng, "module." + name, src);
      r->set_state(detail::words_of(rec, src));
    }
  } catch (const ContractError& e) {
    throw ParseError(src, 0, e.what());
  }
  return out;
}

/// Writes the metric trace as CSV: epoch,train_loss,val_accuracy,lr.
inline std::string metrics_csv(const std::vector<EpochRecord>& history) {
  std::string out = "epoch,train_loss,val_accuracy,lr\n";
  for (const auto& e : history) {
    out += std::to_string(e.epoch) + "," + format_g17(e.train_loss) + "," + format_g17(e.val_accuracy) + "," +
           format_g17(e.lr) + "\n";
  }
  return out;
}

/// Mini-batch training with plateau decay, early stopping and best/last
/// checkpoints. With an empty `out_dir` nothing is written to disk.
class Trainer {
 public:
  Trainer(Model& model, ModelSpec spec, TrainConfig config, std::string out_dir = "")
      : model_(model), spec_(spec), config_(config), out_dir_(std::move(out_dir)) {
    auto p = config_problems(config_);
    if (!p.empty()) {
      std::string msg = "invalid train config:";
      for (auto& e : p) msg += "\n  " + e;
      throw ConfigError(msg);
    }
    if (!out_dir_.empty()) std::filesystem::create_directories(out_dir_);
  }

  std::string best_path() const {
    return out_dir_.empty() ? "" : (std::filesystem::path(out_dir_) / "best.ckpt").string();
  }
  std::string last_path() const {
    return out_dir_.empty() ? "" : (std::filesystem::path(out_dir_) / "last.ckpt").string();
  }
  std::string metrics_path() const {
    return out_dir_.empty() ? "" : (std::filesystem::path(out_dir_) / "metrics.csv").string();
  }

  /// One epoch: shuffled training pass, validation, schedule and stopping.
  EpochRecord run_epoch(TrainState& st, const TrainData& data) {
    if (data.train.size() < 2) throw ConfigError("train: training split needs at least 2 samples");
    if (data.val.size() == 0) throw ConfigError("train: validation split is empty");
    model_.set_mode(nn::Mode::Training);
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    st.rng.shuffle(order);
    const double lr = st.schedule.lr();
    double loss_sum = 0.0;
    for (const auto& idx : make_batches(order, config_.batch_size)) {
      Tensor x = assemble_batch(data.train, idx, data.train_transform, st.epoch, config_.workers);
      std::vector<std::size_t> y;
      for (auto i : idx) y.push_back(data.train.labels[i]);
      Tensor loss = softmax_cross_entropy(model_.forward(x), y);
      model_.zero_grad();
      backward(loss);
      st.adam.step(model_, lr);
      loss_sum += loss.item() * static_cast<double>(idx.size());
    }
    EpochRecord rec;
    rec.epoch = st.epoch + 1;
    rec.train_loss = loss_sum / static_cast<double>(data.train.size());
    rec.lr = lr;
    rec.val_accuracy = accuracy_of(
        predict(model_, data.val, config_.batch_size, data.val_transform, st.epoch, config_.workers), data.val.labels);
    if (config_.record_train_accuracy) {
      rec.train_accuracy =
          accuracy_of(predict(model_, data.train, config_.batch_size, data.eval_transform, st.epoch, config_.workers),
                      data.train.labels);
    }
    st.schedule.update(rec.val_accuracy);
    st.stopped = st.stopper.update(rec.epoch, rec.val_accuracy);
    st.epoch = rec.epoch;
    st.history.push_back(rec);
    if (rec.val_accuracy > st.best_val_accuracy) {
      st.best_val_accuracy = rec.val_accuracy;
      st.best_epoch = rec.epoch;
      if (!out_dir_.empty()) save_checkpoint_file(best_path(), make_checkpoint(model_, spec_, st));
    }
    if (!out_dir_.empty()) {
      save_checkpoint_file(last_path(), make_checkpoint(model_, spec_, st));
      write_file(metrics_path(), metrics_csv(st.history));
    }
    return rec;
  }

  /// Runs epochs until stopping, `stop_after` total epochs (0: no limit), or
  /// `on_epoch` returns true.
  void run(TrainState& st, const TrainData& data, std::size_t stop_after = 0,
           const std::function<bool(const EpochRecord&)>& on_epoch = {}) {
    while (!st.stopped && (stop_after == 0 || st.epoch < stop_after)) {
      const EpochRecord rec = run_epoch(st, data);
      if (on_epoch && on_epoch(rec)) break;
    }
  }

  const TrainConfig& config() const { return config_; }

 private:
  Model& model_;
  ModelSpec spec_;
  TrainConfig config_;
  std::string out_dir_;
};

}  // namespace pestnet
