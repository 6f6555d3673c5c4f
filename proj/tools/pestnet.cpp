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

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pestnet/config.hpp"
#include "pestnet/data/loader.hpp"
#include "pestnet/data/refine.hpp"
#include "pestnet/data/synthetic.hpp"
#include "pestnet/eval.hpp"
#include "pestnet/gradient_suite.hpp"

namespace fs = std::filesystem;
using namespace pestnet;

namespace {

std::size_t g_workers = 0;  // 0: keep the configured value

std::string sample_id(const data::Sample& s) {
  if (!s.crop) return s.path;
  const auto& r = *s.crop;
  return s.path + "@" + std::to_string(r.x0) + "," + std::to_string(r.y0) + "," + std::to_string(r.x1) + "," +
         std::to_string(r.y1);
}

void write_text(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_file(path, text);
}

std::size_t workers_or(std::size_t configured) { return g_workers ? g_workers : configured; }

// ------------------------------------------------------------------ gen-synth

struct GenSynthArgs {
  data::SyntheticSpec spec;
  std::string out;
};

int gen_synth(const GenSynthArgs& a) {
  data::Manifest m = data::generate_synthetic(a.spec, a.out);
  std::cout << data::summarize(m) << "\n";
  return 0;
}

// ---------------------------------------------------------------------- train

struct TrainArgs {
  std::string config, arch, out, resume, manifest;
  std::size_t stop_after = 0;
  config::Overrides overrides;
};

data::Manifest prepared_manifest(const config::DataConfig& d) {
  if (d.manifest.empty()) throw ConfigError("data.manifest is required");
  data::Manifest m = data::load_manifest(d.manifest, true);
  if (!d.annotations.empty()) data::attach_annotations(m, d.annotations);
  if (d.refine != "none") {
    data::RefineReport rep;
    m = data::refine(m, data::parse_strategy(d.refine), d.threshold, &rep);
    for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
    std::cout << rep.summary();
  }
  return m;
}

int train(const TrainArgs& a) {
  config::Overrides o;
  if (!a.arch.empty()) o.emplace_back("model.arch", a.arch);
  if (!a.manifest.empty()) o.emplace_back("data.manifest", a.manifest);
  if (g_workers) o.emplace_back("train.workers", std::to_string(g_workers));
  o.insert(o.end(), a.overrides.begin(), a.overrides.end());
  config::RunConfig cfg = config::load(a.config, o);

  std::shared_ptr<Model> model;
  TrainState st;
  if (!a.resume.empty()) {
    Restored r = restore_checkpoint(load_checkpoint_file(a.resume), cfg.train, a.resume);
    if (r.spec.arch != cfg.model.arch) {
      throw ConfigError("--resume: checkpoint holds " + arch_name(r.spec.arch) + ", not " + arch_name(cfg.model.arch));
    }
    cfg.model = r.spec;
    model = r.model;
    st = std::move(r.state);
  } else {
    model = build_model(cfg.model);
    st = initial_state(cfg.train);
  }

  const data::Manifest m = prepared_manifest(cfg.data);
  if (m.num_classes() > cfg.model.num_classes) {
    throw ConfigError("manifest has " + std::to_string(m.num_classes()) + " classes but model.num_classes is " +
                      std::to_string(cfg.model.num_classes));
  }
  fs::create_directories(a.out);
  write_file((fs::path(a.out) / "config.ini").string(), config::format_config(cfg));

  TrainData d;
  d.train = data::load_split(m, data::Split::Train, cfg.model.height, cfg.model.width_px);
  d.val = data::load_split(m, data::Split::Val, cfg.model.height, cfg.model.width_px);
  d.eval_transform = data::normalize_transform();
  d.train_transform = d.val_transform = d.eval_transform;
  if (cfg.augment.enabled) {
    d.train_transform = data::augment_transform(cfg.augment.spec, Rng::keyed({cfg.train.seed, 1}).next_u64());
    if (cfg.augment.spec.apply_to_validation) {
      d.val_transform = data::augment_transform(cfg.augment.spec, Rng::keyed({cfg.train.seed, 2}).next_u64());
    }
  }

  Trainer trainer(*model, cfg.model, cfg.train, a.out);
  trainer.run(st, d, a.stop_after, [](const EpochRecord& r) {
    std::cout << "epoch " << r.epoch << " loss " << format_g17(r.train_loss) << " val_accuracy "
              << format_g17(r.val_accuracy) << " lr " << format_g17(r.lr) << "\n";
    return false;
  });
  std::cout << (st.stopped ? "stopped" : "paused") << " after epoch " << st.epoch << "; best val_accuracy "
            << format_g17(st.best_val_accuracy) << " at epoch " << st.best_epoch << "\n";
  return 0;
}

// ----------------------------------------------------------------------- eval

struct EvalArgs {
  std::string checkpoint, manifest, split = "test", out, predictions, truth;
  std::size_t batch_size = 32;
};

int evaluate(const EvalArgs& a) {
  Restored r = restore_checkpoint(load_checkpoint_file(a.checkpoint), TrainConfig{}, a.checkpoint);
  const auto split = data::parse_split(a.split);
  if (!split) throw ConfigError("--split must be train, val or test");
  const data::Manifest m = data::load_manifest(a.manifest, true);
  const LabeledSet set = data::load_split(m, *split, r.spec.height, r.spec.width_px);
  if (set.size() == 0) throw ConfigError(a.manifest + ": split " + a.split + " is empty");
  const std::size_t k = r.spec.num_classes;
  for (auto l : set.labels) {
    if (l >= k)
      throw ConfigError("label " + std::to_string(l) + " outside the model's " + std::to_string(k) + " classes");
  }
  const Tensor probs = predict(*r.model, set, a.batch_size, data::normalize_transform(), 0, workers_or(1));

  eval::Predictions p;
  eval::Truth t;
  std::vector<std::size_t> pred;
  std::size_t row = 0;
  for (const auto& s : m.samples) {
    if (s.split != *split) continue;
    std::vector<double> v(probs.values().begin() + row * k, probs.values().begin() + (row + 1) * k);
    pred.push_back(eval::argmax(v));
    p.ids.push_back(sample_id(s));
    p.probs.push_back(std::move(v));
    t.ids.push_back(sample_id(s));
    t.labels.push_back(s.label);
    ++row;
  }
  const auto cm = eval::confusion(t.labels, pred, k);
  const std::string report = eval::report_json(eval::metrics(cm), cm).dump(2) + "\n";
  if (!a.out.empty()) write_text(a.out, report);
  if (!a.predictions.empty()) write_text(a.predictions, eval::format_predictions(p));
  if (!a.truth.empty()) write_text(a.truth, eval::format_truth(t));
  std::cout << report;
  return 0;
}

// ------------------------------------------------------------------- ensemble

struct EnsembleArgs {
  std::vector<std::string> preds;
  std::string truth, mode = "soft", out, fused;
};

int ensemble(const EnsembleArgs& a) {
  if (a.mode != "soft" && a.mode != "hard") throw ConfigError("--mode must be soft or hard");
  if (a.preds.size() < 2) throw ConfigError("--pred needs at least two prediction files");
  std::vector<eval::Predictions> files;
  for (const auto& path : a.preds) files.push_back(eval::parse_predictions(read_file(path), path));
  const eval::Truth truth = eval::parse_truth(read_file(a.truth), a.truth);
  const std::size_t k = files[0].probs.empty() ? 0 : files[0].probs[0].size();
  for (std::size_t i = 0; i < files.size(); ++i) {
    eval::check_aligned(truth.ids, files[i].ids, a.preds[i]);
    if (!files[i].probs.empty() && files[i].probs[0].size() != k) {
      throw ShapeError("ensemble", a.preds[i] + " has " + std::to_string(files[i].probs[0].size()) +
                                       " classes, expected " + std::to_string(k));
    }
  }
  eval::Predictions fused{truth.ids, {}};
  std::vector<std::size_t> labels;
  if (a.mode == "soft") {
    std::vector<eval::Rows> rows;
    for (auto& f : files) rows.push_back(f.probs);
    eval::Vote v = eval::soft_vote(rows);
    fused.probs = std::move(v.probs);
    labels = std::move(v.labels);
  } else {
    std::vector<std::vector<std::size_t>> votes;
    for (auto& f : files) {
      std::vector<std::size_t> l;
      for (auto& r : f.probs) l.push_back(eval::argmax(r));
      votes.push_back(std::move(l));
    }
    labels = eval::hard_vote(votes, k);
    // Fused rows hold vote fractions.
    for (std::size_t s = 0; s < truth.ids.size(); ++s) {
      std::vector<double> row(k, 0.0);
      for (auto& v : votes) row[v[s]] += 1.0 / static_cast<double>(votes.size());
      fused.probs.push_back(std::move(row));
    }
  }
  const auto cm = eval::confusion(truth.labels, labels, k);
  const std::string report = eval::report_json(eval::metrics(cm), cm).dump(2) + "\n";
  if (!a.out.empty()) write_text(a.out, report);
  if (!a.fused.empty()) write_text(a.fused, eval::format_predictions(fused));
  std::cout << report;
  return 0;
}

// --------------------------------------------------------------------- refine

struct RefineArgs {
  std::string manifest, ann_dir, strategy, out;
  double threshold = 0.5;
};

int refine(const RefineArgs& a) {
  const data::Strategy strategy = data::parse_strategy(a.strategy);
  data::Manifest m = data::load_manifest(a.manifest, true);
  data::attach_annotations(m, a.ann_dir);
  data::RefineReport rep;
  const data::Manifest r = data::refine(m, strategy, a.threshold, &rep);
  const fs::path out(a.out);
  const std::string dir = out.has_parent_path() ? out.parent_path().string() : ".";
  const data::Manifest mat = data::materialize(r, dir);
  write_text(a.out, data::format_manifest(mat));
  for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << rep.summary();
  return 0;
}

// -------------------------------------------------------------------- gradcam

struct GradcamArgs {
  std::string checkpoint, image, layer, out;
  std::size_t target = 0;
  bool upsample = false, list_layers = false;
};

int gradcam(const GradcamArgs& a) {
  Restored r = restore_checkpoint(load_checkpoint_file(a.checkpoint), TrainConfig{}, a.checkpoint);
  if (a.list_layers) {
    for (const auto& n : r.model->layer_names()) std::cout << n << "\n";
    return 0;
  }
  if (a.image.empty() || a.layer.empty() || a.out.empty()) {
    throw ConfigError("gradcam needs --image, --layer and --out");
  }
  data::Image img = data::read_image(a.image);
  if (img.channels != r.spec.channels) {
    throw ShapeError("gradcam", a.image + " has " + std::to_string(img.channels) + " channels, model expects " +
                                    std::to_string(r.spec.channels));
  }
  Tensor x = data::resize(data::to_tensor(img), r.spec.height, r.spec.width_px);
  if (x.dim(0) == 3) x = data::normalize(x);
  Tensor cam = grad_cam(*r.model, x, a.target, a.layer);
  if (a.upsample) {
    cam = data::resize(reshape(cam, {1, cam.dim(0), cam.dim(1)}), r.spec.height, r.spec.width_px);
    cam = reshape(cam, {cam.dim(1), cam.dim(2)});
  }
  write_text(a.out, data::encode_pnm(data::from_tensor(cam)));
  std::cout << a.out << ": " << cam.dim(1) << "x" << cam.dim(0) << " heatmap for class " << a.target << " at "
            << a.layer << "\n";
  return 0;
}

// ------------------------------------------------------------------ gradcheck

int gradcheck() {
  double worst = 0;
  std::size_t failed = 0;
  run_gradient_suite([&](const GradResult& r) {
    const bool ok = r.error <= kGradTolerance;
    failed += !ok;
    worst = std::max(worst, r.error);
    char line[128];
    std::snprintf(line, sizeof line, "%-24s max_rel_error %.3e %s\n", r.name.c_str(), r.error, ok ? "ok" : "FAIL");
    std::cout << line;
  });
  char line[128];
  std::snprintf(line, sizeof line, "worst %.3e, %zu failing (tolerance %.0e)\n", worst, failed, kGradTolerance);
  std::cout << line;
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pestnet: pest-classification experiments on a from-scratch autodiff library"};
  app.set_version_flag("--version", std::string("pestnet ") + PESTNET_VERSION);
  app.require_subcommand(1);
  app.add_option("--workers", g_workers, "Parallel data-loading threads (deterministic)")->check(CLI::Range(1, 256));
  int code = 0;

  GenSynthArgs gs;
  auto* cmd_gs = app.add_subcommand("gen-synth", "Write a synthetic image dataset with annotations and manifest");
  cmd_gs->add_option("--classes", gs.spec.num_classes, "Number of classes")->check(CLI::Range(2, 1000));
  cmd_gs->add_option("--per-class", gs.spec.per_class, "Images per class")->check(CLI::PositiveNumber);
  cmd_gs->add_option("--size", gs.spec.size, "Image side in pixels")->check(CLI::Range(4, 4096));
  cmd_gs->add_option("--seed", gs.spec.seed, "Generator seed");
  cmd_gs->add_option("--noise", gs.spec.noise, "Uniform pixel noise amplitude")->check(CLI::Range(0.0, 1.0));
  cmd_gs->add_option("--out", gs.out, "Output directory")->required();
  cmd_gs->callback([&] { code = gen_synth(gs); });

  TrainArgs tr;
  auto* cmd_tr = app.add_subcommand("train", "Train a model; writes metrics.csv, best/last checkpoints, config.ini");
  cmd_tr->add_option("--config", tr.config, "INI run configuration")->check(CLI::ExistingFile);
  cmd_tr->add_option("--arch", tr.arch, "tiny-resnet|tiny-convnext|tiny-vit|ran|fpn|fusion");
  cmd_tr->add_option("--manifest", tr.manifest, "Dataset manifest (same as --data.manifest)");
  cmd_tr->add_option("--out", tr.out, "Output directory")->required();
  cmd_tr->add_option("--resume", tr.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  cmd_tr->add_option("--stop-after", tr.stop_after, "Pause once this many epochs are complete");
  std::map<std::string, std::string> override_values;
  for (const auto& f : config::fields()) {
    const std::string name = f.section + "." + f.key;
    cmd_tr->add_option("--" + name, override_values[name], "Override " + name + " (default " + f.get({}) + ")")
        ->group("Config overrides");
  }
  cmd_tr->callback([&] {
    for (auto* opt : cmd_tr->get_options()) {
      const std::string name = opt->get_name().substr(2);
      if (opt->count() && override_values.count(name)) tr.overrides.emplace_back(name, override_values[name]);
    }
    code = train(tr);
  });

  EvalArgs ev;
  auto* cmd_ev = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest split; writes a metrics JSON");
  cmd_ev->add_option("--checkpoint", ev.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  cmd_ev->add_option("--manifest", ev.manifest, "Dataset manifest")->required()->check(CLI::ExistingFile);
  cmd_ev->add_option("--split", ev.split, "train|val|test");
  cmd_ev->add_option("--out", ev.out, "Metrics JSON path");
  cmd_ev->add_option("--predictions", ev.predictions, "Also write sample_id,p_0,... CSV");
  cmd_ev->add_option("--truth", ev.truth, "Also write sample_id,label CSV");
  cmd_ev->add_option("--batch-size", ev.batch_size, "Inference batch size")->check(CLI::PositiveNumber);
  cmd_ev->callback([&] { code = evaluate(ev); });

  EnsembleArgs en;
  auto* cmd_en = app.add_subcommand("ensemble", "Soft or hard voting over prediction CSVs");
  cmd_en->add_option("--pred", en.preds, "Prediction CSVs, one per model")->required()->check(CLI::ExistingFile);
  cmd_en->add_option("--truth", en.truth, "sample_id,label CSV")->required()->check(CLI::ExistingFile);
  cmd_en->add_option("--mode", en.mode, "soft|hard");
  cmd_en->add_option("--out", en.out, "Metrics JSON path");
  cmd_en->add_option("--fused", en.fused, "Fused prediction CSV path");
  cmd_en->callback([&] { code = ensemble(en); });

  RefineArgs rf;
  auto* cmd_rf = app.add_subcommand("refine", "Refine a manifest with detection boxes; writes crops and a manifest");
  cmd_rf->add_option("--manifest", rf.manifest, "Input manifest")->required()->check(CLI::ExistingFile);
  cmd_rf->add_option("--ann-dir", rf.ann_dir, "Directory of <stem>.txt box files")
      ->required()
      ->check(CLI::ExistingDirectory);
  cmd_rf->add_option("--strategy", rf.strategy, "croginal-train|crop-train|crop-all-splits|discard-all-splits")
      ->required();
  cmd_rf->add_option("--threshold", rf.threshold, "Minimum box confidence")->check(CLI::Range(0.0, 1.0));
  cmd_rf->add_option("--out", rf.out, "Output manifest path")->required();
  cmd_rf->callback([&] { code = refine(rf); });

  GradcamArgs gc;
  auto* cmd_gc = app.add_subcommand("gradcam", "Write a Grad-CAM heatmap as a PGM image");
  cmd_gc->add_option("--checkpoint", gc.checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  cmd_gc->add_option("--image", gc.image, "Input PPM/PGM image")->check(CLI::ExistingFile);
  cmd_gc->add_option("--class", gc.target, "Target class");
  cmd_gc->add_option("--layer", gc.layer, "Layer name (see --list-layers)");
  cmd_gc->add_option("--out", gc.out, "Output PGM path");
  cmd_gc->add_flag("--upsample", gc.upsample, "Resize the heatmap to the model input size");
  cmd_gc->add_flag("--list-layers", gc.list_layers, "Print the model's layer names and exit");
  cmd_gc->callback([&] { code = gradcam(gc); });

  auto* cmd_ck = app.add_subcommand("gradcheck", "Run the finite-difference gradient suite");
  cmd_ck->callback([&] { code = gradcheck(); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const pestnet::Error& e) {
    const std::string name = app.get_subcommands().front()->get_name(), what = e.what();
    std::cerr << "error: " << (what.rfind(name + ":", 0) == 0 ? "" : name + ": ") << what << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return code;
}
