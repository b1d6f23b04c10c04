/*
 * Copyright 2026 The bevtune Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "bevtune/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"

#include "bevtune/depth.hpp"
#include "bevtune/errors.hpp"
#include "bevtune/losses.hpp"
#include "bevtune/matching.hpp"
#include "bevtune/rng.hpp"

namespace bevtune::cli {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

std::string fnum(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::string f4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string sci(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2e", v);
  return buf;
}

std::string read_text_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text_file(const fs::path& p, const std::string& text) {
  std::ofstream os(p, std::ios::binary);
  if (!os) throw Error("cannot open " + p.string() + " for writing");
  os << text;
  os.flush();
  if (!os) throw Error("write failed: " + p.string());
}

void check_keys(const ordered_json& obj, std::initializer_list<const char*> allowed,
                const char* where) {
  if (!obj.is_object())
    throw ConfigError(std::string("config: ") + where + " must be an object");
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed)
      if (it.key() == k) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("config: unknown key \"" + it.key() + "\" in " + where);
  }
}

template <typename T>
void maybe(const ordered_json& obj, const char* key, T& into) {
  if (obj.contains(key)) into = obj.at(key).get<T>();
}

void parse_gen_section(const ordered_json& g, scenegen::GenConfig& cfg) {
  check_keys(g,
             {"min_boxes", "max_boxes", "spawn_radius_min", "spawn_radius_max", "dim_jitter",
              "max_speed", "classes", "num_attributes", "max_rejections"},
             "dataset.gen");
  maybe(g, "min_boxes", cfg.min_boxes);
  maybe(g, "max_boxes", cfg.max_boxes);
  maybe(g, "spawn_radius_min", cfg.spawn_radius_min);
  maybe(g, "spawn_radius_max", cfg.spawn_radius_max);
  maybe(g, "dim_jitter", cfg.dim_jitter);
  maybe(g, "max_speed", cfg.max_speed);
  maybe(g, "num_attributes", cfg.num_attributes);
  maybe(g, "max_rejections", cfg.max_rejections);
  if (g.contains("classes")) {
    cfg.classes.clear();
    for (const auto& cj : g.at("classes")) {
      check_keys(cj, {"name", "length", "width", "height"}, "dataset.gen.classes[]");
      scenegen::ClassSpec cs;
      cs.name = cj.at("name").get<std::string>();
      cs.length = cj.at("length").get<double>();
      cs.width = cj.at("width").get<double>();
      cs.height = cj.at("height").get<double>();
      cfg.classes.push_back(std::move(cs));
    }
  }
}

void parse_noise_section(const ordered_json& n, scenegen::NoiseConfig& cfg) {
  check_keys(n,
             {"center_sigma", "scale_sigma", "yaw_sigma", "vel_sigma", "drop_rate",
              "spurious_rate", "class_flip_rate"},
             "dataset.noise");
  maybe(n, "center_sigma", cfg.center_sigma);
  maybe(n, "scale_sigma", cfg.scale_sigma);
  maybe(n, "yaw_sigma", cfg.yaw_sigma);
  maybe(n, "vel_sigma", cfg.vel_sigma);
  maybe(n, "drop_rate", cfg.drop_rate);
  maybe(n, "spurious_rate", cfg.spurious_rate);
  maybe(n, "class_flip_rate", cfg.class_flip_rate);
}

void parse_dataset_section(const ordered_json& d, scenegen::DatasetConfig& cfg) {
  check_keys(d,
             {"seed", "scene_count", "full3d_fraction", "rig", "image_width", "image_height",
              "gen", "noise"},
             "dataset");
  maybe(d, "seed", cfg.seed);
  maybe(d, "scene_count", cfg.scene_count);
  maybe(d, "full3d_fraction", cfg.full3d_fraction);
  maybe(d, "rig", cfg.rig);
  maybe(d, "image_width", cfg.image_width);
  maybe(d, "image_height", cfg.image_height);
  if (d.contains("gen")) parse_gen_section(d.at("gen"), cfg.gen);
  if (d.contains("noise")) parse_noise_section(d.at("noise"), cfg.noise);
}

void parse_train_section(const ordered_json& t, finetune::TrainConfig& cfg) {
  check_keys(t,
             {"base_lr", "cosine", "epochs", "mix", "max_steps", "grad_clip", "seed",
              "loss_weights", "focal", "cost_weights", "normalization"},
             "train");
  maybe(t, "base_lr", cfg.base_lr);
  maybe(t, "cosine", cfg.cosine);
  maybe(t, "epochs", cfg.epochs);
  maybe(t, "mix", cfg.mix);
  maybe(t, "max_steps", cfg.max_steps);
  maybe(t, "grad_clip", cfg.grad_clip);
  maybe(t, "seed", cfg.seed);
  if (t.contains("loss_weights")) {
    const auto& w = t.at("loss_weights");
    check_keys(w, {"cls", "reg", "iou"}, "train.loss_weights");
    maybe(w, "cls", cfg.loss_weights.cls);
    maybe(w, "reg", cfg.loss_weights.reg);
    maybe(w, "iou", cfg.loss_weights.iou);
  }
  if (t.contains("focal")) {
    const auto& f = t.at("focal");
    check_keys(f, {"alpha", "gamma"}, "train.focal");
    maybe(f, "alpha", cfg.focal.alpha);
    maybe(f, "gamma", cfg.focal.gamma);
  }
  if (t.contains("cost_weights")) {
    const auto& w = t.at("cost_weights");
    check_keys(w, {"cls", "reg", "iou"}, "train.cost_weights");
    maybe(w, "cls", cfg.cost_weights.cls);
    maybe(w, "reg", cfg.cost_weights.reg);
    maybe(w, "iou", cfg.cost_weights.iou);
  }
  if (t.contains("normalization")) {
    const auto& n = t.at("normalization");
    check_keys(n, {"image_height", "max_depth"}, "train.normalization");
    maybe(n, "image_height", cfg.norm.image_height);
    maybe(n, "max_depth", cfg.norm.max_depth);
  }
}

void parse_metrics_section(const ordered_json& m, metrics::MetricConfig& cfg) {
  check_keys(m, {"thresholds", "tp_threshold", "min_recall", "min_precision"}, "metrics");
  maybe(m, "thresholds", cfg.thresholds);
  maybe(m, "tp_threshold", cfg.tp_threshold);
  maybe(m, "min_recall", cfg.min_recall);
  maybe(m, "min_precision", cfg.min_precision);
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  ordered_json j;
  try {
    j = ordered_json::parse(json_text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig rc;
  try {
    check_keys(j, {"dataset", "train", "metrics"}, "the top level");
    if (j.contains("dataset")) parse_dataset_section(j.at("dataset"), rc.dataset);
    if (j.contains("train")) parse_train_section(j.at("train"), rc.train);
    if (j.contains("metrics")) parse_metrics_section(j.at("metrics"), rc.metrics);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  return rc;
}

RunConfig load_run_config(const fs::path& file) {
  std::ifstream is(file, std::ios::binary);
  if (!is) throw ConfigError("config file not found: " + file.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_run_config(ss.str());
}

int cmd_gen(const GenOptions& opt, std::ostream& out) {
  if (opt.out_dir.empty()) throw ConfigError("gen: --out is required");
  RunConfig rc;
  if (!opt.config_file.empty()) rc = load_run_config(opt.config_file);
  scenegen::DatasetConfig cfg = rc.dataset;
  if (opt.seed) cfg.seed = *opt.seed;
  if (opt.scenes) cfg.scene_count = *opt.scenes;
  if (opt.split) cfg.full3d_fraction = *opt.split;
  if (opt.rig) cfg.rig = *opt.rig;
  if (opt.image_width) cfg.image_width = *opt.image_width;
  if (opt.image_height) cfg.image_height = *opt.image_height;

  const scenegen::Dataset ds = scenegen::generate_dataset(cfg);
  scenegen::write_dataset(ds, opt.out_dir);

  const int n3d = ds.full3d_count();
  const std::size_t n_cams = ds.manifest.cameras.size();
  std::string class_list;
  for (const auto& c : cfg.gen.classes) {
    if (!class_list.empty()) class_list += ", ";
    class_list += c.name;
  }
  out << "dataset written to " << opt.out_dir.string() << "\n";
  out << "  seed:    " << cfg.seed << "\n";
  out << "  scenes:  " << cfg.scene_count << " (" << n3d << " full3d, "
      << cfg.scene_count - n3d << " only2d)\n";
  out << "  rig:     " << cfg.rig << ", " << n_cams << " cameras, " << cfg.image_width << "x"
      << cfg.image_height << "\n";
  out << "  classes: " << class_list << "\n";
  out << "  files:   manifest.json, scenes.jsonl, "
      << static_cast<std::size_t>(cfg.scene_count) * n_cams << " depth maps\n";
  return 0;
}

namespace {

const scenegen::Scene& pick_scene(const scenegen::Dataset& ds, int idx) {
  if (idx < 0 || idx >= static_cast<int>(ds.scenes.size()))
    throw ConfigError("scene " + std::to_string(idx) + " out of range [0, " +
                      std::to_string(ds.scenes.size()) + ")");
  return ds.scenes[static_cast<std::size_t>(idx)];
}

std::vector<int> pick_cameras(const scenegen::Scene& scene, const std::string& sel) {
  if (sel == "all") {
    std::vector<int> all(scene.cameras().size());
    std::iota(all.begin(), all.end(), 0);
    return all;
  }
  for (std::size_t i = 0; i < scene.cameras().size(); ++i)
    if (scene.cameras()[i].id == sel) return {static_cast<int>(i)};
  throw ConfigError("camera \"" + sel + "\" is not in the rig");
}

scenegen::Dataset load_dataset(const fs::path& dir) {
  if (dir.empty()) throw ConfigError("--dataset is required");
  return scenegen::read_dataset(dir);
}

// The per-camera view whose camera is scene.cameras()[index], if any
// prediction projects into it.
const losses::CameraView* find_view(const finetune::SceneViews& sv,
                                    const scenegen::Scene& scene, int index) {
  const geom::Camera* cam = &scene.cameras()[static_cast<std::size_t>(index)];
  for (const auto& v : sv.views)
    if (v.camera == cam) return &v;
  return nullptr;
}

}  // namespace

int cmd_project(const StageOptions& opt, std::ostream& out) {
  const scenegen::Dataset ds = load_dataset(opt.dataset_dir);
  const scenegen::Scene& scene = pick_scene(ds, opt.scene);
  const std::vector<int> cams = pick_cameras(scene, opt.camera);
  const std::vector<geom::Box3D>* boxes = nullptr;
  if (opt.source == "preds")
    boxes = &scene.init_preds();
  else if (opt.source == "gt")
    boxes = &scene.gt3d_eval_only();
  else
    throw ConfigError("source must be \"preds\" or \"gt\", got \"" + opt.source + "\"");

  const auto names = ds.class_names();
  out << "scene " << scene.id() << " (" << scenegen::to_string(scene.label_mode())
      << "), source " << opt.source << ", " << boxes->size() << " boxes\n";
  for (int ci : cams) {
    const geom::Camera& cam = scene.cameras()[static_cast<std::size_t>(ci)];
    out << "camera " << cam.id << " (" << cam.width << "x" << cam.height << "):\n";
    int visible = 0;
    for (std::size_t k = 0; k < boxes->size(); ++k) {
      const geom::Box3D& b = (*boxes)[k];
      if (const auto bb = geom::project_box(cam, b)) {
        out << "  box " << k << " " << names[static_cast<std::size_t>(b.class_id)] << " score "
            << fnum(b.score) << ": x " << fnum(bb->x) << " y " << fnum(bb->y) << " w "
            << fnum(bb->w) << " h " << fnum(bb->h) << " depth " << fnum(bb->depth) << "\n";
        ++visible;
      }
    }
    out << "  visible " << visible << " of " << boxes->size() << "\n";
  }
  return 0;
}

int cmd_match(const StageOptions& opt, std::ostream& out) {
  const scenegen::Dataset ds = load_dataset(opt.dataset_dir);
  const scenegen::Scene& scene = pick_scene(ds, opt.scene);
  const std::vector<int> cams = pick_cameras(scene, opt.camera);
  const finetune::ToyDetector det(ds);
  const finetune::TrainConfig tc;
  const finetune::SceneViews sv = finetune::build_scene_views(det, scene, tc);
  for (const std::string& w : sv.warnings) out << "warning: " << w << "\n";

  out << "scene " << scene.id() << "\n";
  for (int ci : cams) {
    const geom::Camera& cam = scene.cameras()[static_cast<std::size_t>(ci)];
    const losses::CameraView* view = find_view(sv, scene, ci);
    if (view == nullptr) {
      out << "camera " << cam.id << ": no visible predictions\n";
      continue;
    }
    out << "camera " << cam.id << ": " << view->preds.size() << " predictions, "
        << view->gts.size() << " annotations\n";
    if (!view->gts.empty()) {
      std::vector<matching::Prediction2D> mpreds;
      mpreds.reserve(view->preds.size());
      for (const auto& p : view->preds) mpreds.push_back({p.box, losses::softmax(p.logits)});
      matching::Normalization norm = tc.norm;
      norm.image_height = static_cast<double>(cam.height);
      const matching::CostMatrix cost =
          matching::build_cost_matrix(mpreds, view->gts, tc.cost_weights, norm);
      out << "  cost matrix (row: box, col: annotation):\n";
      for (int i = 0; i < cost.rows(); ++i) {
        out << "  box " << view->box_index[static_cast<std::size_t>(i)] << ":";
        for (int j = 0; j < cost.cols(); ++j) out << " " << fnum(cost.at(i, j));
        out << "\n";
      }
      out << "  assignment, total cost " << fnum(view->assignment.total_cost) << ":\n";
      for (const auto& [i, j] : view->assignment.pairs)
        out << "    box " << view->box_index[static_cast<std::size_t>(i)] << " -> ann " << j
            << " (cost " << fnum(cost.at(i, j)) << ")\n";
    } else {
      out << "  assignment: nothing to match\n";
    }
    out << "  unmatched boxes:";
    if (view->assignment.unmatched_preds.empty()) out << " none";
    for (int i : view->assignment.unmatched_preds)
      out << " " << view->box_index[static_cast<std::size_t>(i)];
    out << "\n  unmatched annotations:";
    if (view->assignment.unmatched_gts.empty()) out << " none";
    for (int j : view->assignment.unmatched_gts) out << " " << j;
    out << "\n";
  }
  return 0;
}

int cmd_loss(const StageOptions& opt, std::ostream& out) {
  const scenegen::Dataset ds = load_dataset(opt.dataset_dir);
  const scenegen::Scene& scene = pick_scene(ds, opt.scene);
  const std::vector<int> cams = pick_cameras(scene, opt.camera);
  const finetune::ToyDetector det(ds);
  const finetune::TrainConfig tc;
  const finetune::SceneViews sv = finetune::build_scene_views(det, scene, tc);
  for (const std::string& w : sv.warnings) out << "warning: " << w << "\n";

  out << "scene " << scene.id() << "\n";
  for (int ci : cams) {
    const geom::Camera& cam = scene.cameras()[static_cast<std::size_t>(ci)];
    const losses::CameraView* view = find_view(sv, scene, ci);
    if (view == nullptr) {
      out << "camera " << cam.id << ": no visible predictions\n";
      continue;
    }
    matching::Normalization norm = tc.norm;
    norm.image_height = static_cast<double>(cam.height);
    const losses::LossBreakdown b = losses::total_loss(
        view->assignment, view->preds, view->gts, tc.loss_weights, tc.focal, norm);
    out << "camera " << cam.id << ": cls " << fnum(b.cls) << " reg " << fnum(b.reg) << " iou "
        << fnum(b.iou) << " total " << fnum(b.total) << " (matched " << b.matched
        << ", background " << b.background << ")\n";
  }
  if (opt.camera == "all") {
    const auto boxes = det.boxes(scene.id());
    const losses::SceneLoss sl =
        losses::total_loss_grad_3d(boxes, sv.views, tc.loss_weights, tc.focal, tc.norm);
    out << "scene total: cls " << fnum(sl.breakdown.cls) << " reg " << fnum(sl.breakdown.reg)
        << " iou " << fnum(sl.breakdown.iou) << " total " << fnum(sl.breakdown.total)
        << " (matched " << sl.breakdown.matched << ", background " << sl.breakdown.background
        << ")\n";
  }
  return 0;
}

namespace {

// A randomly posed but certainly visible box: pick an image point and a
// depth, back-project to the ego frame, then hang class-typical dims on it.
geom::Box3D sample_visible_box(SplitMix64& rng, const geom::Camera& cam,
                               const std::vector<scenegen::ClassSpec>& classes, bool* ok) {
  for (int attempt = 0; attempt < 256; ++attempt) {
    const auto& cs = classes[static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<int>(classes.size()) - 1))];
    const double z = rng.uniform(6.0, 40.0);
    const double u = rng.uniform(0.15 * cam.width, 0.85 * cam.width);
    const double v = rng.uniform(0.30 * cam.height, 0.80 * cam.height);
    geom::Box3D b;
    const geom::Vec3 p_cam{(u - cam.intrinsics.cx) / cam.intrinsics.fx * z,
                           (v - cam.intrinsics.cy) / cam.intrinsics.fy * z, z};
    b.center = cam.ego_to_cam.inverse().apply(p_cam);
    b.length = cs.length * rng.uniform(0.9, 1.1);
    b.width = cs.width * rng.uniform(0.9, 1.1);
    b.height = cs.height * rng.uniform(0.9, 1.1);
    b.yaw = geom::wrap_angle(rng.uniform(-geom::kPi, geom::kPi));
    b.class_id = rng.uniform_int(0, static_cast<int>(classes.size()) - 1);
    if (geom::project_box(cam, b)) {
      *ok = true;
      return b;
    }
  }
  *ok = false;
  return {};
}

struct GradTrial {
  std::vector<geom::Box3D> boxes;
  std::vector<std::vector<double>> logits;
  std::vector<losses::CameraView> views;
  std::string exclusion;  // nonempty: skip the difference check
  bool degenerate = false;
};

GradTrial build_grad_trial(std::uint64_t seed, const std::vector<geom::Camera>& rig) {
  SplitMix64 rng(seed);
  const auto classes = scenegen::default_classes();
  const int n_classes = static_cast<int>(classes.size());
  GradTrial t;

  const int n_cams = rng.uniform_int(1, 2);
  std::vector<int> cam_idx(rig.size());
  std::iota(cam_idx.begin(), cam_idx.end(), 0);
  rng.shuffle(cam_idx);
  cam_idx.resize(static_cast<std::size_t>(n_cams));
  std::sort(cam_idx.begin(), cam_idx.end());

  const int n_preds = rng.uniform_int(1, 4);
  const int n_gts = rng.uniform_int(1, 4);

  for (int p = 0; p < n_preds; ++p) {
    const geom::Camera& home = rig[static_cast<std::size_t>(cam_idx[p % n_cams])];
    bool ok = false;
    t.boxes.push_back(sample_visible_box(rng, home, classes, &ok));
    if (!ok) {
      t.degenerate = true;
      return t;
    }
    std::vector<double> lg(static_cast<std::size_t>(n_classes) + 1);
    for (double& v : lg) v = rng.uniform(-2.0, 2.0);
    t.logits.push_back(std::move(lg));
  }

  const matching::CostWeights cw;
  for (int ci : cam_idx) {
    const geom::Camera& cam = rig[static_cast<std::size_t>(ci)];
    losses::CameraView view;
    view.camera = &cam;
    std::vector<matching::Prediction2D> mpreds;
    for (std::size_t p = 0; p < t.boxes.size(); ++p) {
      if (const auto bb = geom::project_box(cam, t.boxes[p])) {
        view.box_index.push_back(static_cast<int>(p));
        view.preds.push_back({*bb, t.logits[p]});
        mpreds.push_back({*bb, losses::softmax(t.logits[p])});
      }
    }
    if (view.preds.empty()) continue;
    for (int g = 0; g < n_gts; ++g) {
      bool ok = false;
      const geom::Box3D gb = sample_visible_box(rng, cam, classes, &ok);
      if (!ok) {
        t.degenerate = true;
        return t;
      }
      const auto bb = geom::project_box(cam, gb);
      view.gts.push_back({*bb, rng.uniform_int(0, n_classes - 1)});
    }
    matching::Normalization norm;
    norm.image_height = static_cast<double>(cam.height);
    view.assignment = matching::hungarian(
        matching::build_cost_matrix(mpreds, view.gts, cw, norm));
    t.views.push_back(std::move(view));
  }
  if (t.views.empty()) {
    t.degenerate = true;
    return t;
  }

  // Flag configurations whose loss sits close to a subgradient kink, a
  // corner selection tie, or a visibility boundary: a finite difference
  // would step across them.
  for (const auto& view : t.views) {
    const geom::Camera& cam = *view.camera;
    for (std::size_t r = 0; r < view.preds.size(); ++r) {
      const geom::Box3D& b = t.boxes[static_cast<std::size_t>(view.box_index[r])];
      const auto jac = geom::project_box_jacobian(cam, b);
      if (!jac) {
        t.exclusion = "projection vanished under the jacobian visibility rule";
        return t;
      }
      if (jac->tie_margin < 1e-3) {
        t.exclusion = "corner selection tie margin " + sci(jac->tie_margin) + " px";
        return t;
      }
      const geom::Box2D& bb = view.preds[r].box;
      const double vis_margin =
          std::min(std::min(bb.x_max(), cam.width - bb.x_min()),
                   std::min(bb.y_max(), cam.height - bb.y_min()));
      if (vis_margin < 1e-3) {
        t.exclusion = "image overlap margin " + sci(vis_margin) + " px";
        return t;
      }
      for (const geom::Vec3& corner : geom::box_corners(b)) {
        const double z = cam.ego_to_cam.apply(corner).z;
        if (std::abs(z - geom::kMinCameraDepth) < 1e-4) {
          t.exclusion = "corner depth within 1e-4 of the visibility cutoff";
          return t;
        }
      }
    }
    for (const auto& [r, j] : view.assignment.pairs) {
      const double margin = losses::pair_kink_margin(view.preds[static_cast<std::size_t>(r)].box,
                                                     view.gts[static_cast<std::size_t>(j)].box);
      if (margin < 1e-3) {
        t.exclusion = "pair kink margin " + sci(margin);
        return t;
      }
    }
  }
  return t;
}

}  // namespace

GradCheckReport run_grad_check(const GradCheckOptions& opt, std::ostream& out) {
  if (opt.trials <= 0) throw ConfigError("grad-check: --trials must be positive");
  const auto rig = scenegen::surround_rig();
  const losses::LossWeights w;
  const losses::FocalParams fp;
  const matching::Normalization norm;

  GradCheckReport rep;
  rep.trials = opt.trials;

  for (int trial = 0; trial < opt.trials; ++trial) {
    GradTrial t = build_grad_trial(derive_seed(opt.seed, static_cast<std::uint64_t>(trial)), rig);
    if (t.degenerate || !t.exclusion.empty()) {
      ++rep.excluded;
      out << "trial " << trial << " excluded: "
          << (t.degenerate ? "no visible configuration found" : t.exclusion) << "\n";
      continue;
    }

    bool failed = false;
    auto report_fail = [&](const std::string& what, double analytic, double fd, double rel) {
      out << "trial " << trial << ": " << what << " analytic " << analytic << " fd " << fd
          << " rel " << sci(rel) << "\n";
      failed = true;
    };
    // Pass when the difference clears an absolute floor (dominated by finite
    // difference noise) or the relative tolerance.
    auto check = [&](const std::string& what, double analytic, double fd, double tol,
                     double floor_abs, double& max_rel) {
      const double diff = std::abs(analytic - fd);
      const double scale = std::max(std::abs(analytic), std::abs(fd));
      const double rel = diff / std::max(scale, floor_abs);
      max_rel = std::max(max_rel, rel);
      if (diff <= floor_abs) return;
      if (rel > tol) report_fail(what, analytic, fd, rel);
    };

    const losses::SceneLoss sl = losses::total_loss_grad_3d(t.boxes, t.views, w, fp, norm);

    auto scene_total = [&](const std::vector<geom::Box3D>& bx,
                           const std::vector<std::vector<double>>& lg, bool* ok) {
      double sum = 0.0;
      *ok = true;
      for (const auto& view : t.views) {
        std::vector<losses::Prediction2DLogits> preds;
        preds.reserve(view.box_index.size());
        for (int bi : view.box_index) {
          const auto bb = geom::project_box(*view.camera, bx[static_cast<std::size_t>(bi)]);
          if (!bb) {
            *ok = false;
            return 0.0;
          }
          preds.push_back({*bb, lg[static_cast<std::size_t>(bi)]});
        }
        matching::Normalization vn = norm;
        vn.image_height = static_cast<double>(view.camera->height);
        sum += losses::total_loss(view.assignment, preds, view.gts, w, fp, vn).total;
      }
      return sum;
    };

    static constexpr const char* kBoxParam[7] = {"cx", "cy",     "cz",  "length",
                                                 "width", "height", "yaw"};
    auto bump3d = [](geom::Box3D& b, int k, double h) {
      switch (k) {
        case 0: b.center.x += h; break;
        case 1: b.center.y += h; break;
        case 2: b.center.z += h; break;
        case 3: b.length += h; break;
        case 4: b.width += h; break;
        case 5: b.height += h; break;
        default: b.yaw += h; break;
      }
    };

    const double h3 = 1e-6;
    bool fd_ok = true;
    for (std::size_t p = 0; p < t.boxes.size() && fd_ok; ++p) {
      for (int k = 0; k < 7 && fd_ok; ++k) {
        auto plus = t.boxes;
        auto minus = t.boxes;
        bump3d(plus[p], k, h3);
        bump3d(minus[p], k, -h3);
        bool ok_p = false, ok_m = false;
        const double fp_ = scene_total(plus, t.logits, &ok_p);
        const double fm = scene_total(minus, t.logits, &ok_m);
        if (!ok_p || !ok_m) {
          fd_ok = false;
          break;
        }
        check("d(total)/d(box " + std::to_string(p) + " " + kBoxParam[k] + ")",
              sl.grads[p].box[static_cast<std::size_t>(k)], (fp_ - fm) / (2.0 * h3), opt.tol_3d,
              1e-7, rep.max_rel_3d);
      }
      const double hl = 1e-5;
      for (std::size_t k = 0; k < t.logits[p].size() && fd_ok; ++k) {
        auto plus = t.logits;
        auto minus = t.logits;
        plus[p][k] += hl;
        minus[p][k] -= hl;
        bool ok_p = false, ok_m = false;
        const double fp_ = scene_total(t.boxes, plus, &ok_p);
        const double fm = scene_total(t.boxes, minus, &ok_m);
        if (!ok_p || !ok_m) {
          fd_ok = false;
          break;
        }
        check("d(total)/d(box " + std::to_string(p) + " logit " + std::to_string(k) + ")",
              sl.grads[p].logits[k], (fp_ - fm) / (2.0 * hl), opt.tol_2d, 1e-8, rep.max_rel_2d);
      }
    }
    if (!fd_ok) {
      ++rep.excluded;
      out << "trial " << trial << " excluded: visibility flipped inside the difference step\n";
      continue;
    }

    // Image-plane gradients, one camera at a time, against the same loss.
    static constexpr const char* kBox2Param[5] = {"x2d", "y2d", "w2d", "h2d", "depth"};
    for (std::size_t vi = 0; vi < t.views.size(); ++vi) {
      const auto& view = t.views[vi];
      matching::Normalization vn = norm;
      vn.image_height = static_cast<double>(view.camera->height);
      const auto g2 = losses::total_loss_grad_2d(view.assignment, view.preds, view.gts, w, fp, vn);
      auto view_total = [&](const std::vector<losses::Prediction2DLogits>& preds) {
        return losses::total_loss(view.assignment, preds, view.gts, w, fp, vn).total;
      };
      auto bump2d = [](geom::Box2D& b, int k, double h) {
        switch (k) {
          case 0: b.x += h; break;
          case 1: b.y += h; break;
          case 2: b.w += h; break;
          case 3: b.h += h; break;
          default: b.depth += h; break;
        }
      };
      const double h2 = 1e-5;
      for (std::size_t r = 0; r < view.preds.size(); ++r) {
        for (int k = 0; k < 5; ++k) {
          auto plus = view.preds;
          auto minus = view.preds;
          bump2d(plus[r].box, k, h2);
          bump2d(minus[r].box, k, -h2);
          check("view " + std::to_string(vi) + " d(total)/d(row " + std::to_string(r) + " " +
                    kBox2Param[k] + ")",
                g2[r].box[static_cast<std::size_t>(k)],
                (view_total(plus) - view_total(minus)) / (2.0 * h2), opt.tol_2d, 1e-8,
                rep.max_rel_2d);
        }
        for (std::size_t k = 0; k < view.preds[r].logits.size(); ++k) {
          auto plus = view.preds;
          auto minus = view.preds;
          plus[r].logits[k] += h2;
          minus[r].logits[k] -= h2;
          check("view " + std::to_string(vi) + " d(total)/d(row " + std::to_string(r) +
                    " logit " + std::to_string(k) + ")",
                g2[r].logits[k], (view_total(plus) - view_total(minus)) / (2.0 * h2), opt.tol_2d,
                1e-8, rep.max_rel_2d);
        }
      }
    }

    if (failed)
      ++rep.failed;
    else
      ++rep.passed;
  }

  out << "trials " << rep.trials << ": passed " << rep.passed << ", excluded " << rep.excluded
      << ", failed " << rep.failed << "\n";
  out << "max relative error: 3d " << sci(rep.max_rel_3d) << ", 2d "
      << sci(rep.max_rel_2d) << "\n";
  if (rep.excluded * 20 >= rep.trials)
    out << "excluded fraction reached 5%; the sampler is degenerate\n";
  return rep;
}

int cmd_grad_check(const GradCheckOptions& opt, std::ostream& out) {
  return run_grad_check(opt, out).ok() ? 0 : 1;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string svg_num(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

}  // namespace

std::string overlay_svg(const scenegen::Scene& scene, const std::vector<geom::Box3D>& initial,
                        const std::vector<geom::Box3D>& final_boxes) {
  const auto& cams = scene.cameras();
  const int gap = 24, top = 30;
  int total_w = 0, max_h = 0;
  for (const auto& c : cams) {
    total_w += c.width;
    max_h = std::max(max_h, c.height);
  }
  if (!cams.empty()) total_w += gap * static_cast<int>(cams.size() - 1);
  const int total_h = top + max_h;

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 " + std::to_string(total_w) +
       " " + std::to_string(total_h) + "\" width=\"" + std::to_string(total_w / 4) +
       "\" height=\"" + std::to_string(total_h / 4) + "\" font-family=\"monospace\">\n";
  s += "  <rect x=\"0\" y=\"0\" width=\"" + std::to_string(total_w) + "\" height=\"" +
       std::to_string(total_h) + "\" fill=\"#fafafa\"/>\n";
  s += "  <text x=\"4\" y=\"20\" font-size=\"18\" fill=\"#333333\">scene " +
       std::to_string(scene.id()) + "</text>\n";
  s += "  <text x=\"160\" y=\"20\" font-size=\"18\" fill=\"#1faa3c\">gt</text>\n";
  s += "  <text x=\"220\" y=\"20\" font-size=\"18\" fill=\"#d12f2f\">initial</text>\n";
  s += "  <text x=\"340\" y=\"20\" font-size=\"18\" fill=\"#1f5fd1\">final</text>\n";

  int x0 = 0;
  for (std::size_t ci = 0; ci < cams.size(); ++ci) {
    const geom::Camera& cam = cams[ci];
    const std::string w = std::to_string(cam.width), h = std::to_string(cam.height);
    s += "  <g transform=\"translate(" + std::to_string(x0) + "," + std::to_string(top) +
         ")\">\n";
    s += "    <clipPath id=\"clip" + std::to_string(ci) + "\"><rect x=\"0\" y=\"0\" width=\"" +
         w + "\" height=\"" + h + "\"/></clipPath>\n";
    s += "    <rect x=\"0\" y=\"0\" width=\"" + w + "\" height=\"" + h +
         "\" fill=\"#ffffff\" stroke=\"#555555\"/>\n";
    s += "    <text x=\"4\" y=\"-6\" font-size=\"15\" fill=\"#333333\">" + xml_escape(cam.id) +
         "</text>\n";
    s += "    <g clip-path=\"url(#clip" + std::to_string(ci) + ")\" fill=\"none\">\n";
    auto add_boxes = [&](const std::vector<geom::Box3D>& boxes, const char* stroke,
                         const char* dash) {
      for (const geom::Box3D& b : boxes) {
        if (const auto bb = geom::project_box(cam, b)) {
          s += "      <rect x=\"" + svg_num(bb->x_min()) + "\" y=\"" + svg_num(bb->y_min()) +
               "\" width=\"" +
               svg_num(bb->w) + "\" height=\"" + svg_num(bb->h) + "\" stroke=\"" + stroke +
               "\" stroke-width=\"3\"";
          if (dash != nullptr) s += " stroke-dasharray=\"" + std::string(dash) + "\"";
          s += "/>\n";
        }
      }
    };
    add_boxes(scene.gt3d_eval_only(), "#1faa3c", nullptr);
    add_boxes(initial, "#d12f2f", "10 7");
    add_boxes(final_boxes, "#1f5fd1", nullptr);
    s += "    </g>\n  </g>\n";
    x0 += cam.width + gap;
  }
  s += "</svg>\n";
  return s;
}

int cmd_finetune(const FinetuneOptions& opt, std::ostream& out) {
  if (opt.dataset_dir.empty()) throw ConfigError("finetune: --dataset is required");
  if (opt.out_dir.empty()) throw ConfigError("finetune: --out is required");
  RunConfig rc;
  if (!opt.config_file.empty()) rc = load_run_config(opt.config_file);
  finetune::TrainConfig tc = rc.train;
  if (opt.lr) tc.base_lr = *opt.lr;
  if (opt.epochs) tc.epochs = *opt.epochs;
  if (opt.mix) tc.mix = *opt.mix;
  if (opt.max_steps) tc.max_steps = *opt.max_steps;
  if (opt.grad_clip) tc.grad_clip = *opt.grad_clip;
  if (opt.seed) tc.seed = *opt.seed;
  if (opt.cosine) tc.cosine = *opt.cosine;

  const scenegen::Dataset ds = scenegen::read_dataset(opt.dataset_dir);
  finetune::ToyDetector det(ds);
  const finetune::ToyDetector initial = det;
  const double med0 = finetune::median_center_error(det, ds);

  std::vector<std::string> warnings;
  const finetune::History hist = finetune::finetune(det, ds, tc, &warnings);
  const metrics::MetricReport rep1 = finetune::evaluate(det, ds);
  const double med1 = finetune::median_center_error(det, ds);

  fs::create_directories(opt.out_dir);
  write_text_file(opt.out_dir / "history.csv", hist.to_csv());
  write_text_file(opt.out_dir / "metrics_initial.csv",
                  finetune::evaluate(initial, ds).to_csv());
  write_text_file(opt.out_dir / "metrics_final.csv", rep1.to_csv());
  write_text_file(opt.out_dir / "params_final.json", det.to_json());
  int n_overlays = 0;
  if (opt.overlays) {
    fs::create_directories(opt.out_dir / "overlays");
    for (const scenegen::Scene& sc : ds.scenes) {
      char name[32];
      std::snprintf(name, sizeof(name), "scene_%03d.svg", sc.id());
      write_text_file(opt.out_dir / "overlays" / name,
                      overlay_svg(sc, initial.boxes(sc.id()), det.boxes(sc.id())));
      ++n_overlays;
    }
  }

  const int n3d = ds.full3d_count();
  out << "fine-tuned " << ds.scenes.size() << " scenes ("
      << ds.scenes.size() - static_cast<std::size_t>(n3d) << " only2d train, " << n3d
      << " full3d eval), " << hist.rows.size() - 1 << " epochs\n";
  const finetune::HistoryRow& first = hist.rows.front();
  const finetune::HistoryRow& last = hist.rows.back();
  out << "  initial: mAP " << f4(first.map) << " NDS " << f4(first.nds)
      << " median center error " << f4(med0) << " m\n";
  out << "  final:   mAP " << f4(last.map) << " NDS " << f4(last.nds)
      << " median center error " << f4(med1) << " m\n";
  for (const std::string& w : warnings) out << "  warning: " << w << "\n";
  out << "wrote history.csv, metrics_initial.csv, metrics_final.csv, params_final.json and "
      << n_overlays << " overlays under " << opt.out_dir.string() << "\n";
  return 0;
}

int cmd_eval(const EvalOptions& opt, std::ostream& out) {
  if (opt.dataset_dir.empty()) throw ConfigError("eval: --dataset is required");
  RunConfig rc;
  if (!opt.config_file.empty()) rc = load_run_config(opt.config_file);
  const scenegen::Dataset ds = scenegen::read_dataset(opt.dataset_dir);
  const finetune::ToyDetector det =
      opt.params_file.empty() ? finetune::ToyDetector(ds)
                              : finetune::ToyDetector::from_json(read_text_file(opt.params_file));
  if (det.scene_count() != static_cast<int>(ds.scenes.size()))
    throw Error("eval: params file covers " + std::to_string(det.scene_count()) +
                " scenes but the dataset has " + std::to_string(ds.scenes.size()));

  metrics::MetricConfig mc = rc.metrics;
  mc.class_names = ds.class_names();
  const int n3d = ds.full3d_count();
  std::vector<std::vector<geom::Box3D>> preds, gts;
  for (int id = 0; id < n3d; ++id) {
    preds.push_back(det.boxes(id));
    gts.push_back(ds.scenes[static_cast<std::size_t>(id)].gt3d());
  }
  const metrics::MetricReport rep = metrics::evaluate_detections(preds, gts, mc);
  out << "evaluated " << n3d << " full3d scenes"
      << (opt.params_file.empty() ? " with the score-initialized detector" : "") << "\n";
  out << rep.to_text();
  if (!opt.out_csv.empty()) {
    write_text_file(opt.out_csv, rep.to_csv());
    out << "wrote " << opt.out_csv.string() << "\n";
  }
  return 0;
}

}  // namespace bevtune::cli
