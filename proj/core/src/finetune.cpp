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

#include "bevtune/finetune.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "json.hpp"

#include "bevtune/depth.hpp"
#include "bevtune/errors.hpp"
#include "bevtune/rng.hpp"

namespace bevtune::finetune {

using ordered_json = nlohmann::ordered_json;

ToyDetector::ToyDetector(const scenegen::Dataset& ds) {
  n_classes_ = static_cast<int>(ds.manifest.config.gen.classes.size());
  params_.resize(ds.scenes.size());
  for (const scenegen::Scene& s : ds.scenes) {
    auto& scene_params = params_[static_cast<std::size_t>(s.id())];
    for (std::size_t k = 0; k < s.init_preds().size(); ++k) {
      const geom::Box3D& b = s.init_preds()[k];
      BoxParams p;
      p.center = b.center;
      p.length = b.length;
      p.width = b.width;
      p.height = b.height;
      p.yaw = b.yaw;
      p.vx = b.vx;
      p.vy = b.vy;
      p.attribute_id = b.attribute_id;
      p.source_gt = s.init_pred_source()[k];
      p.logits.assign(n_classes_ + 1, 0.0);
      const double p0 = std::clamp(b.score, 0.05, 0.95);
      p.logits[b.class_id] = std::log(n_classes_ * p0 / (1.0 - p0));
      scene_params.push_back(std::move(p));
    }
  }
}

std::vector<BoxParams>& ToyDetector::params(int scene) {
  if (scene < 0 || scene >= scene_count())
    throw std::out_of_range("ToyDetector::params: scene index out of range");
  return params_[static_cast<std::size_t>(scene)];
}

const std::vector<BoxParams>& ToyDetector::params(int scene) const {
  if (scene < 0 || scene >= scene_count())
    throw std::out_of_range("ToyDetector::params: scene index out of range");
  return params_[static_cast<std::size_t>(scene)];
}

std::vector<geom::Box3D> ToyDetector::boxes(int scene) const {
  const auto& ps = params(scene);
  std::vector<geom::Box3D> out;
  out.reserve(ps.size());
  for (const BoxParams& p : ps) {
    geom::Box3D b;
    b.center = p.center;
    b.length = p.length;
    b.width = p.width;
    b.height = p.height;
    b.yaw = p.yaw;
    b.vx = p.vx;
    b.vy = p.vy;
    b.attribute_id = p.attribute_id;
    const auto probs = losses::softmax(p.logits);
    int best = 0;
    for (int k = 1; k < n_classes_; ++k)
      if (probs[k] > probs[best]) best = k;
    b.class_id = best;
    b.score = probs[best];
    out.push_back(b);
  }
  return out;
}

std::string ToyDetector::to_json() const {
  ordered_json j;
  j["version"] = 1;
  j["num_classes"] = n_classes_;
  j["scenes"] = ordered_json::array();
  for (const auto& scene_params : params_) {
    ordered_json arr = ordered_json::array();
    for (const BoxParams& p : scene_params) {
      ordered_json pj;
      pj["center"] = {p.center.x, p.center.y, p.center.z};
      pj["dims"] = {p.length, p.width, p.height};
      pj["yaw"] = p.yaw;
      pj["vel"] = {p.vx, p.vy};
      pj["attribute"] = p.attribute_id;
      pj["logits"] = p.logits;
      pj["src"] = p.source_gt;
      arr.push_back(std::move(pj));
    }
    j["scenes"].push_back(std::move(arr));
  }
  return j.dump(2) + "\n";
}

ToyDetector ToyDetector::from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("detector params: " + std::string(e.what()), e.byte);
  }
  ToyDetector det;
  try {
    const int version = j.at("version").get<int>();
    if (version != 1)
      throw UnsupportedVersion("detector params: version " + std::to_string(version) +
                               " unsupported (expected 1)");
    det.n_classes_ = j.at("num_classes").get<int>();
    if (det.n_classes_ < 1) throw FormatError("detector params: num_classes < 1", 0);
    for (const auto& sj : j.at("scenes")) {
      std::vector<BoxParams> scene_params;
      for (const auto& pj : sj) {
        BoxParams p;
        p.center = {pj.at("center").at(0).get<double>(), pj.at("center").at(1).get<double>(),
                    pj.at("center").at(2).get<double>()};
        p.length = pj.at("dims").at(0).get<double>();
        p.width = pj.at("dims").at(1).get<double>();
        p.height = pj.at("dims").at(2).get<double>();
        p.yaw = pj.at("yaw").get<double>();
        p.vx = pj.at("vel").at(0).get<double>();
        p.vy = pj.at("vel").at(1).get<double>();
        p.attribute_id = pj.at("attribute").get<int>();
        p.logits = pj.at("logits").get<std::vector<double>>();
        p.source_gt = pj.at("src").get<int>();
        if (static_cast<int>(p.logits.size()) != det.n_classes_ + 1)
          throw FormatError("detector params: logits size != num_classes + 1", 0);
        if (p.length <= 0.0 || p.width <= 0.0 || p.height <= 0.0)
          throw FormatError("detector params: non-positive dims", 0);
        scene_params.push_back(std::move(p));
      }
      det.params_.push_back(std::move(scene_params));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("detector params: " + std::string(e.what()), 0);
  }
  return det;
}

SceneViews build_scene_views(const ToyDetector& det, const scenegen::Scene& scene,
                             const TrainConfig& cfg) {
  const auto boxes = det.boxes(scene.id());
  const auto& params = det.params(scene.id());
  SceneViews out;
  for (std::size_t c = 0; c < scene.cameras().size(); ++c) {
    const geom::Camera& cam = scene.cameras()[c];
    losses::CameraView view;
    view.camera = &cam;
    std::vector<matching::Prediction2D> mpreds;
    for (std::size_t p = 0; p < boxes.size(); ++p) {
      if (const auto bb = geom::project_box(cam, boxes[p])) {
        view.box_index.push_back(static_cast<int>(p));
        view.preds.push_back({*bb, params[p].logits});
        mpreds.push_back({*bb, losses::softmax(params[p].logits)});
      }
    }
    if (view.preds.empty()) continue;

    for (std::size_t a = 0; a < scene.ann2d()[c].size(); ++a) {
      const scenegen::Ann2D& ann = scene.ann2d()[c][a];
      double d = 0.0;
      try {
        d = depth::box_depth_from_map(scene.depth_maps()[c], ann.box);
      } catch (const NoDepth&) {
        out.warnings.push_back("scene " + std::to_string(scene.id()) + " camera " + cam.id +
                               ": annotation " + std::to_string(a) +
                               " has no depth support; skipped");
        continue;
      }
      geom::Box2D gb = ann.box;
      gb.depth = d;
      view.gts.push_back({gb, ann.class_id});
    }

    if (view.gts.empty()) {
      // Background-only view: every visible prediction is unmatched.
      view.assignment.unmatched_preds.resize(view.preds.size());
      std::iota(view.assignment.unmatched_preds.begin(), view.assignment.unmatched_preds.end(),
                0);
    } else {
      matching::Normalization norm = cfg.norm;
      norm.image_height = static_cast<double>(cam.height);
      const auto cost = matching::build_cost_matrix(mpreds, view.gts, cfg.cost_weights, norm);
      view.assignment = matching::hungarian(cost);
    }
    out.views.push_back(std::move(view));
  }
  return out;
}

namespace {

double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

void apply_update(BoxParams& p, const losses::Grad3D& g, double lr, double grad_clip) {
  double scale = 1.0;
  if (grad_clip > 0.0) {
    double sq = 0.0;
    for (double v : g.box) sq += v * v;
    for (double v : g.logits) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > grad_clip) scale = grad_clip / norm;
  }
  const double s = lr * scale;
  p.center.x -= s * g.box[0];
  p.center.y -= s * g.box[1];
  p.center.z -= s * g.box[2];
  p.length = std::max(0.1, p.length - s * g.box[3]);
  p.width = std::max(0.1, p.width - s * g.box[4]);
  p.height = std::max(0.1, p.height - s * g.box[5]);
  p.yaw = geom::wrap_angle(p.yaw - s * g.box[6]);
  for (std::size_t k = 0; k < g.logits.size(); ++k) p.logits[k] -= s * g.logits[k];
}

StepResult run_2d(const ToyDetector& det, const scenegen::Scene& scene, const TrainConfig& cfg,
                  ToyDetector* mutable_det, double lr) {
  if (scene.label_mode() != scenegen::LabelMode::only2d)
    throw std::invalid_argument("step_2d: scene carries 3D labels; use step_3d");
  StepResult res;
  SceneViews bv = build_scene_views(det, scene, cfg);
  res.warnings = std::move(bv.warnings);
  if (bv.views.empty()) {
    res.skipped = true;
    res.warnings.push_back("scene " + std::to_string(scene.id()) +
                           ": zero visible predictions; no update");
    return res;
  }
  const auto boxes = det.boxes(scene.id());
  const losses::SceneLoss sl =
      losses::total_loss_grad_3d(boxes, bv.views, cfg.loss_weights, cfg.focal, cfg.norm);
  res.breakdown = sl.breakdown;
  if (mutable_det != nullptr) {
    auto& params = mutable_det->params(scene.id());
    for (std::size_t p = 0; p < params.size(); ++p)
      if (sl.grads[p].visible_anywhere)
        apply_update(params[p], sl.grads[p], lr, cfg.grad_clip);
  }
  return res;
}

StepResult run_3d(const ToyDetector& det, const scenegen::Scene& scene, const TrainConfig& cfg,
                  ToyDetector* mutable_det, double lr) {
  if (scene.label_mode() != scenegen::LabelMode::full3d)
    throw std::invalid_argument("step_3d: scene carries no 3D labels; use step_2d");
  StepResult res;
  const auto& gts = scene.gt3d();
  const auto& params = det.params(scene.id());
  if (params.empty()) {
    res.skipped = true;
    res.warnings.push_back("scene " + std::to_string(scene.id()) +
                           ": no predictions; no update");
    return res;
  }

  const int n = static_cast<int>(params.size());
  const int m = static_cast<int>(gts.size());
  matching::Assignment asg;
  if (m == 0) {
    asg.unmatched_preds.resize(n);
    std::iota(asg.unmatched_preds.begin(), asg.unmatched_preds.end(), 0);
  } else {
    matching::CostMatrix cost(n, m);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j)
        cost.at(i, j) = geom::norm(params[i].center - gts[j].center);
    asg = matching::hungarian(cost);
  }

  const int background = det.num_classes();
  const double cls_scale = cfg.loss_weights.cls / n;
  const double reg_scale =
      asg.pairs.empty() ? 0.0 : cfg.loss_weights.reg / static_cast<double>(asg.pairs.size());

  std::vector<losses::Grad3D> grads(params.size());
  for (std::size_t p = 0; p < params.size(); ++p)
    grads[p].logits.assign(params[p].logits.size(), 0.0);

  double cls_sum = 0.0, reg_sum = 0.0;
  auto focal_term = [&](int i, int target) {
    const auto probs = losses::softmax(params[i].logits);
    cls_sum += losses::focal_loss(probs[target], cfg.focal);
    const double dldp = cls_scale * losses::focal_loss_dp(probs[target], cfg.focal);
    for (std::size_t k = 0; k < probs.size(); ++k) {
      const double dp = probs[target] * ((static_cast<int>(k) == target ? 1.0 : 0.0) - probs[k]);
      grads[i].logits[k] += dldp * dp;
    }
  };

  for (const auto& [i, j] : asg.pairs) {
    const BoxParams& p = params[i];
    const geom::Box3D& g = gts[j];
    const double dx = p.center.x - g.center.x;
    const double dy = p.center.y - g.center.y;
    const double dz = p.center.z - g.center.z;
    const double dl = p.length - g.length;
    const double dw = p.width - g.width;
    const double dh = p.height - g.height;
    const double dyaw = geom::wrap_angle(p.yaw - g.yaw);
    reg_sum += (std::abs(dx) + std::abs(dy) + std::abs(dz)) / 10.0 +
               (std::abs(dl) + std::abs(dw) + std::abs(dh)) / 10.0 +
               std::abs(dyaw) / geom::kPi;
    grads[i].box[0] += reg_scale * sgn(dx) / 10.0;
    grads[i].box[1] += reg_scale * sgn(dy) / 10.0;
    grads[i].box[2] += reg_scale * sgn(dz) / 10.0;
    grads[i].box[3] += reg_scale * sgn(dl) / 10.0;
    grads[i].box[4] += reg_scale * sgn(dw) / 10.0;
    grads[i].box[5] += reg_scale * sgn(dh) / 10.0;
    grads[i].box[6] += reg_scale * sgn(dyaw) / geom::kPi;
    focal_term(i, g.class_id);
  }
  for (int i : asg.unmatched_preds) focal_term(i, background);

  res.breakdown.cls = cls_sum / n;
  res.breakdown.reg = asg.pairs.empty() ? 0.0 : reg_sum / static_cast<double>(asg.pairs.size());
  res.breakdown.iou = 0.0;
  res.breakdown.total =
      cfg.loss_weights.cls * res.breakdown.cls + cfg.loss_weights.reg * res.breakdown.reg;
  res.breakdown.matched = static_cast<int>(asg.pairs.size());
  res.breakdown.background = static_cast<int>(asg.unmatched_preds.size());

  if (mutable_det != nullptr) {
    auto& mp = mutable_det->params(scene.id());
    for (std::size_t p = 0; p < mp.size(); ++p) apply_update(mp[p], grads[p], lr, cfg.grad_clip);
  }
  return res;
}

}  // namespace

StepResult step_2d(ToyDetector& det, const scenegen::Scene& scene, const TrainConfig& cfg,
                   double lr) {
  return run_2d(det, scene, cfg, &det, lr);
}

StepResult step_3d(ToyDetector& det, const scenegen::Scene& scene, const TrainConfig& cfg,
                   double lr) {
  return run_3d(det, scene, cfg, &det, lr);
}

StepResult measure_2d(const ToyDetector& det, const scenegen::Scene& scene,
                      const TrainConfig& cfg) {
  return run_2d(det, scene, cfg, nullptr, 0.0);
}

StepResult measure_3d(const ToyDetector& det, const scenegen::Scene& scene,
                      const TrainConfig& cfg) {
  return run_3d(det, scene, cfg, nullptr, 0.0);
}

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

std::string History::to_csv() const {
  std::string out = "epoch,lr,l_cls,l_reg,l_iou,total,mAP,NDS,mATE,mASE,mAOE,mAVE,mAAE\n";
  for (const HistoryRow& r : rows) {
    out += std::to_string(r.epoch);
    for (double v : {r.lr, r.l_cls, r.l_reg, r.l_iou, r.total, r.map, r.nds, r.mate, r.mase,
                     r.maoe, r.mave, r.maae})
      out += "," + fmt(v);
    out += "\n";
  }
  return out;
}

metrics::MetricConfig make_metric_config(const scenegen::Dataset& ds) {
  metrics::MetricConfig mc;
  mc.class_names = ds.class_names();
  return mc;
}

metrics::MetricReport evaluate(const ToyDetector& det, const scenegen::Dataset& ds) {
  if (det.scene_count() != static_cast<int>(ds.scenes.size()))
    throw std::invalid_argument("evaluate: detector and dataset scene counts differ");
  const int n3d = ds.full3d_count();
  std::vector<std::vector<geom::Box3D>> preds, gts;
  preds.reserve(n3d);
  gts.reserve(n3d);
  for (int id = 0; id < n3d; ++id) {
    preds.push_back(det.boxes(id));
    gts.push_back(ds.scenes[static_cast<std::size_t>(id)].gt3d());
  }
  return metrics::evaluate_detections(preds, gts, make_metric_config(ds));
}

double median_center_error(const ToyDetector& det, const scenegen::Dataset& ds) {
  if (det.scene_count() != static_cast<int>(ds.scenes.size()))
    throw std::invalid_argument("median_center_error: detector and dataset differ");
  std::vector<double> errs;
  for (const scenegen::Scene& s : ds.scenes) {
    const auto& gt = s.gt3d_eval_only();
    for (const BoxParams& p : det.params(s.id()))
      if (p.source_gt >= 0)
        errs.push_back(geom::norm(p.center - gt[static_cast<std::size_t>(p.source_gt)].center));
  }
  if (errs.empty()) throw Error("median_center_error: no boxes trace back to a gt");
  std::sort(errs.begin(), errs.end());
  const std::size_t k = errs.size() / 2;
  if (errs.size() % 2 == 1) return errs[k];
  return 0.5 * (errs[k - 1] + errs[k]);
}

namespace {

struct LossAccum {
  losses::LossBreakdown sum;
  int n = 0;

  void add(const losses::LossBreakdown& b) {
    sum.cls += b.cls;
    sum.reg += b.reg;
    sum.iou += b.iou;
    sum.total += b.total;
    ++n;
  }

  losses::LossBreakdown mean() const {
    losses::LossBreakdown m;
    if (n == 0) return m;
    m.cls = sum.cls / n;
    m.reg = sum.reg / n;
    m.iou = sum.iou / n;
    m.total = sum.total / n;
    return m;
  }
};

void take_warnings(std::vector<std::string>* sink, std::vector<std::string>&& w) {
  if (sink == nullptr) return;
  for (std::string& s : w) sink->push_back(std::move(s));
}

}  // namespace

History finetune(ToyDetector& det, const scenegen::Dataset& ds, const TrainConfig& cfg,
                 std::vector<std::string>* warnings) {
  if (!(cfg.base_lr > 0.0)) throw ConfigError("finetune: base_lr must be positive");
  if (cfg.epochs < 0) throw ConfigError("finetune: epochs must be >= 0");
  if (cfg.mix < 0.0 || cfg.mix > 1.0) throw ConfigError("finetune: mix outside [0, 1]");
  if (cfg.max_steps < 0) throw ConfigError("finetune: max_steps must be >= 0");
  if (cfg.grad_clip < 0.0) throw ConfigError("finetune: grad_clip must be >= 0");
  if (det.scene_count() != static_cast<int>(ds.scenes.size()))
    throw std::invalid_argument("finetune: detector and dataset scene counts differ");

  std::vector<int> ids2d, ids3d;
  for (const scenegen::Scene& s : ds.scenes)
    (s.label_mode() == scenegen::LabelMode::only2d ? ids2d : ids3d).push_back(s.id());

  int draws3d = 0;
  if (!ids3d.empty() && cfg.mix > 0.0) {
    if (cfg.mix >= 1.0)
      draws3d = static_cast<int>(ids3d.size());
    else
      draws3d = std::max(
          1, static_cast<int>(std::lround(ids2d.size() * cfg.mix / (1.0 - cfg.mix))));
  }
  const long steps_per_epoch = static_cast<long>(ids2d.size()) + draws3d;
  long total_steps = cfg.epochs * steps_per_epoch;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, static_cast<long>(cfg.max_steps));

  History hist;
  auto snapshot = [&](int epoch, double lr, const LossAccum& a2d, const LossAccum& a3d) {
    const auto rep = evaluate(det, ds);
    const losses::LossBreakdown mean = a2d.n > 0 ? a2d.mean() : a3d.mean();
    HistoryRow row;
    row.epoch = epoch;
    row.lr = lr;
    row.l_cls = mean.cls;
    row.l_reg = mean.reg;
    row.l_iou = mean.iou;
    row.total = mean.total;
    row.map = rep.map;
    row.nds = rep.nds_value;
    row.mate = rep.mean_tp.ate;
    row.mase = rep.mean_tp.ase;
    row.maoe = rep.mean_tp.aoe;
    row.mave = rep.mean_tp.ave;
    row.maae = rep.mean_tp.aae;
    hist.rows.push_back(row);
  };

  {
    LossAccum init2d, init3d;
    for (int id : ids2d) {
      StepResult r = measure_2d(det, ds.scenes[static_cast<std::size_t>(id)], cfg);
      take_warnings(warnings, std::move(r.warnings));
      if (!r.skipped) init2d.add(r.breakdown);
    }
    if (init2d.n == 0)
      for (int id : ids3d) {
        StepResult r = measure_3d(det, ds.scenes[static_cast<std::size_t>(id)], cfg);
        take_warnings(warnings, std::move(r.warnings));
        if (!r.skipped) init3d.add(r.breakdown);
      }
    snapshot(0, 0.0, init2d, init3d);
  }

  long gstep = 0;
  for (int e = 1; e <= cfg.epochs && gstep < total_steps; ++e) {
    std::vector<int> visits = ids2d;
    for (int k = 0; k < draws3d; ++k)
      visits.push_back(ids3d[static_cast<std::size_t>(k) % ids3d.size()]);
    SplitMix64 shuffler(derive_seed(cfg.seed, static_cast<std::uint64_t>(e)));
    shuffler.shuffle(visits);

    double first_lr = 0.0;
    bool first = true;
    LossAccum a2d, a3d;
    for (int id : visits) {
      if (gstep >= total_steps) break;
      const double lr =
          cfg.cosine ? cfg.base_lr * 0.5 *
                           (1.0 + std::cos(geom::kPi * static_cast<double>(gstep) /
                                           static_cast<double>(total_steps)))
                     : cfg.base_lr;
      if (first) {
        first_lr = lr;
        first = false;
      }
      const scenegen::Scene& scene = ds.scenes[static_cast<std::size_t>(id)];
      StepResult r = scene.label_mode() == scenegen::LabelMode::only2d
                         ? step_2d(det, scene, cfg, lr)
                         : step_3d(det, scene, cfg, lr);
      take_warnings(warnings, std::move(r.warnings));
      if (!r.skipped)
        (scene.label_mode() == scenegen::LabelMode::only2d ? a2d : a3d).add(r.breakdown);
      ++gstep;
    }
    snapshot(e, first_lr, a2d, a3d);
  }
  return hist;
}

}  // namespace bevtune::finetune
