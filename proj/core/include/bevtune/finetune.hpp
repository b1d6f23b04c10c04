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

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bevtune/geometry.hpp"
#include "bevtune/losses.hpp"
#include "bevtune/matching.hpp"
#include "bevtune/metrics.hpp"
#include "bevtune/scenegen.hpp"

namespace bevtune::finetune {

// One learnable 3D box. Velocity and attribute ride along untouched: neither
// supervision path reaches them.
struct BoxParams {
  geom::Vec3 center;
  double length = 1.0, width = 1.0, height = 1.0;
  double yaw = 0.0;
  double vx = 0.0, vy = 0.0;
  int attribute_id = 0;
  std::vector<double> logits;  // classes + trailing background slot
  int source_gt = -1;          // gt index this box was initialized from, -1 spurious
};

// Directly parameterized per-scene boxes standing in for a detection head.
class ToyDetector {
 public:
  ToyDetector() = default;
  // Initializes every scene's parameters from its stored noisy predictions.
  // The class logit is set so the softmax class probability equals the
  // prediction score (clamped to [0.05, 0.95]); other logits start at zero.
  explicit ToyDetector(const scenegen::Dataset& ds);

  int scene_count() const { return static_cast<int>(params_.size()); }
  int num_classes() const { return n_classes_; }

  std::vector<BoxParams>& params(int scene);
  const std::vector<BoxParams>& params(int scene) const;

  // Current detections: class = argmax over the real class logits, score =
  // softmax probability of that class.
  std::vector<geom::Box3D> boxes(int scene) const;

  std::string to_json() const;
  // Throws UnsupportedVersion or FormatError on malformed input.
  static ToyDetector from_json(const std::string& text);

 private:
  int n_classes_ = 0;
  std::vector<std::vector<BoxParams>> params_;
};

struct TrainConfig {
  double base_lr = 5e-2;
  bool cosine = true;      // cosine annealing from base_lr to 0 over all steps
  int epochs = 6;          // 0 = evaluate only
  double mix = 0.5;        // fraction of per-epoch steps that use 3D labels
  int max_steps = 0;       // cap on total update steps; 0 = no cap
  double grad_clip = 1.0;  // cap on each box's gradient L2 norm; 0 = off.
                           // Projection jacobians grow like 1/z^2 near a camera,
                           // so one unlucky step can otherwise throw a box far
                           // out of the scene.
  std::uint64_t seed = 0;
  losses::LossWeights loss_weights;
  losses::FocalParams focal;
  matching::CostWeights cost_weights;
  // image_height is replaced per camera; max_depth is used as given.
  matching::Normalization norm;
};

struct StepResult {
  losses::LossBreakdown breakdown;
  bool skipped = false;  // no usable supervision; parameters untouched
  std::vector<std::string> warnings;
};

// Per-camera matching problems for one scene: the detector's current boxes
// projected into each camera, annotation depth read off the depth maps, and
// a Hungarian assignment per camera. Cameras where nothing projects are
// omitted; annotations without depth support are skipped with a warning.
struct SceneViews {
  std::vector<losses::CameraView> views;
  std::vector<std::string> warnings;
};
SceneViews build_scene_views(const ToyDetector& det, const scenegen::Scene& scene,
                             const TrainConfig& cfg);

// One gradient-descent update from 2D labels: project the current boxes into
// every camera, extract gt depth from the depth maps, Hungarian-match,
// differentiate the 2D loss back through the projection. Dims are clamped to
// >= 0.1 m and yaw rewrapped after the update. Requires an only2d scene.
StepResult step_2d(ToyDetector& det, const scenegen::Scene& scene, const TrainConfig& cfg,
                   double lr);

// One update from 3D labels: Hungarian on 3D center distance, L1 on
// (center/10, dims/10, yaw/pi) plus focal classification. Requires a full3d
// scene.
StepResult step_3d(ToyDetector& det, const scenegen::Scene& scene, const TrainConfig& cfg,
                   double lr);

// Loss measurement without a parameter update (same code paths).
StepResult measure_2d(const ToyDetector& det, const scenegen::Scene& scene,
                      const TrainConfig& cfg);
StepResult measure_3d(const ToyDetector& det, const scenegen::Scene& scene,
                      const TrainConfig& cfg);

struct HistoryRow {
  int epoch = 0;
  double lr = 0.0;  // learning rate of the epoch's first step
  double l_cls = 0.0, l_reg = 0.0, l_iou = 0.0, total = 0.0;
  double map = 0.0, nds = 0.0;
  double mate = 0.0, mase = 0.0, maoe = 0.0, mave = 0.0, maae = 0.0;
};

struct History {
  std::vector<HistoryRow> rows;
  // Header: epoch,lr,l_cls,l_reg,l_iou,total,mAP,NDS,mATE,mASE,mAOE,mAVE,mAAE
  std::string to_csv() const;
};

// Detection metrics over the full3d evaluation slice (scenes 0..n3d-1),
// always against 3D ground truth: evaluation measures, it does not train.
metrics::MetricConfig make_metric_config(const scenegen::Dataset& ds);
metrics::MetricReport evaluate(const ToyDetector& det, const scenegen::Dataset& ds);

// Median 3D distance between each non-spurious box and the gt it was
// initialized from, measured over every scene. Throws Error when the
// detector has no sourced boxes.
double median_center_error(const ToyDetector& det, const scenegen::Dataset& ds);

// Joint fine-tuning: each epoch visits every only2d scene once plus a number
// of full3d scene draws set by the mix ratio, in a seeded shuffle, with
// cosine-annealed learning rates over the whole run. Row 0 of the history is
// the initial state (lr 0, losses from a measurement sweep); one row follows
// per epoch. Loss columns are epoch means over 2D steps (3D steps when an
// epoch has none). Identical configs and seeds yield identical histories.
History finetune(ToyDetector& det, const scenegen::Dataset& ds, const TrainConfig& cfg,
                 std::vector<std::string>* warnings = nullptr);

}  // namespace bevtune::finetune
