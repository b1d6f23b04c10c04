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

#include <span>
#include <string>
#include <utility>
#include <vector>

#include "bevtune/geometry.hpp"

namespace bevtune::metrics {

// nuScenes-style evaluation settings: AP over BEV center-distance thresholds,
// TP errors at tp_threshold, PR curve clipped below min_recall/min_precision.
struct MetricConfig {
  std::vector<double> thresholds{0.5, 1.0, 2.0, 4.0};
  double tp_threshold = 2.0;
  std::vector<std::string> class_names;  // index = class_id
  double min_recall = 0.1;
  double min_precision = 0.1;
};

struct TPErrors {
  double ate = 0.0;  // BEV center distance, meters
  double ase = 0.0;  // 1 - product of per-dim min/max ratios
  double aoe = 0.0;  // absolute yaw difference after wrapping, radians
  double ave = 0.0;  // velocity L2, m/s
  double aae = 0.0;  // 1 - attribute accuracy
};

// One prediction's contribution to a PR curve.
struct PredLabel {
  double score = 0.0;
  bool tp = false;
};

struct MatchResult {
  std::vector<PredLabel> labels;           // descending score
  std::vector<std::pair<int, int>> pairs;  // (pred index, gt index), original order
};

// Greedy nuScenes-style matching for one class: predictions in descending
// score order each take the nearest unmatched gt within `threshold` meters of
// BEV center distance. Ties in score keep the lower prediction index.
MatchResult match_by_center_distance(std::span<const geom::Box3D> preds,
                                     std::span<const geom::Box3D> gts, double threshold);

// Area under the clipped PR curve, sampled at recalls i/100. The precision at
// recall r is taken from the first prediction reaching recall >= r (zero when
// never reached). Labels must be in descending score order. Returns 0 when
// n_gt == 0, with or without predictions.
double average_precision(std::span<const PredLabel> labels, int n_gt,
                         const MetricConfig& cfg = {});

// Plain mean over every class-threshold cell.
double mean_ap(const std::vector<std::vector<double>>& ap_table);

// Mean per-pair errors for one class's matched (pred, gt) pairs.
TPErrors tp_errors(std::span<const geom::Box3D> preds, std::span<const geom::Box3D> gts,
                   std::span<const std::pair<int, int>> pairs);

// (1/10) * (5 * mAP + sum over the five errors of (1 - min(1, error))).
double nds(double map, const TPErrors& tp);

struct MetricReport {
  MetricConfig config;
  std::vector<std::vector<double>> ap;  // [class][threshold index]
  std::vector<TPErrors> per_class_tp;   // at config.tp_threshold
  std::vector<bool> class_has_tp;       // false: all five errors forced to 1
  TPErrors mean_tp;
  double map = 0.0;
  double nds_value = 0.0;

  std::string to_text() const;
  // Rows of "section,class,threshold,metric,value" (sections ap, tp, summary).
  std::string to_csv() const;
};

// Pools per-scene detections: matching never crosses scene boundaries, PR
// curves are scored globally by descending score. preds and gts must be
// parallel (one entry per scene). Classes with no TPs report every error as 1.
MetricReport evaluate_detections(std::span<const std::vector<geom::Box3D>> preds_per_scene,
                                 std::span<const std::vector<geom::Box3D>> gts_per_scene,
                                 const MetricConfig& cfg);

}  // namespace bevtune::metrics
