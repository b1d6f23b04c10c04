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

#include <array>
#include <span>
#include <vector>

#include "bevtune/geometry.hpp"
#include "bevtune/matching.hpp"

namespace bevtune::losses {

struct LossWeights {
  double cls = 2.0;
  double reg = 0.75;
  double iou = 0.25;
};

struct FocalParams {
  double alpha = 0.25;
  double gamma = 2.0;
};

// Probabilities are clamped to [kMinProb, 1] inside the focal loss.
inline constexpr double kMinProb = 1e-7;

std::vector<double> softmax(std::span<const double> logits);

// -alpha * (1 - p)^gamma * log(p).
double focal_loss(double p, const FocalParams& fp = {});

// d(focal)/dp; zero on the clamped region below kMinProb.
double focal_loss_dp(double p, const FocalParams& fp = {});

// Same term as matching::regression_cost; kept as one implementation.
double l1_regression_loss(const geom::Box2D& pred, const geom::Box2D& gt,
                          const matching::Normalization& norm);

// d/d(pred x, y, w, h, depth); subgradient 0 at the kinks.
std::array<double, 5> l1_regression_grad(const geom::Box2D& pred, const geom::Box2D& gt,
                                         const matching::Normalization& norm);

double iou(const geom::Box2D& a, const geom::Box2D& b);
double giou(const geom::Box2D& a, const geom::Box2D& b);  // in (-1, 1]
double giou_loss(const geom::Box2D& a, const geom::Box2D& b);  // 1 - giou

// d(giou_loss)/d(pred x, y, w, h). Edge selections tied between the two
// boxes resolve to the prediction's edge.
std::array<double, 4> giou_grad(const geom::Box2D& pred, const geom::Box2D& gt);

// Smallest margin (pixels; meters for the depth slot) to any subgradient
// kink of the pair losses: L1 sign flips, intersection/hull edge switches,
// intersection collapse. Difference checks exclude pairs below a threshold.
double pair_kink_margin(const geom::Box2D& pred, const geom::Box2D& gt);

struct Prediction2DLogits {
  geom::Box2D box;
  std::vector<double> logits;  // classes + trailing background slot
};

struct LossBreakdown {
  double cls = 0.0, reg = 0.0, iou = 0.0;
  double total = 0.0;
  int matched = 0;     // pairs contributing reg/iou terms
  int background = 0;  // unmatched predictions pushed toward the background slot
};

// cls: mean focal over every prediction (matched ones toward the gt class,
// unmatched ones toward the background slot). reg/iou: means over matched
// pairs (zero when there are none). total = w.cls*cls + w.reg*reg + w.iou*iou.
// Throws EmptyMatch when the assignment has no pairs and no unmatched
// predictions.
LossBreakdown total_loss(const matching::Assignment& assignment,
                         std::span<const Prediction2DLogits> preds,
                         std::span<const matching::GroundTruth2D> gts,
                         const LossWeights& w, const FocalParams& fp,
                         const matching::Normalization& norm);

struct Grad2D {
  std::array<double, 5> box{};  // x, y, w, h, depth
  std::vector<double> logits;
};

// Gradient of total_loss(...).total for each prediction, with the
// assignment held fixed.
std::vector<Grad2D> total_loss_grad_2d(const matching::Assignment& assignment,
                                       std::span<const Prediction2DLogits> preds,
                                       std::span<const matching::GroundTruth2D> gts,
                                       const LossWeights& w, const FocalParams& fp,
                                       const matching::Normalization& norm);

struct Grad3D {
  std::array<double, 7> box{};  // cx, cy, cz, length, width, height, yaw
  std::vector<double> logits;
  bool visible_anywhere = false;
};

// One camera's slice of a scene-level matching problem. preds[r] must be the
// projection of boxes[box_index[r]] into *camera, with that box's logits.
struct CameraView {
  const geom::Camera* camera = nullptr;
  std::vector<int> box_index;
  std::vector<Prediction2DLogits> preds;
  std::vector<matching::GroundTruth2D> gts;
  matching::Assignment assignment;
};

struct SceneLoss {
  LossBreakdown breakdown;      // per-camera breakdowns summed
  std::vector<Grad3D> grads;    // one per entry of `boxes`
};

// Chains total_loss_grad_2d through the box projection jacobian and sums
// over every camera where a box is visible. Boxes visible nowhere get a zero
// gradient and visible_anywhere = false. norm.image_height is replaced by
// each view's own camera height; norm.max_depth is used as given.
SceneLoss total_loss_grad_3d(std::span<const geom::Box3D> boxes,
                             std::span<const CameraView> views,
                             const LossWeights& w, const FocalParams& fp,
                             const matching::Normalization& norm);

}  // namespace bevtune::losses
