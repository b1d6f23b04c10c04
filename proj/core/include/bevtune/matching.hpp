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
#include <utility>
#include <vector>

#include "bevtune/geometry.hpp"

namespace bevtune::matching {

// Weights of the three cost terms in the matching cost matrix.
struct CostWeights {
  double cls = 2.0;
  double reg = 0.75;
  double iou = 0.25;
};

// Shared normalization for the box regression terms: pixel offsets are
// divided by the image height, depth offsets by max_depth (the nuScenes
// evaluation radius by default).
struct Normalization {
  double image_height = 900.0;
  double max_depth = 61.2;
};

struct Prediction2D {
  geom::Box2D box;
  std::vector<double> class_probs;  // simplex over classes, background slot last
};

struct GroundTruth2D {
  geom::Box2D box;
  int class_id = 0;
};

class CostMatrix {
 public:
  CostMatrix(int rows, int cols)
      : rows_(rows), cols_(cols),
        v_(static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols), 0.0) {}

  double& at(int i, int j) { return v_[static_cast<std::size_t>(i) * cols_ + j]; }
  double at(int i, int j) const { return v_[static_cast<std::size_t>(i) * cols_ + j]; }

  int rows() const { return rows_; }
  int cols() const { return cols_; }

 private:
  int rows_, cols_;
  std::vector<double> v_;
};

// 1 - p(gt_class), in [0, 1]. Throws std::out_of_range on a bad class index.
double classification_cost(std::span<const double> class_probs, int gt_class);

// (|dx| + |dy| + |dw| + |dh|) / image_height + |d_depth| / max_depth.
double regression_cost(const geom::Box2D& pred, const geom::Box2D& gt,
                       const Normalization& norm);

// 1 - GIoU(pred, gt), in [0, 2).
double iou_cost(const geom::Box2D& pred, const geom::Box2D& gt);

// C[i][j] = w.cls * cls + w.reg * reg + w.iou * iou. Throws
// std::invalid_argument when either side is empty.
CostMatrix build_cost_matrix(std::span<const Prediction2D> preds,
                             std::span<const GroundTruth2D> gts,
                             const CostWeights& w, const Normalization& norm);

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (pred, gt), ascending pred index
  std::vector<int> unmatched_preds;
  std::vector<int> unmatched_gts;
  double total_cost = 0.0;  // sum of matched entries in pair-list order
};

// Minimum-cost assignment of min(rows, cols) pairs. Among optimal solutions
// the lexicographically smallest pair list is returned, so results are
// deterministic under cost ties.
Assignment hungarian(const CostMatrix& cost);

// Exhaustive oracle with the same tie-break and the same summation order.
// Throws SizeLimit when min(rows, cols) > 8.
Assignment brute_force_assignment(const CostMatrix& cost);

}  // namespace bevtune::matching
