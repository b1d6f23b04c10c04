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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <cmath>
#include <vector>

#include "bevtune/errors.hpp"
#include "bevtune/geometry.hpp"
#include "bevtune/losses.hpp"
#include "bevtune/matching.hpp"
#include "bevtune/rng.hpp"

using namespace bevtune::losses;
using bevtune::EmptyMatch;
using bevtune::SplitMix64;
using bevtune::geom::Box2D;
using bevtune::geom::Box3D;
using bevtune::geom::Camera;
using bevtune::geom::Mat3;
using bevtune::geom::Vec3;
using bevtune::matching::Assignment;
using bevtune::matching::GroundTruth2D;
using bevtune::matching::Normalization;

namespace {

Box2D box(double x, double y, double w, double h, double d = 10.0) {
  return Box2D{x, y, w, h, d};
}

Box2D random_box2d(SplitMix64& rng) {
  return box(rng.uniform(-200, 200), rng.uniform(-200, 200), rng.uniform(5, 120),
             rng.uniform(5, 120), rng.uniform(2, 50));
}

}  // namespace

TEST_CASE("focal loss anchors") {
  CHECK(focal_loss(1.0) == 0.0);
  // alpha * (1-p)^gamma * (-log p) at p = 1/2: 0.25 * 0.25 * ln 2.
  const double expect = 0.25 * 0.25 * std::log(2.0);
  CHECK(std::abs(focal_loss(0.5) - expect) < 1e-12);
  CHECK(std::abs(focal_loss(0.5) - 0.0433217) < 1e-6);
  // gamma = 0, alpha = 1 degrades to plain cross-entropy.
  for (double p : {0.1, 0.37, 0.9}) CHECK(focal_loss(p, {1.0, 0.0}) == doctest::Approx(-std::log(p)));
}

TEST_CASE("focal loss is strictly decreasing and clamps tiny probabilities") {
  double last = focal_loss(1e-4);
  for (double p = 2e-4; p < 1.0; p += 1e-3) {
    const double cur = focal_loss(p);
    CHECK(cur < last);
    last = cur;
  }
  CHECK(std::isfinite(focal_loss(0.0)));
  CHECK(focal_loss(0.0) == focal_loss(kMinProb));
}

TEST_CASE("focal loss derivative matches finite differences") {
  const FocalParams fp;
  for (double p : {0.05, 0.2, 0.5, 0.8, 0.99}) {
    const double h = 1e-7;
    const double fd = (focal_loss(p + h, fp) - focal_loss(p - h, fp)) / (2 * h);
    CHECK(focal_loss_dp(p, fp) == doctest::Approx(fd).epsilon(1e-5));
    CHECK(focal_loss_dp(p, fp) < 0.0);
  }
}

TEST_CASE("softmax is a simplex map and saturates exactly at extreme logits") {
  std::vector<double> logits{0.3, -1.0, 2.0};
  const auto p = softmax(logits);
  double sum = 0.0;
  for (double v : p) {
    CHECK(v > 0.0);
    sum += v;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<double> uniform{1.5, 1.5, 1.5, 1.5};
  for (double v : softmax(uniform)) CHECK(v == doctest::Approx(0.25).epsilon(1e-12));

  // A 40-logit lead rounds to probability exactly 1.0 in double precision;
  // the zero-loss fixed-point tests depend on this.
  std::vector<double> extreme{40.0, 0.0, 0.0};
  CHECK(softmax(extreme)[0] == 1.0);
}

TEST_CASE("l1 regression loss and gradient") {
  const Normalization norm{900.0, 60.0};
  const Box2D a = box(100, 100, 50, 40, 10);
  CHECK(l1_regression_loss(a, a, norm) == 0.0);
  const Box2D b = box(110, 100, 50, 40, 12);
  CHECK(l1_regression_loss(a, b, norm) == doctest::Approx(10.0 / 900 + 2.0 / 60).epsilon(1e-12));

  const auto g = l1_regression_grad(a, b, norm);
  CHECK(g[0] == doctest::Approx(-1.0 / 900.0));  // pred.x below gt.x
  CHECK(g[1] == 0.0);                            // kink: subgradient 0
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);
  CHECK(g[4] == doctest::Approx(-1.0 / 60.0));

  const auto zero = l1_regression_grad(a, a, norm);
  for (double v : zero) CHECK(v == 0.0);
}

TEST_CASE("giou anchors: identical, edge-adjacent, half-overlapping") {
  const Box2D a = box(0, 0, 2, 2);
  CHECK(giou(a, a) == 1.0);
  CHECK(giou_loss(a, a) == 0.0);

  const Box2D adjacent = box(2, 0, 2, 2);
  CHECK(giou(a, adjacent) == doctest::Approx(0.0));
  CHECK(giou_loss(a, adjacent) == doctest::Approx(1.0));

  // I = 2, U = 6, hull E = 6: giou = 1/3.
  const Box2D shifted = box(1, 0, 2, 2);
  CHECK(giou(a, shifted) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(giou_loss(a, shifted) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("giou never exceeds iou and matches it when the hull is the union") {
  SplitMix64 rng(17);
  for (int i = 0; i < 1000; ++i) {
    const Box2D a = random_box2d(rng), b = random_box2d(rng);
    const double g = giou(a, b), v = iou(a, b);
    CHECK(g <= v + 1e-12);
    CHECK(v <= 1.0);
    CHECK(g > -1.0);
  }
  // Nested boxes: union = outer box = hull, so the penalty term vanishes.
  const Box2D outer = box(0, 0, 10, 10), inner = box(1, 1, 2, 2);
  CHECK(giou(outer, inner) == doctest::Approx(iou(outer, inner)).epsilon(1e-12));
}

TEST_CASE("giou is symmetric and translation invariant") {
  SplitMix64 rng(23);
  for (int i = 0; i < 1000; ++i) {
    const Box2D a = random_box2d(rng), b = random_box2d(rng);
    CHECK(giou(a, b) == giou(b, a));
    const double dx = rng.uniform(-500, 500), dy = rng.uniform(-500, 500);
    Box2D at = a, bt = b;
    at.x += dx;
    at.y += dy;
    bt.x += dx;
    bt.y += dy;
    CHECK(std::abs(giou(at, bt) - giou(a, b)) < 1e-9);
  }
}

TEST_CASE("giou gradient is zero at identical boxes and matches differences") {
  const Box2D a = box(40, -25, 30, 18);
  for (double v : giou_grad(a, a)) CHECK(v == 0.0);

  SplitMix64 rng(31);
  int checked = 0;
  while (checked < 200) {
    const Box2D p = random_box2d(rng), g = random_box2d(rng);
    if (pair_kink_margin(p, g) < 1e-3) continue;
    ++checked;
    const auto an = giou_grad(p, g);
    const double h = 1e-6;
    for (int k = 0; k < 4; ++k) {
      Box2D hi = p, lo = p;
      double* fhi[] = {&hi.x, &hi.y, &hi.w, &hi.h};
      double* flo[] = {&lo.x, &lo.y, &lo.w, &lo.h};
      *fhi[k] += h;
      *flo[k] -= h;
      const double fd = (giou_loss(hi, g) - giou_loss(lo, g)) / (2 * h);
      const double scale = std::max({std::abs(fd), std::abs(an[k]), 1e-8});
      CHECK(std::abs(fd - an[k]) / scale < 1e-4);
    }
  }
}

namespace {

// A small fixed matching problem: two matched pairs plus one background
// prediction, probabilities away from saturation.
struct Fixture {
  std::vector<Prediction2DLogits> preds;
  std::vector<GroundTruth2D> gts;
  Assignment assignment;
  Normalization norm{900.0, 61.2};
  LossWeights w;
  FocalParams fp;
};

Fixture make_fixture() {
  Fixture f;
  f.preds = {{box(100, 120, 40, 30, 12), {0.8, -0.3, 0.1}},
             {box(300, 200, 60, 44, 25), {-0.5, 1.1, -0.2}},
             {box(500, 400, 30, 30, 40), {0.2, 0.2, 0.6}}};
  f.gts = {{box(108, 117, 44, 27, 13), 0}, {box(290, 206, 55, 47, 23), 1}};
  f.assignment.pairs = {{0, 0}, {1, 1}};
  f.assignment.unmatched_preds = {2};
  return f;
}

}  // namespace

TEST_CASE("total loss equals the hand-recomputed weighted means") {
  const Fixture f = make_fixture();
  const LossBreakdown lb = total_loss(f.assignment, f.preds, f.gts, f.w, f.fp, f.norm);

  // Independent recomputation from the component operations.
  double cls = 0.0;
  const auto p0 = softmax(f.preds[0].logits);
  const auto p1 = softmax(f.preds[1].logits);
  const auto p2 = softmax(f.preds[2].logits);
  cls += focal_loss(p0[0], f.fp);
  cls += focal_loss(p1[1], f.fp);
  cls += focal_loss(p2[2], f.fp);  // background slot is the last index
  cls /= 3.0;
  double reg = (l1_regression_loss(f.preds[0].box, f.gts[0].box, f.norm) +
                l1_regression_loss(f.preds[1].box, f.gts[1].box, f.norm)) /
               2.0;
  double iou_term = (giou_loss(f.preds[0].box, f.gts[0].box) +
                     giou_loss(f.preds[1].box, f.gts[1].box)) /
                    2.0;

  CHECK(lb.cls == doctest::Approx(cls).epsilon(1e-12));
  CHECK(lb.reg == doctest::Approx(reg).epsilon(1e-12));
  CHECK(lb.iou == doctest::Approx(iou_term).epsilon(1e-12));
  CHECK(lb.total ==
        doctest::Approx(f.w.cls * cls + f.w.reg * reg + f.w.iou * iou_term).epsilon(1e-12));
  CHECK(lb.matched == 2);
  CHECK(lb.background == 1);
}

TEST_CASE("total loss with no pairs and no predictions is an error") {
  Assignment empty;
  std::vector<Prediction2DLogits> no_preds;
  std::vector<GroundTruth2D> gts{{box(1, 1, 1, 1, 1), 0}};
  CHECK_THROWS_AS(total_loss(empty, no_preds, gts, {}, {}, {}), EmptyMatch);
}

TEST_CASE("background-only scenes reduce to mean background focal loss") {
  std::vector<Prediction2DLogits> preds{{box(10, 10, 5, 5, 4), {0.4, 0.2, -0.1}},
                                        {box(90, 10, 5, 5, 4), {-1.0, 0.3, 0.8}}};
  std::vector<GroundTruth2D> gts;
  Assignment a;
  a.unmatched_preds = {0, 1};
  const LossBreakdown lb = total_loss(a, preds, gts, {}, {}, {});
  const double expect = (focal_loss(softmax(preds[0].logits)[2]) +
                         focal_loss(softmax(preds[1].logits)[2])) /
                        2.0;
  CHECK(lb.cls == doctest::Approx(expect).epsilon(1e-12));
  CHECK(lb.reg == 0.0);
  CHECK(lb.iou == 0.0);
  CHECK(lb.matched == 0);
  CHECK(lb.background == 2);
}

TEST_CASE("2d gradients match central finite differences") {
  const Fixture f = make_fixture();
  const auto grads = total_loss_grad_2d(f.assignment, f.preds, f.gts, f.w, f.fp, f.norm);
  REQUIRE(grads.size() == 3);

  auto loss_at = [&](const std::vector<Prediction2DLogits>& preds) {
    return total_loss(f.assignment, preds, f.gts, f.w, f.fp, f.norm).total;
  };

  const double h = 1e-5;
  for (std::size_t pi = 0; pi < f.preds.size(); ++pi) {
    for (int k = 0; k < 5; ++k) {
      auto hi = f.preds, lo = f.preds;
      double* fhi[] = {&hi[pi].box.x, &hi[pi].box.y, &hi[pi].box.w, &hi[pi].box.h,
                       &hi[pi].box.depth};
      double* flo[] = {&lo[pi].box.x, &lo[pi].box.y, &lo[pi].box.w, &lo[pi].box.h,
                       &lo[pi].box.depth};
      *fhi[k] += h;
      *flo[k] -= h;
      const double fd = (loss_at(hi) - loss_at(lo)) / (2 * h);
      const double an = grads[pi].box[static_cast<std::size_t>(k)];
      const double scale = std::max({std::abs(fd), std::abs(an), 1e-8});
      CHECK(std::abs(fd - an) / scale < 1e-4);
    }
    for (std::size_t k = 0; k < f.preds[pi].logits.size(); ++k) {
      auto hi = f.preds, lo = f.preds;
      hi[pi].logits[k] += h;
      lo[pi].logits[k] -= h;
      const double fd = (loss_at(hi) - loss_at(lo)) / (2 * h);
      const double an = grads[pi].logits[k];
      const double scale = std::max({std::abs(fd), std::abs(an), 1e-8});
      CHECK(std::abs(fd - an) / scale < 1e-4);
    }
  }
}

TEST_CASE("2d gradients scale linearly with the loss weights") {
  const Fixture f = make_fixture();
  const auto g1 = total_loss_grad_2d(f.assignment, f.preds, f.gts, {0.0, 1.0, 0.0}, f.fp, f.norm);
  const auto g2 = total_loss_grad_2d(f.assignment, f.preds, f.gts, {0.0, 2.0, 0.0}, f.fp, f.norm);
  for (std::size_t i = 0; i < g1.size(); ++i)
    for (int k = 0; k < 5; ++k)
      CHECK(g2[i].box[static_cast<std::size_t>(k)] ==
            doctest::Approx(2.0 * g1[i].box[static_cast<std::size_t>(k)]).epsilon(1e-12));
}

namespace {

Camera straight_camera(const std::string& id = "cam") {
  Camera cam;
  cam.id = id;
  cam.intrinsics = {1000.0, 1000.0, 500.0, 500.0};
  cam.width = 1000;
  cam.height = 1000;
  return cam;
}

// Builds one CameraView by projecting each box; boxes not visible in the
// camera are skipped, mirroring how the training loop assembles views.
CameraView make_view(const Camera& cam, std::span<const Box3D> boxes,
                     std::span<const std::vector<double>> logits,
                     std::vector<GroundTruth2D> gts) {
  CameraView view;
  view.camera = &cam;
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    const auto bb = bevtune::geom::project_box(cam, boxes[b]);
    if (!bb) continue;
    view.box_index.push_back(static_cast<int>(b));
    view.preds.push_back({*bb, logits[b]});
  }
  view.gts = std::move(gts);
  if (!view.preds.empty() && !view.gts.empty()) {
    std::vector<bevtune::matching::Prediction2D> mp;
    for (const auto& p : view.preds) mp.push_back({p.box, softmax(p.logits)});
    bevtune::matching::Normalization norm{static_cast<double>(cam.height), 61.2};
    view.assignment = bevtune::matching::hungarian(
        bevtune::matching::build_cost_matrix(mp, view.gts, {}, norm));
  } else {
    view.assignment.unmatched_preds.resize(view.preds.size());
    for (std::size_t i = 0; i < view.preds.size(); ++i)
      view.assignment.unmatched_preds[static_cast<std::size_t>(i)] = static_cast<int>(i);
  }
  return view;
}

}  // namespace

TEST_CASE("3d gradient of a single-camera scene is the jacobian transpose chain") {
  const Camera cam = straight_camera();
  std::vector<Box3D> boxes(1);
  boxes[0].center = {1.0, -0.5, 14.0};
  boxes[0].length = 3.0;
  boxes[0].width = 1.6;
  boxes[0].height = 1.5;
  boxes[0].yaw = 0.4;
  std::vector<std::vector<double>> logits{{0.6, -0.2, 0.3}};
  std::vector<GroundTruth2D> gts{{box(560, 470, 220, 120, 13.0), 0}};

  const auto view = make_view(cam, boxes, logits, gts);
  REQUIRE(view.preds.size() == 1);
  std::vector<CameraView> views{view};
  const Normalization norm{900.0, 61.2};
  const SceneLoss sl = total_loss_grad_3d(boxes, views, {}, {}, norm);
  REQUIRE(sl.grads.size() == 1);
  CHECK(sl.grads[0].visible_anywhere);

  // Hand composition: per-view 2D gradient through the projection jacobian.
  Normalization view_norm{static_cast<double>(cam.height), norm.max_depth};
  const auto g2d = total_loss_grad_2d(view.assignment, view.preds, view.gts, {}, {}, view_norm);
  const auto jac = bevtune::geom::project_box_jacobian(cam, boxes[0]);
  REQUIRE(jac.has_value());
  for (int p = 0; p < 7; ++p) {
    double expect = 0.0;
    for (int out = 0; out < 5; ++out)
      expect += g2d[0].box[static_cast<std::size_t>(out)] *
                jac->d[static_cast<std::size_t>(out)][static_cast<std::size_t>(p)];
    CHECK(sl.grads[0].box[static_cast<std::size_t>(p)] ==
          doctest::Approx(expect).epsilon(1e-12));
  }
  for (std::size_t k = 0; k < logits[0].size(); ++k)
    CHECK(sl.grads[0].logits[k] == doctest::Approx(g2d[0].logits[k]).epsilon(1e-12));
}

TEST_CASE("3d gradients over two cameras match finite differences of the sum") {
  const Camera cam_a = straight_camera("a");
  Camera cam_b = straight_camera("b");
  cam_b.ego_to_cam.rotation = Mat3::rotation_z(0.15);
  cam_b.ego_to_cam.translation = {0.3, -0.2, 0.0};

  std::vector<Box3D> boxes(1);
  boxes[0].center = {0.8, 0.6, 16.0};
  boxes[0].length = 2.5;
  boxes[0].width = 1.4;
  boxes[0].height = 1.7;
  boxes[0].yaw = -0.35;
  std::vector<std::vector<double>> logits{{0.4, 0.1, -0.2}};
  std::vector<GroundTruth2D> gts_a{{box(548, 546, 180, 115, 15.0), 0}};
  std::vector<GroundTruth2D> gts_b{{box(458, 530, 175, 110, 15.5), 0}};

  auto build_views = [&](const std::vector<Box3D>& bs) {
    std::vector<CameraView> views;
    views.push_back(make_view(cam_a, bs, logits, gts_a));
    views.push_back(make_view(cam_b, bs, logits, gts_b));
    return views;
  };
  const Normalization norm{900.0, 61.2};
  const auto views = build_views(boxes);
  REQUIRE(views[0].preds.size() == 1);
  REQUIRE(views[1].preds.size() == 1);
  const SceneLoss sl = total_loss_grad_3d(boxes, views, {}, {}, norm);

  // The analytic gradient treats the assignment as fixed; rebuild views for
  // shifted parameters but overwrite the assignment with the base one.
  auto loss_at = [&](const std::vector<Box3D>& bs) {
    auto vs = build_views(bs);
    REQUIRE(vs[0].preds.size() == 1);
    REQUIRE(vs[1].preds.size() == 1);
    vs[0].assignment = views[0].assignment;
    vs[1].assignment = views[1].assignment;
    return total_loss_grad_3d(bs, vs, {}, {}, norm).breakdown.total;
  };

  const double h = 1e-6;
  for (int p = 0; p < 7; ++p) {
    auto hi = boxes, lo = boxes;
    double* fhi[] = {&hi[0].center.x, &hi[0].center.y, &hi[0].center.z, &hi[0].length,
                     &hi[0].width,    &hi[0].height,   &hi[0].yaw};
    double* flo[] = {&lo[0].center.x, &lo[0].center.y, &lo[0].center.z, &lo[0].length,
                     &lo[0].width,    &lo[0].height,   &lo[0].yaw};
    *fhi[p] += h;
    *flo[p] -= h;
    const double fd = (loss_at(hi) - loss_at(lo)) / (2 * h);
    const double an = sl.grads[0].box[static_cast<std::size_t>(p)];
    const double scale = std::max({std::abs(fd), std::abs(an), 1e-8});
    CHECK(std::abs(fd - an) / scale < 1e-3);
  }
}

TEST_CASE("boxes visible nowhere receive a zero gradient and a flag") {
  const Camera cam = straight_camera();
  std::vector<Box3D> boxes(2);
  boxes[0].center = {0.0, 0.0, 12.0};  // visible
  boxes[0].length = boxes[0].width = boxes[0].height = 1.5;
  boxes[1].center = {0.0, 0.0, -20.0};  // behind the camera
  boxes[1].length = boxes[1].width = boxes[1].height = 1.5;
  std::vector<std::vector<double>> logits{{0.5, 0.1}, {0.2, 0.3}};
  std::vector<GroundTruth2D> gts{{box(500, 500, 130, 130, 11.0), 0}};

  const auto view = make_view(cam, boxes, logits, gts);
  REQUIRE(view.preds.size() == 1);  // only the first box projects
  std::vector<CameraView> views{view};
  const SceneLoss sl = total_loss_grad_3d(boxes, views, {}, {}, {});
  REQUIRE(sl.grads.size() == 2);
  CHECK(sl.grads[0].visible_anywhere);
  CHECK_FALSE(sl.grads[1].visible_anywhere);
  for (double v : sl.grads[1].box) CHECK(v == 0.0);
  for (double v : sl.grads[1].logits) CHECK(v == 0.0);
}

TEST_CASE("zero-loss fixed point: exact zero loss and exact zero gradients") {
  const Camera cam = straight_camera();
  std::vector<Box3D> boxes(1);
  boxes[0].center = {0.5, -0.8, 18.0};
  boxes[0].length = 4.0;
  boxes[0].width = 1.8;
  boxes[0].height = 1.6;
  boxes[0].yaw = 0.25;
  boxes[0].class_id = 0;

  const auto bb = bevtune::geom::project_box(cam, boxes[0]);
  REQUIRE(bb.has_value());
  // Saturated logits: softmax puts probability exactly 1.0 on the gt class.
  std::vector<std::vector<double>> logits{{40.0, 0.0, 0.0}};
  std::vector<GroundTruth2D> gts{{*bb, 0}};

  const auto view = make_view(cam, boxes, logits, gts);
  REQUIRE(view.preds.size() == 1);
  REQUIRE(view.assignment.pairs.size() == 1);
  std::vector<CameraView> views{view};
  const SceneLoss sl = total_loss_grad_3d(boxes, views, {}, {}, {});

  CHECK(sl.breakdown.total == 0.0);
  CHECK(sl.breakdown.cls == 0.0);
  CHECK(sl.breakdown.reg == 0.0);
  CHECK(sl.breakdown.iou == 0.0);
  for (double v : sl.grads[0].box) CHECK(v == 0.0);
  for (double v : sl.grads[0].logits) CHECK(v == 0.0);
}
