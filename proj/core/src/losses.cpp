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

#include "bevtune/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "bevtune/errors.hpp"

namespace bevtune::losses {

std::vector<double> softmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("softmax: empty logits");
  const double m = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

double focal_loss(double p, const FocalParams& fp) {
  const double pc = std::clamp(p, kMinProb, 1.0);
  return -fp.alpha * std::pow(1.0 - pc, fp.gamma) * std::log(pc);
}

double focal_loss_dp(double p, const FocalParams& fp) {
  if (p < kMinProb || p > 1.0) return 0.0;
  const double om = 1.0 - p;
  double term = 0.0;
  if (fp.gamma != 0.0) term = fp.alpha * fp.gamma * std::pow(om, fp.gamma - 1.0) * std::log(p);
  return term - fp.alpha * std::pow(om, fp.gamma) / p;
}

double l1_regression_loss(const geom::Box2D& pred, const geom::Box2D& gt,
                          const matching::Normalization& norm) {
  return matching::regression_cost(pred, gt, norm);
}

namespace {

double sgn(double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); }

}  // namespace

std::array<double, 5> l1_regression_grad(const geom::Box2D& pred, const geom::Box2D& gt,
                                         const matching::Normalization& norm) {
  const double ih = 1.0 / norm.image_height;
  return {sgn(pred.x - gt.x) * ih, sgn(pred.y - gt.y) * ih,
          sgn(pred.w - gt.w) * ih, sgn(pred.h - gt.h) * ih,
          sgn(pred.depth - gt.depth) / norm.max_depth};
}

double iou(const geom::Box2D& a, const geom::Box2D& b) {
  const double iw = std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min());
  const double ih = std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min());
  const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return inter / uni;
}

double giou(const geom::Box2D& a, const geom::Box2D& b) {
  const double iw = std::min(a.x_max(), b.x_max()) - std::max(a.x_min(), b.x_min());
  const double ih = std::min(a.y_max(), b.y_max()) - std::max(a.y_min(), b.y_min());
  const double inter = (iw > 0.0 && ih > 0.0) ? iw * ih : 0.0;
  const double uni = a.w * a.h + b.w * b.h - inter;
  const double cw = std::max(a.x_max(), b.x_max()) - std::min(a.x_min(), b.x_min());
  const double ch = std::max(a.y_max(), b.y_max()) - std::min(a.y_min(), b.y_min());
  const double hull = cw * ch;
  return inter / uni - (hull - uni) / hull;
}

double giou_loss(const geom::Box2D& a, const geom::Box2D& b) { return 1.0 - giou(a, b); }

std::array<double, 4> giou_grad(const geom::Box2D& pred, const geom::Box2D& gt) {
  // Coincident boxes: the tie policy below yields dI == dE and dU == 0, so
  // the gradient is identically zero. Return that directly; evaluating the
  // general expression would leave last-ulp residue and a perfect
  // prediction would no longer be an exact stationary point.
  if (pred.x == gt.x && pred.y == gt.y && pred.w == gt.w && pred.h == gt.h) return {};
  const double ax1 = pred.x_min(), ax2 = pred.x_max();
  const double ay1 = pred.y_min(), ay2 = pred.y_max();
  const double bx1 = gt.x_min(), bx2 = gt.x_max();
  const double by1 = gt.y_min(), by2 = gt.y_max();

  const double iw = std::min(ax2, bx2) - std::max(ax1, bx1);
  const double ihh = std::min(ay2, by2) - std::max(ay1, by1);
  const bool overlap = iw > 0.0 && ihh > 0.0;
  const double inter = overlap ? iw * ihh : 0.0;
  const double uni = pred.w * pred.h + gt.w * gt.h - inter;
  const double cw = std::max(ax2, bx2) - std::min(ax1, bx1);
  const double ch = std::max(ay2, by2) - std::min(ay1, by1);
  const double hull = cw * ch;

  // Edge derivatives w.r.t. (x, y, w, h): x_min -> (1,0,-0.5,0),
  // x_max -> (1,0,0.5,0), and the y/h analogues. Ties between prediction and
  // gt edges resolve to the prediction edge.
  std::array<double, 4> diw{}, dih{}, dcw{}, dch{};
  if (ax2 <= bx2) { diw[0] += 1.0; diw[2] += 0.5; }
  if (ax1 >= bx1) { diw[0] -= 1.0; diw[2] += 0.5; }
  if (ay2 <= by2) { dih[1] += 1.0; dih[3] += 0.5; }
  if (ay1 >= by1) { dih[1] -= 1.0; dih[3] += 0.5; }
  if (ax2 >= bx2) { dcw[0] += 1.0; dcw[2] += 0.5; }
  if (ax1 <= bx1) { dcw[0] -= 1.0; dcw[2] += 0.5; }
  if (ay2 >= by2) { dch[1] += 1.0; dch[3] += 0.5; }
  if (ay1 <= by1) { dch[1] -= 1.0; dch[3] += 0.5; }

  std::array<double, 4> out{};
  for (int p = 0; p < 4; ++p) {
    const double dA = (p == 2) ? pred.h : (p == 3) ? pred.w : 0.0;
    const double dI = overlap ? ihh * diw[p] + iw * dih[p] : 0.0;
    const double dU = dA - dI;
    const double dE = ch * dcw[p] + cw * dch[p];
    const double dgiou = (dI * uni - inter * dU) / (uni * uni) +
                         (dU * hull - uni * dE) / (hull * hull);
    out[p] = -dgiou;  // giou_loss = 1 - giou
  }
  return out;
}

double pair_kink_margin(const geom::Box2D& pred, const geom::Box2D& gt) {
  const double iw = std::min(pred.x_max(), gt.x_max()) - std::max(pred.x_min(), gt.x_min());
  const double ih = std::min(pred.y_max(), gt.y_max()) - std::max(pred.y_min(), gt.y_min());
  return std::min({std::abs(pred.x - gt.x), std::abs(pred.y - gt.y),
                   std::abs(pred.w - gt.w), std::abs(pred.h - gt.h),
                   std::abs(pred.depth - gt.depth),
                   std::abs(pred.x_min() - gt.x_min()), std::abs(pred.x_max() - gt.x_max()),
                   std::abs(pred.y_min() - gt.y_min()), std::abs(pred.y_max() - gt.y_max()),
                   std::abs(iw), std::abs(ih)});
}

namespace {

int slot_count(std::span<const Prediction2DLogits> preds) {
  return preds.empty() ? 0 : static_cast<int>(preds.front().logits.size());
}

void check_assignment(const matching::Assignment& assignment,
                      std::span<const Prediction2DLogits> preds,
                      std::span<const matching::GroundTruth2D> gts) {
  const int n = static_cast<int>(preds.size());
  const int m = static_cast<int>(gts.size());
  for (const auto& [i, j] : assignment.pairs)
    if (i < 0 || i >= n || j < 0 || j >= m)
      throw std::out_of_range("total_loss: assignment pair index out of range");
  for (int i : assignment.unmatched_preds)
    if (i < 0 || i >= n) throw std::out_of_range("total_loss: unmatched pred index out of range");
}

}  // namespace

LossBreakdown total_loss(const matching::Assignment& assignment,
                         std::span<const Prediction2DLogits> preds,
                         std::span<const matching::GroundTruth2D> gts,
                         const LossWeights& w, const FocalParams& fp,
                         const matching::Normalization& norm) {
  if (assignment.pairs.empty() && assignment.unmatched_preds.empty())
    throw EmptyMatch("total_loss: no matched pairs and no unmatched predictions");
  check_assignment(assignment, preds, gts);

  double cls_sum = 0.0, reg_sum = 0.0, iou_sum = 0.0;
  for (const auto& [i, j] : assignment.pairs) {
    const auto probs = softmax(preds[i].logits);
    const int cls = gts[j].class_id;
    if (cls < 0 || cls + 1 >= static_cast<int>(probs.size()))
      throw std::out_of_range("total_loss: gt class has no logit slot");
    cls_sum += focal_loss(probs[cls], fp);
    reg_sum += l1_regression_loss(preds[i].box, gts[j].box, norm);
    iou_sum += giou_loss(preds[i].box, gts[j].box);
  }
  for (int i : assignment.unmatched_preds) {
    const auto probs = softmax(preds[i].logits);
    cls_sum += focal_loss(probs.back(), fp);
  }

  LossBreakdown out;
  out.matched = static_cast<int>(assignment.pairs.size());
  out.background = static_cast<int>(assignment.unmatched_preds.size());
  const int n_cls = out.matched + out.background;
  out.cls = cls_sum / n_cls;
  out.reg = out.matched > 0 ? reg_sum / out.matched : 0.0;
  out.iou = out.matched > 0 ? iou_sum / out.matched : 0.0;
  out.total = w.cls * out.cls + w.reg * out.reg + w.iou * out.iou;
  return out;
}

std::vector<Grad2D> total_loss_grad_2d(const matching::Assignment& assignment,
                                       std::span<const Prediction2DLogits> preds,
                                       std::span<const matching::GroundTruth2D> gts,
                                       const LossWeights& w, const FocalParams& fp,
                                       const matching::Normalization& norm) {
  if (assignment.pairs.empty() && assignment.unmatched_preds.empty())
    throw EmptyMatch("total_loss_grad_2d: no matched pairs and no unmatched predictions");
  check_assignment(assignment, preds, gts);

  std::vector<Grad2D> out(preds.size());
  for (std::size_t i = 0; i < preds.size(); ++i)
    out[i].logits.assign(preds[i].logits.size(), 0.0);

  const double n_cls = static_cast<double>(assignment.pairs.size() +
                                           assignment.unmatched_preds.size());
  const double n_pairs = static_cast<double>(assignment.pairs.size());

  auto add_focal_grad = [&](int i, int target) {
    const auto probs = softmax(preds[i].logits);
    const double p_t = probs[target];
    const double dldp = (w.cls / n_cls) * focal_loss_dp(p_t, fp);
    for (std::size_t k = 0; k < probs.size(); ++k) {
      const double dp_dlogit = p_t * ((static_cast<int>(k) == target ? 1.0 : 0.0) - probs[k]);
      out[i].logits[k] += dldp * dp_dlogit;
    }
  };

  for (const auto& [i, j] : assignment.pairs) {
    add_focal_grad(i, gts[j].class_id);
    const auto lg = l1_regression_grad(preds[i].box, gts[j].box, norm);
    const auto gg = giou_grad(preds[i].box, gts[j].box);
    for (int p = 0; p < 5; ++p) out[i].box[p] += (w.reg / n_pairs) * lg[p];
    for (int p = 0; p < 4; ++p) out[i].box[p] += (w.iou / n_pairs) * gg[p];
  }
  for (int i : assignment.unmatched_preds)
    add_focal_grad(i, static_cast<int>(preds[i].logits.size()) - 1);
  return out;
}

SceneLoss total_loss_grad_3d(std::span<const geom::Box3D> boxes,
                             std::span<const CameraView> views,
                             const LossWeights& w, const FocalParams& fp,
                             const matching::Normalization& norm) {
  SceneLoss out;
  out.grads.resize(boxes.size());

  for (const CameraView& view : views) {
    if (view.preds.empty()) continue;
    matching::Normalization view_norm = norm;
    view_norm.image_height = static_cast<double>(view.camera->height);

    const auto bd = total_loss(view.assignment, view.preds, view.gts, w, fp, view_norm);
    out.breakdown.cls += bd.cls;
    out.breakdown.reg += bd.reg;
    out.breakdown.iou += bd.iou;
    out.breakdown.total += bd.total;
    out.breakdown.matched += bd.matched;
    out.breakdown.background += bd.background;

    const auto g2 = total_loss_grad_2d(view.assignment, view.preds, view.gts, w, fp, view_norm);
    for (std::size_t r = 0; r < view.preds.size(); ++r) {
      const int b = view.box_index[r];
      if (b < 0 || static_cast<std::size_t>(b) >= boxes.size())
        throw std::out_of_range("total_loss_grad_3d: box index out of range");
      const auto jac = geom::project_box_jacobian(*view.camera, boxes[b]);
      if (!jac)
        throw std::logic_error("total_loss_grad_3d: view row is not a visible projection");

      Grad3D& g = out.grads[b];
      for (int p = 0; p < 7; ++p)
        for (int row = 0; row < 5; ++row) g.box[p] += g2[r].box[row] * jac->d[row][p];
      if (g.logits.empty()) g.logits.assign(g2[r].logits.size(), 0.0);
      for (std::size_t k = 0; k < g2[r].logits.size(); ++k) g.logits[k] += g2[r].logits[k];
      g.visible_anywhere = true;
    }
  }
  return out;
}

}  // namespace bevtune::losses
