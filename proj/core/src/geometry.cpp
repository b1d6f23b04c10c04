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

#include "bevtune/geometry.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace bevtune::geom {

Vec3 operator+(const Vec3& a, const Vec3& b) { return {a.x + b.x, a.y + b.y, a.z + b.z}; }
Vec3 operator-(const Vec3& a, const Vec3& b) { return {a.x - b.x, a.y - b.y, a.z - b.z}; }
Vec3 operator*(double s, const Vec3& v) { return {s * v.x, s * v.y, s * v.z}; }
double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }

Mat3 Mat3::identity() {
  Mat3 r;
  r(0, 0) = r(1, 1) = r(2, 2) = 1.0;
  return r;
}

Mat3 Mat3::rotation_z(double yaw) {
  const double c = std::cos(yaw), s = std::sin(yaw);
  Mat3 r;
  r(0, 0) = c; r(0, 1) = -s;
  r(1, 0) = s; r(1, 1) = c;
  r(2, 2) = 1.0;
  return r;
}

Mat3 Mat3::transposed() const {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
  return r;
}

double Mat3::determinant() const {
  const Mat3& a = *this;
  return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
         a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
         a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}

Vec3 Mat3::row(int r) const { return {(*this)(r, 0), (*this)(r, 1), (*this)(r, 2)}; }

Vec3 operator*(const Mat3& m, const Vec3& v) {
  return {m(0, 0) * v.x + m(0, 1) * v.y + m(0, 2) * v.z,
          m(1, 0) * v.x + m(1, 1) * v.y + m(1, 2) * v.z,
          m(2, 0) * v.x + m(2, 1) * v.y + m(2, 2) * v.z};
}

Mat3 operator*(const Mat3& a, const Mat3& b) {
  Mat3 r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int k = 0; k < 3; ++k) s += a(i, k) * b(k, j);
      r(i, j) = s;
    }
  return r;
}

bool is_rotation(const Mat3& r, double tol) {
  Mat3 g = r.transposed() * r;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      double want = (i == j) ? 1.0 : 0.0;
      if (std::abs(g(i, j) - want) > tol) return false;
    }
  return std::abs(r.determinant() - 1.0) <= tol;
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform r;
  r.rotation = rotation.transposed();
  r.translation = -1.0 * (r.rotation * translation);
  return r;
}

RigidTransform operator*(const RigidTransform& a, const RigidTransform& b) {
  RigidTransform r;
  r.rotation = a.rotation * b.rotation;
  r.translation = a.rotation * b.translation + a.translation;
  return r;
}

std::vector<std::string> validate_camera(const Camera& cam) {
  if (cam.intrinsics.fx <= 0.0 || cam.intrinsics.fy <= 0.0)
    throw std::invalid_argument("camera '" + cam.id + "': focal lengths must be positive");
  if (cam.width <= 0 || cam.height <= 0)
    throw std::invalid_argument("camera '" + cam.id + "': image size must be positive");
  if (!is_rotation(cam.ego_to_cam.rotation))
    throw std::invalid_argument("camera '" + cam.id + "': extrinsic rotation is not orthonormal");

  std::vector<std::string> warnings;
  if (cam.intrinsics.cx < 0.0 || cam.intrinsics.cx > cam.width ||
      cam.intrinsics.cy < 0.0 || cam.intrinsics.cy > cam.height) {
    warnings.push_back("camera '" + cam.id + "': principal point outside the image");
  }
  return warnings;
}

void validate(const Box3D& box) {
  if (!(box.length > 0.0 && box.width > 0.0 && box.height > 0.0))
    throw std::invalid_argument("Box3D: extents must be positive");
  if (!(box.yaw > -kPi - 1e-12 && box.yaw <= kPi + 1e-12))
    throw std::invalid_argument("Box3D: yaw outside (-pi, pi]");
  if (!(box.score >= 0.0 && box.score <= 1.0))
    throw std::invalid_argument("Box3D: score outside [0, 1]");
  if (!std::isfinite(box.center.x) || !std::isfinite(box.center.y) || !std::isfinite(box.center.z))
    throw std::invalid_argument("Box3D: non-finite center");
}

void validate(const Box2D& box) {
  if (!(box.w > 0.0 && box.h > 0.0))
    throw std::invalid_argument("Box2D: extents must be positive");
  if (!(box.depth > 0.0))
    throw std::invalid_argument("Box2D: depth must be positive");
}

double wrap_angle(double a) {
  double r = std::remainder(a, 2.0 * kPi);  // [-pi, pi]
  if (r <= -kPi) r += 2.0 * kPi;
  return r;
}

std::array<Vec3, 8> box_corners(const Box3D& box) {
  const double hl = 0.5 * box.length, hw = 0.5 * box.width, hh = 0.5 * box.height;
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  std::array<Vec3, 8> out;
  for (int k = 0; k < 8; ++k) {
    const double lx = (k & 1) ? hl : -hl;
    const double ly = (k & 2) ? hw : -hw;
    const double lz = (k & 4) ? hh : -hh;
    out[k] = {box.center.x + c * lx - s * ly,
              box.center.y + s * lx + c * ly,
              box.center.z + lz};
  }
  return out;
}

std::optional<ImagePoint> project_point(const Camera& cam, const Vec3& p) {
  const Vec3 pc = cam.ego_to_cam.apply(p);
  if (pc.z <= kMinCameraDepth) return std::nullopt;
  ImagePoint out;
  out.u = cam.intrinsics.fx * pc.x / pc.z + cam.intrinsics.cx;
  out.v = cam.intrinsics.fy * pc.y / pc.z + cam.intrinsics.cy;
  out.depth = pc.z;
  return out;
}

namespace {

bool hull_overlaps_image(const Camera& cam, double x_min, double x_max,
                         double y_min, double y_max) {
  return x_max >= 0.0 && x_min <= static_cast<double>(cam.width) &&
         y_max >= 0.0 && y_min <= static_cast<double>(cam.height);
}

}  // namespace

std::optional<Box2D> project_box(const Camera& cam, const Box3D& box) {
  const auto corners = box_corners(box);
  double x_min = std::numeric_limits<double>::infinity(), x_max = -x_min;
  double y_min = x_min, y_max = -x_min;
  for (const Vec3& corner : corners) {
    const auto ip = project_point(cam, corner);
    if (!ip) return std::nullopt;  // partially-behind boxes are dropped, not clipped
    x_min = std::min(x_min, ip->u);
    x_max = std::max(x_max, ip->u);
    y_min = std::min(y_min, ip->v);
    y_max = std::max(y_max, ip->v);
  }
  if (!hull_overlaps_image(cam, x_min, x_max, y_min, y_max)) return std::nullopt;

  const Vec3 cc = cam.ego_to_cam.apply(box.center);
  Box2D out;
  out.x = 0.5 * (x_min + x_max);
  out.y = 0.5 * (y_min + y_max);
  out.w = x_max - x_min;
  out.h = y_max - y_min;
  out.depth = cc.z;
  return out;
}

std::optional<BoxJacobian> project_box_jacobian(const Camera& cam, const Box3D& box) {
  const Mat3& R = cam.ego_to_cam.rotation;
  const double c = std::cos(box.yaw), s = std::sin(box.yaw);
  const double hl = 0.5 * box.length, hw = 0.5 * box.width, hh = 0.5 * box.height;

  // Per corner: pixel coordinates and the 7-vector gradients of u and v with
  // respect to (cx, cy, cz, length, width, height, yaw).
  std::array<double, 8> u{}, v{};
  std::array<std::array<double, 7>, 8> du{}, dv{};
  double x_min = std::numeric_limits<double>::infinity(), x_max = -x_min;
  double y_min = x_min, y_max = -x_min;

  for (int k = 0; k < 8; ++k) {
    const double sx = (k & 1) ? 1.0 : -1.0;
    const double sy = (k & 2) ? 1.0 : -1.0;
    const double sz = (k & 4) ? 1.0 : -1.0;
    const Vec3 local{sx * hl, sy * hw, sz * hh};
    const Vec3 ego{box.center.x + c * local.x - s * local.y,
                   box.center.y + s * local.x + c * local.y,
                   box.center.z + local.z};
    const Vec3 pc = cam.ego_to_cam.apply(ego);
    if (pc.z <= kMinCameraDepth) return std::nullopt;

    const double fx = cam.intrinsics.fx, fy = cam.intrinsics.fy;
    u[k] = fx * pc.x / pc.z + cam.intrinsics.cx;
    v[k] = fy * pc.y / pc.z + cam.intrinsics.cy;

    // d(ego)/d(param) columns, then chain through R and the pinhole map.
    std::array<Vec3, 7> dego;
    dego[0] = {1.0, 0.0, 0.0};
    dego[1] = {0.0, 1.0, 0.0};
    dego[2] = {0.0, 0.0, 1.0};
    dego[3] = {c * sx * 0.5, s * sx * 0.5, 0.0};          // length
    dego[4] = {-s * sy * 0.5, c * sy * 0.5, 0.0};         // width
    dego[5] = {0.0, 0.0, sz * 0.5};                       // height
    dego[6] = {-s * local.x - c * local.y,                // yaw
               c * local.x - s * local.y, 0.0};

    const double iz = 1.0 / pc.z;
    for (int p = 0; p < 7; ++p) {
      const Vec3 dpc = R * dego[p];
      du[k][p] = fx * iz * dpc.x - fx * pc.x * iz * iz * dpc.z;
      dv[k][p] = fy * iz * dpc.y - fy * pc.y * iz * iz * dpc.z;
    }

    x_min = std::min(x_min, u[k]);
    x_max = std::max(x_max, u[k]);
    y_min = std::min(y_min, v[k]);
    y_max = std::max(y_max, v[k]);
  }
  if (!hull_overlaps_image(cam, x_min, x_max, y_min, y_max)) return std::nullopt;

  // Strict comparisons scanning from corner 0 keep the lowest index on ties.
  BoxJacobian out;
  for (int k = 0; k < 8; ++k) {
    if (out.corner_x_min < 0 || u[k] < u[out.corner_x_min]) out.corner_x_min = k;
    if (out.corner_x_max < 0 || u[k] > u[out.corner_x_max]) out.corner_x_max = k;
    if (out.corner_y_min < 0 || v[k] < v[out.corner_y_min]) out.corner_y_min = k;
    if (out.corner_y_max < 0 || v[k] > v[out.corner_y_max]) out.corner_y_max = k;
  }

  // A tie only endangers a difference check when switching corners would
  // change the derivative. With yaw-only camera mounts the two ends of every
  // vertical box edge share u and the exact same du row, so such partners do
  // not count as runner-ups.
  auto runner_up_gap = [](const std::array<double, 8>& vals,
                          const std::array<std::array<double, 7>, 8>& grads, int sel,
                          bool is_min) {
    double best = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 8; ++k) {
      if (k == sel || grads[k] == grads[sel]) continue;
      const double gap = is_min ? vals[k] - vals[sel] : vals[sel] - vals[k];
      best = std::min(best, gap);
    }
    return best;
  };
  out.tie_margin = std::min({runner_up_gap(u, du, out.corner_x_min, true),
                             runner_up_gap(u, du, out.corner_x_max, false),
                             runner_up_gap(v, dv, out.corner_y_min, true),
                             runner_up_gap(v, dv, out.corner_y_max, false)});

  for (int p = 0; p < 7; ++p) {
    out.d[0][p] = 0.5 * (du[out.corner_x_min][p] + du[out.corner_x_max][p]);  // x2d
    out.d[1][p] = 0.5 * (dv[out.corner_y_min][p] + dv[out.corner_y_max][p]);  // y2d
    out.d[2][p] = du[out.corner_x_max][p] - du[out.corner_x_min][p];          // w2d
    out.d[3][p] = dv[out.corner_y_max][p] - dv[out.corner_y_min][p];          // h2d
  }
  // depth = z_cam(center): gradient w.r.t. center is the third row of R;
  // dims and yaw do not move the center.
  const Vec3 r2 = R.row(2);
  out.d[4][0] = r2.x;
  out.d[4][1] = r2.y;
  out.d[4][2] = r2.z;
  return out;
}

}  // namespace bevtune::geom
