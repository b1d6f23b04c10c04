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
#include <optional>
#include <string>
#include <vector>

namespace bevtune::geom {

inline constexpr double kPi = 3.14159265358979323846;

// Camera-frame points with z at or below this are treated as behind the camera.
inline constexpr double kMinCameraDepth = 1e-3;

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

Vec3 operator+(const Vec3& a, const Vec3& b);
Vec3 operator-(const Vec3& a, const Vec3& b);
Vec3 operator*(double s, const Vec3& v);
double dot(const Vec3& a, const Vec3& b);
double norm(const Vec3& v);

// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{};

  double& operator()(int r, int c) { return m[3 * r + c]; }
  double operator()(int r, int c) const { return m[3 * r + c]; }

  static Mat3 identity();
  static Mat3 rotation_z(double yaw);

  Mat3 transposed() const;
  double determinant() const;
  Vec3 row(int r) const;
};

Vec3 operator*(const Mat3& m, const Vec3& v);
Mat3 operator*(const Mat3& a, const Mat3& b);

// R^T R = I within tol and det(R) = +1 within tol.
bool is_rotation(const Mat3& r, double tol = 1e-9);

// p_out = R * p + t.
struct RigidTransform {
  Mat3 rotation = Mat3::identity();
  Vec3 translation;

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
  RigidTransform inverse() const;
};

// Composition: (a * b).apply(p) == a.apply(b.apply(p)).
RigidTransform operator*(const RigidTransform& a, const RigidTransform& b);

// Pinhole intrinsics, zero skew.
struct Intrinsics {
  double fx = 0.0, fy = 0.0, cx = 0.0, cy = 0.0;
};

struct Camera {
  std::string id;
  Intrinsics intrinsics;
  RigidTransform ego_to_cam;
  int width = 0;
  int height = 0;
};

// Throws std::invalid_argument on hard violations (non-positive focal
// lengths or image size, non-rotation extrinsics). Soft issues come back as
// warning strings (principal point outside the image).
std::vector<std::string> validate_camera(const Camera& cam);

// Ego frame: x forward, y left, z up. yaw rotates about +z; length/width/
// height are full extents along the local x/y/z axes.
struct Box3D {
  Vec3 center;
  double length = 0.0, width = 0.0, height = 0.0;
  double yaw = 0.0;
  double vx = 0.0, vy = 0.0;
  int class_id = 0;
  double score = 1.0;
  int attribute_id = 0;
};

// Axis-aligned image-plane box in center/extent form, plus the camera-frame
// depth of the source 3D box center.
struct Box2D {
  double x = 0.0, y = 0.0;
  double w = 0.0, h = 0.0;
  double depth = 0.0;

  double x_min() const { return x - 0.5 * w; }
  double x_max() const { return x + 0.5 * w; }
  double y_min() const { return y - 0.5 * h; }
  double y_max() const { return y + 0.5 * h; }
};

// Throw std::invalid_argument when a box violates its invariants
// (non-positive extents, yaw outside (-pi, pi], score outside [0, 1], ...).
void validate(const Box3D& box);
void validate(const Box2D& box);

// Wrap an angle to (-pi, pi].
double wrap_angle(double a);

// The eight box corners in ego coordinates. Corner k carries local offset
// signs (sx, sy, sz) = (k&1 ? + : -, k&2 ? + : -, k&4 ? + : -) applied to
// (length/2, width/2, height/2). The enumeration order is part of the
// contract: jacobian tie-breaks pick the lowest corner index.
std::array<Vec3, 8> box_corners(const Box3D& box);

struct ImagePoint {
  double u = 0.0, v = 0.0;
  double depth = 0.0;  // camera-frame z
};

// nullopt when the point is behind the camera (z_cam <= kMinCameraDepth).
std::optional<ImagePoint> project_point(const Camera& cam, const Vec3& p);

// Axis-aligned hull of the eight projected corners. nullopt unless every
// corner is in front of the camera and the hull overlaps the image
// rectangle; the hull is not clamped to the image. depth is the camera-frame
// z of the box center.
std::optional<Box2D> project_box(const Camera& cam, const Box3D& box);

// d(x2d, y2d, w2d, h2d, depth) / d(cx, cy, cz, length, width, height, yaw).
// Min/max corner selections use the subgradient of the lowest-index extreme
// corner; tie_margin is the smallest pixel gap between a selected extreme
// and its runner-up, so callers can exclude near-ties from difference checks.
struct BoxJacobian {
  std::array<std::array<double, 7>, 5> d{};
  int corner_x_min = -1, corner_x_max = -1;
  int corner_y_min = -1, corner_y_max = -1;
  double tie_margin = 0.0;
};

// Same visibility rule as project_box.
std::optional<BoxJacobian> project_box_jacobian(const Camera& cam, const Box3D& box);

}  // namespace bevtune::geom
