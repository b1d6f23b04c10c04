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

#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "bevtune/geometry.hpp"

namespace bevtune::depth {

// Background pixels hold this sentinel; every object pixel is finite and > 0.
inline constexpr float kBackground = std::numeric_limits<float>::infinity();

// Dense per-pixel depth in meters, row-major. Immutable after construction
// apart from at(); treat a built map as read-only when shared across threads.
class DepthMap {
 public:
  DepthMap() = default;
  DepthMap(int width, int height, float fill = kBackground);

  int width() const { return width_; }
  int height() const { return height_; }

  float at(int x, int y) const;
  float& at(int x, int y);

  std::span<const float> values() const { return values_; }
  std::span<float> values() { return values_; }

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<float> values_;
};

// Paints each visible box's projected axis-aligned bounding box (clipped to
// the image) with the box-center camera depth, keeping the nearest value
// where boxes overlap. Stand-in for an offline monocular depth model.
DepthMap render_synthetic_depth(std::span<const geom::Box3D> boxes, const geom::Camera& cam);

// Median of the finite depths inside the clipped region (mean of the middle
// two for even counts). Throws NoDepth when the region holds only background.
double box_depth_from_map(const DepthMap& map, const geom::Box2D& box);

// Raw little-endian file: 16-byte header (magic "DPM1", u32 width,
// u32 height, u32 reserved) followed by row-major float32 values.
void save_depth_map(const DepthMap& map, const std::filesystem::path& path);

// Throws FormatError (with the byte offset) on malformed or truncated files.
DepthMap load_depth_map(const std::filesystem::path& path);

}  // namespace bevtune::depth
