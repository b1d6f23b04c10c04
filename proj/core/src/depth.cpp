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

#include "bevtune/depth.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <stdexcept>

#include "bevtune/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "depth file I/O assumes a little-endian host");

namespace bevtune::depth {

DepthMap::DepthMap(int width, int height, float fill)
    : width_(width), height_(height) {
  if (width <= 0 || height <= 0)
    throw std::invalid_argument("DepthMap: dimensions must be positive");
  values_.assign(static_cast<std::size_t>(width) * height, fill);
}

float DepthMap::at(int x, int y) const {
  if (x < 0 || x >= width_ || y < 0 || y >= height_)
    throw std::out_of_range("DepthMap::at: pixel outside map");
  return values_[static_cast<std::size_t>(y) * width_ + x];
}

float& DepthMap::at(int x, int y) {
  if (x < 0 || x >= width_ || y < 0 || y >= height_)
    throw std::out_of_range("DepthMap::at: pixel outside map");
  return values_[static_cast<std::size_t>(y) * width_ + x];
}

namespace {

// Pixel i covers [i, i+1); the range is every pixel whose square the
// interval [lo, hi] touches, clipped to [0, n).
std::optional<std::pair<int, int>> raster_range(double lo, double hi, int n) {
  if (!(hi >= 0.0) || !(lo <= static_cast<double>(n)) || lo > hi) return std::nullopt;
  const int a = static_cast<int>(std::floor(std::clamp(lo, 0.0, n - 1.0)));
  const int b = static_cast<int>(std::floor(std::clamp(hi, 0.0, n - 1.0)));
  if (a > b) return std::nullopt;
  return std::make_pair(a, b);
}

}  // namespace

DepthMap render_synthetic_depth(std::span<const geom::Box3D> boxes, const geom::Camera& cam) {
  geom::validate_camera(cam);
  DepthMap map(cam.width, cam.height);
  for (const geom::Box3D& box : boxes) {
    const auto bb = geom::project_box(cam, box);
    if (!bb) continue;
    const auto xr = raster_range(bb->x_min(), bb->x_max(), cam.width);
    const auto yr = raster_range(bb->y_min(), bb->y_max(), cam.height);
    if (!xr || !yr) continue;
    const float d = static_cast<float>(bb->depth);
    for (int y = yr->first; y <= yr->second; ++y)
      for (int x = xr->first; x <= xr->second; ++x)
        if (d < map.at(x, y)) map.at(x, y) = d;
  }
  return map;
}

double box_depth_from_map(const DepthMap& map, const geom::Box2D& box) {
  const auto xr = raster_range(box.x_min(), box.x_max(), map.width());
  const auto yr = raster_range(box.y_min(), box.y_max(), map.height());
  std::vector<float> vals;
  if (xr && yr) {
    for (int y = yr->first; y <= yr->second; ++y)
      for (int x = xr->first; x <= xr->second; ++x) {
        const float v = map.at(x, y);
        if (std::isfinite(v)) vals.push_back(v);
      }
  }
  if (vals.empty()) throw NoDepth("box_depth_from_map: region holds no finite depth");
  std::sort(vals.begin(), vals.end());
  const std::size_t k = vals.size() / 2;
  if (vals.size() % 2 == 1) return vals[k];
  return 0.5 * (static_cast<double>(vals[k - 1]) + static_cast<double>(vals[k]));
}

namespace {

constexpr char kMagic[4] = {'D', 'P', 'M', '1'};
constexpr std::size_t kHeaderSize = 16;

void put_u32(std::ofstream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

}  // namespace

void save_depth_map(const DepthMap& map, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("save_depth_map: cannot open " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put_u32(out, static_cast<std::uint32_t>(map.width()));
  put_u32(out, static_cast<std::uint32_t>(map.height()));
  put_u32(out, 0);
  const auto vals = map.values();
  out.write(reinterpret_cast<const char*>(vals.data()),
            static_cast<std::streamsize>(vals.size() * sizeof(float)));
  if (!out) throw Error("save_depth_map: write failed for " + path.string());
}

DepthMap load_depth_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("load_depth_map: cannot open " + path.string());
  in.seekg(0, std::ios::end);
  const std::size_t file_size = static_cast<std::size_t>(in.tellg());
  in.seekg(0);

  if (file_size < kHeaderSize)
    throw FormatError("load_depth_map: truncated header in " + path.string(), file_size);

  char header[kHeaderSize];
  in.read(header, kHeaderSize);
  if (std::memcmp(header, kMagic, sizeof(kMagic)) != 0)
    throw FormatError("load_depth_map: bad magic in " + path.string(), 0);

  std::uint32_t w = 0, h = 0;
  std::memcpy(&w, header + 4, sizeof(w));
  std::memcpy(&h, header + 8, sizeof(h));
  constexpr std::uint32_t kMaxDim = 1u << 16;
  if (w == 0 || h == 0 || w > kMaxDim || h > kMaxDim)
    throw FormatError("load_depth_map: implausible dimensions in " + path.string(), 4);

  const std::size_t count = static_cast<std::size_t>(w) * h;
  const std::size_t expected = kHeaderSize + count * sizeof(float);
  if (file_size != expected)
    throw FormatError("load_depth_map: body size mismatch in " + path.string(),
                      std::min(file_size, expected));

  DepthMap map(static_cast<int>(w), static_cast<int>(h));
  in.read(reinterpret_cast<char*>(map.values().data()),
          static_cast<std::streamsize>(count * sizeof(float)));
  if (!in) throw Error("load_depth_map: read failed for " + path.string());

  const auto vals = map.values();
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const float v = vals[i];
    if (std::isnan(v) || v <= 0.0f)
      throw FormatError("load_depth_map: invalid depth value in " + path.string(),
                        kHeaderSize + i * sizeof(float));
  }
  return map;
}

}  // namespace bevtune::depth
