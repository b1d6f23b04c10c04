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
#include <filesystem>
#include <string>
#include <vector>

#include "bevtune/depth.hpp"
#include "bevtune/geometry.hpp"

namespace bevtune::scenegen {

enum class LabelMode { full3d, only2d };

std::string to_string(LabelMode mode);
LabelMode label_mode_from_string(const std::string& s);

struct ClassSpec {
  std::string name;
  double length = 0.0, width = 0.0, height = 0.0;  // nominal dims, meters
};

// car/truck/pedestrian/cyclist with typical dimensions.
std::vector<ClassSpec> default_classes();

// Six cameras at 60 degree yaw spacing, 70 degree horizontal FOV.
std::vector<geom::Camera> surround_rig(int width = 1600, int height = 900);
// Five-camera preset: front, two front-diagonal, two side cameras.
std::vector<geom::Camera> waymo_rig(int width = 1920, int height = 1280);

// Scene content parameters. Boxes spawn in an annulus around the ego origin,
// resting on the ground plane (center z = height/2), and are rejected when
// their BEV bounding circles overlap an already placed box.
struct GenConfig {
  int min_boxes = 4;
  int max_boxes = 10;
  double spawn_radius_min = 5.0;
  double spawn_radius_max = 30.0;
  double dim_jitter = 0.1;    // relative uniform jitter on nominal dims
  double max_speed = 3.0;     // |vx|, |vy| uniform in [-max_speed, max_speed]
  std::vector<ClassSpec> classes = default_classes();
  int num_attributes = 3;
  int max_rejections = 1000;  // per box; then PlacementFailure
};

// Synthetic "pre-trained detector" noise applied to gt boxes.
struct NoiseConfig {
  double center_sigma = 0.5;  // meters, per axis
  double scale_sigma = 0.15;  // relative, per dim, factor floor 0.2
  double yaw_sigma = 0.2;     // radians
  double vel_sigma = 0.2;     // m/s, per component
  double drop_rate = 0.05;
  double spurious_rate = 0.05;
  double class_flip_rate = 0.05;
};

// One 2D annotation: the exact projection of gt box `gt_index` into the
// camera it is listed under.
struct Ann2D {
  geom::Box2D box;
  int class_id = 0;
  int attribute_id = 0;
  int gt_index = 0;
};

class Scene {
 public:
  Scene() = default;
  Scene(int id, LabelMode mode, std::vector<geom::Camera> cameras,
        std::vector<geom::Box3D> gt, std::vector<std::vector<Ann2D>> ann2d,
        std::vector<depth::DepthMap> depth_maps);

  int id() const { return id_; }
  LabelMode label_mode() const { return mode_; }
  const std::vector<geom::Camera>& cameras() const { return cameras_; }
  const std::vector<std::vector<Ann2D>>& ann2d() const { return ann2d_; }
  const std::vector<depth::DepthMap>& depth_maps() const { return depth_maps_; }

  // Training-facing 3D labels. Throws LabelAccessError on an only2d scene.
  const std::vector<geom::Box3D>& gt3d() const;
  // Measurement-only access for evaluation and reporting; never feed this to
  // an optimizer on an only2d scene.
  const std::vector<geom::Box3D>& gt3d_eval_only() const { return gt_; }

  // Noisy detector initialization, produced at generation time.
  const std::vector<geom::Box3D>& init_preds() const { return init_preds_; }
  // For each init_pred, the gt index it was derived from (-1 for spurious).
  const std::vector<int>& init_pred_source() const { return init_src_; }
  void set_init_preds(std::vector<geom::Box3D> preds, std::vector<int> source);

 private:
  int id_ = 0;
  LabelMode mode_ = LabelMode::full3d;
  std::vector<geom::Camera> cameras_;
  std::vector<geom::Box3D> gt_;
  std::vector<std::vector<Ann2D>> ann2d_;  // [camera index][entry]
  std::vector<depth::DepthMap> depth_maps_;
  std::vector<geom::Box3D> init_preds_;
  std::vector<int> init_src_;
};

// Deterministic: the same (seed, config, rig) yields an identical scene.
// Throws PlacementFailure when a box cannot be placed within max_rejections.
Scene generate_scene(std::uint64_t seed, const GenConfig& cfg,
                     const std::vector<geom::Camera>& rig, int id, LabelMode mode);

struct Predictions {
  std::vector<geom::Box3D> boxes;
  std::vector<int> source_gt;  // parallel; -1 for spurious boxes
};

// Gaussian noise on center/dims/yaw/velocity, seeded drops, class flips and
// spurious boxes, scores uniform in [0.3, 1). `gen` supplies the class set
// and spawn region used for spurious boxes.
Predictions perturb_predictions(const Scene& scene, const GenConfig& gen,
                                const NoiseConfig& noise, std::uint64_t seed);

struct FileEntry {
  std::string path;   // relative to the dataset directory
  std::string crc32;  // 8 lowercase hex digits
};

struct DatasetConfig {
  std::uint64_t seed = 0;
  int scene_count = 12;
  // First lround(scene_count * full3d_fraction) scenes carry 3D labels; the
  // rest are only2d.
  double full3d_fraction = 1.0 / 3.0;
  std::string rig = "surround6";  // or "waymo5"
  int image_width = 1600;
  int image_height = 900;
  GenConfig gen;
  NoiseConfig noise;
};

struct DatasetManifest {
  int version = 1;
  DatasetConfig config;
  std::vector<geom::Camera> cameras;  // the shared rig
  std::vector<FileEntry> files;       // filled by write_dataset/read_dataset
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Scene> scenes;

  int full3d_count() const;
  std::vector<std::string> class_names() const;
};

// Per-scene seeds derive from the master seed, so scene k is identical
// regardless of scene_count. Throws ConfigError on invalid settings.
Dataset generate_dataset(const DatasetConfig& cfg);

// Layout: manifest.json, scenes.jsonl, depth/<scene>_<camera>.dpm. Writing
// the same dataset twice produces byte-identical files.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);

// Validates the manifest version, every file checksum, and scene structure.
// Throws UnsupportedVersion, ChecksumMismatch, or FormatError (line numbers
// for JSONL, byte offsets for binary files).
Dataset read_dataset(const std::filesystem::path& dir);

}  // namespace bevtune::scenegen
