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

#include "bevtune/scenegen.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <utility>

#include "json.hpp"

#include "bevtune/errors.hpp"
#include "bevtune/rng.hpp"

namespace bevtune::scenegen {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::string to_string(LabelMode mode) {
  return mode == LabelMode::full3d ? "full3d" : "only2d";
}

LabelMode label_mode_from_string(const std::string& s) {
  if (s == "full3d") return LabelMode::full3d;
  if (s == "only2d") return LabelMode::only2d;
  throw std::invalid_argument("unknown label mode: " + s);
}

std::vector<ClassSpec> default_classes() {
  return {{"car", 4.5, 1.9, 1.6},
          {"truck", 8.0, 2.5, 3.0},
          {"pedestrian", 0.8, 0.8, 1.75},
          {"cyclist", 1.8, 0.6, 1.6}};
}

namespace {

geom::Camera make_camera(const std::string& id, double yaw_deg, int width, int height,
                         double hfov_deg, double mount_radius, double mount_height) {
  const double yaw = yaw_deg * geom::kPi / 180.0;
  const double f = (width / 2.0) / std::tan(hfov_deg * geom::kPi / 360.0);
  geom::Camera cam;
  cam.id = id;
  cam.width = width;
  cam.height = height;
  cam.intrinsics = {f, f, width / 2.0, height / 2.0};

  // Rows of R are the camera axes in ego coordinates (ego: x forward, y
  // left, z up; camera: x right, y down, z forward). The camera looks along
  // ego yaw `yaw` from a mount point on a circle around the ego origin.
  const double c = std::cos(yaw), s = std::sin(yaw);
  geom::Mat3 r;
  r(0, 0) = s;   r(0, 1) = -c;  r(0, 2) = 0.0;
  r(1, 0) = 0.0; r(1, 1) = 0.0; r(1, 2) = -1.0;
  r(2, 0) = c;   r(2, 1) = s;   r(2, 2) = 0.0;
  const geom::Vec3 center{mount_radius * c, mount_radius * s, mount_height};
  cam.ego_to_cam.rotation = r;
  cam.ego_to_cam.translation = -1.0 * (r * center);
  return cam;
}

}  // namespace

std::vector<geom::Camera> surround_rig(int width, int height) {
  std::vector<geom::Camera> rig;
  rig.reserve(6);
  for (int i = 0; i < 6; ++i)
    rig.push_back(
        make_camera("cam" + std::to_string(i), 60.0 * i, width, height, 70.0, 1.0, 1.6));
  return rig;
}

std::vector<geom::Camera> waymo_rig(int width, int height) {
  return {make_camera("front", 0.0, width, height, 70.0, 1.5, 2.0),
          make_camera("front_left", 45.0, width, height, 70.0, 1.5, 2.0),
          make_camera("front_right", -45.0, width, height, 70.0, 1.5, 2.0),
          make_camera("side_left", 90.0, width, height, 70.0, 1.5, 2.0),
          make_camera("side_right", -90.0, width, height, 70.0, 1.5, 2.0)};
}

Scene::Scene(int id, LabelMode mode, std::vector<geom::Camera> cameras,
             std::vector<geom::Box3D> gt, std::vector<std::vector<Ann2D>> ann2d,
             std::vector<depth::DepthMap> depth_maps)
    : id_(id),
      mode_(mode),
      cameras_(std::move(cameras)),
      gt_(std::move(gt)),
      ann2d_(std::move(ann2d)),
      depth_maps_(std::move(depth_maps)) {
  if (ann2d_.size() != cameras_.size() || depth_maps_.size() != cameras_.size())
    throw std::invalid_argument("Scene: per-camera lists must match the rig size");
}

const std::vector<geom::Box3D>& Scene::gt3d() const {
  if (mode_ == LabelMode::only2d)
    throw LabelAccessError("scene " + std::to_string(id_) + " carries 2D labels only");
  return gt_;
}

void Scene::set_init_preds(std::vector<geom::Box3D> preds, std::vector<int> source) {
  if (preds.size() != source.size())
    throw std::invalid_argument("set_init_preds: parallel lists differ in length");
  init_preds_ = std::move(preds);
  init_src_ = std::move(source);
}

namespace {

void validate_gen(const GenConfig& g) {
  if (g.min_boxes < 0 || g.max_boxes < g.min_boxes)
    throw ConfigError("gen: box count range invalid");
  if (!(g.spawn_radius_min > 0.0) || !(g.spawn_radius_max > g.spawn_radius_min))
    throw ConfigError("gen: spawn radius range invalid");
  if (g.dim_jitter < 0.0 || g.dim_jitter > 0.9)
    throw ConfigError("gen: dim_jitter outside [0, 0.9]");
  if (g.max_speed < 0.0) throw ConfigError("gen: max_speed negative");
  if (g.classes.empty()) throw ConfigError("gen: class set empty");
  for (const ClassSpec& c : g.classes)
    if (c.name.empty() || c.length <= 0.0 || c.width <= 0.0 || c.height <= 0.0)
      throw ConfigError("gen: class spec invalid: " + c.name);
  for (std::size_t i = 0; i < g.classes.size(); ++i)
    for (std::size_t j = i + 1; j < g.classes.size(); ++j)
      if (g.classes[i].name == g.classes[j].name)
        throw ConfigError("gen: duplicate class name " + g.classes[i].name);
  if (g.num_attributes < 1) throw ConfigError("gen: num_attributes < 1");
  if (g.max_rejections < 1) throw ConfigError("gen: max_rejections < 1");
}

void validate_noise(const NoiseConfig& n) {
  if (n.center_sigma < 0.0 || n.scale_sigma < 0.0 || n.yaw_sigma < 0.0 || n.vel_sigma < 0.0)
    throw ConfigError("noise: negative sigma");
  for (double rate : {n.drop_rate, n.spurious_rate, n.class_flip_rate})
    if (rate < 0.0 || rate > 1.0) throw ConfigError("noise: rate outside [0, 1]");
}

double bev_circle_radius(const geom::Box3D& b) { return 0.5 * std::hypot(b.length, b.width); }

}  // namespace

Scene generate_scene(std::uint64_t seed, const GenConfig& cfg,
                     const std::vector<geom::Camera>& rig, int id, LabelMode mode) {
  validate_gen(cfg);
  if (rig.empty()) throw ConfigError("generate_scene: camera rig empty");
  for (const geom::Camera& cam : rig) geom::validate_camera(cam);

  SplitMix64 rng(seed);
  const int n_boxes = rng.uniform_int(cfg.min_boxes, cfg.max_boxes);
  std::vector<geom::Box3D> boxes;
  boxes.reserve(n_boxes);
  for (int b = 0; b < n_boxes; ++b) {
    int rejections = 0;
    for (;;) {
      if (rejections >= cfg.max_rejections)
        throw PlacementFailure("generate_scene: box " + std::to_string(b) + " of scene " +
                               std::to_string(id) + " rejected " +
                               std::to_string(cfg.max_rejections) + " times");
      const int cls = rng.uniform_int(0, static_cast<int>(cfg.classes.size()) - 1);
      const ClassSpec& spec = cfg.classes[cls];
      const double r = rng.uniform(cfg.spawn_radius_min, cfg.spawn_radius_max);
      const double phi = rng.uniform(-geom::kPi, geom::kPi);
      geom::Box3D box;
      box.length = spec.length * (1.0 + cfg.dim_jitter * (2.0 * rng.uniform01() - 1.0));
      box.width = spec.width * (1.0 + cfg.dim_jitter * (2.0 * rng.uniform01() - 1.0));
      box.height = spec.height * (1.0 + cfg.dim_jitter * (2.0 * rng.uniform01() - 1.0));
      box.center = {r * std::cos(phi), r * std::sin(phi), box.height / 2.0};
      box.yaw = geom::wrap_angle(rng.uniform(-geom::kPi, geom::kPi));
      box.vx = rng.uniform(-cfg.max_speed, cfg.max_speed);
      box.vy = rng.uniform(-cfg.max_speed, cfg.max_speed);
      box.class_id = cls;
      box.attribute_id = rng.uniform_int(0, cfg.num_attributes - 1);
      box.score = 1.0;

      bool clear = true;
      for (const geom::Box3D& other : boxes) {
        const double d =
            std::hypot(box.center.x - other.center.x, box.center.y - other.center.y);
        if (d < bev_circle_radius(box) + bev_circle_radius(other)) {
          clear = false;
          break;
        }
      }
      if (clear) {
        boxes.push_back(box);
        break;
      }
      ++rejections;
    }
  }

  std::vector<std::vector<Ann2D>> ann(rig.size());
  std::vector<depth::DepthMap> maps;
  maps.reserve(rig.size());
  for (std::size_t c = 0; c < rig.size(); ++c) {
    for (std::size_t g = 0; g < boxes.size(); ++g)
      if (const auto bb = geom::project_box(rig[c], boxes[g]))
        ann[c].push_back({*bb, boxes[g].class_id, boxes[g].attribute_id, static_cast<int>(g)});
    maps.push_back(depth::render_synthetic_depth(boxes, rig[c]));
  }
  return Scene(id, mode, rig, std::move(boxes), std::move(ann), std::move(maps));
}

Predictions perturb_predictions(const Scene& scene, const GenConfig& gen,
                                const NoiseConfig& noise, std::uint64_t seed) {
  validate_gen(gen);
  validate_noise(noise);
  SplitMix64 rng(seed);
  const auto& gts = scene.gt3d_eval_only();
  const int n_classes = static_cast<int>(gen.classes.size());

  Predictions out;
  for (std::size_t k = 0; k < gts.size(); ++k) {
    if (rng.uniform01() < noise.drop_rate) continue;
    geom::Box3D b = gts[k];
    b.center.x += noise.center_sigma * rng.normal();
    b.center.y += noise.center_sigma * rng.normal();
    b.center.z += noise.center_sigma * rng.normal();
    b.length *= std::max(0.2, 1.0 + noise.scale_sigma * rng.normal());
    b.width *= std::max(0.2, 1.0 + noise.scale_sigma * rng.normal());
    b.height *= std::max(0.2, 1.0 + noise.scale_sigma * rng.normal());
    b.yaw = geom::wrap_angle(b.yaw + noise.yaw_sigma * rng.normal());
    b.vx += noise.vel_sigma * rng.normal();
    b.vy += noise.vel_sigma * rng.normal();
    if (n_classes > 1 && rng.uniform01() < noise.class_flip_rate) {
      int other = rng.uniform_int(0, n_classes - 2);
      if (other >= b.class_id) ++other;
      b.class_id = other;
    }
    b.score = rng.uniform(0.3, 1.0);
    out.boxes.push_back(b);
    out.source_gt.push_back(static_cast<int>(k));
  }
  for (std::size_t k = 0; k < gts.size(); ++k) {
    if (rng.uniform01() >= noise.spurious_rate) continue;
    const int cls = rng.uniform_int(0, n_classes - 1);
    const ClassSpec& spec = gen.classes[cls];
    geom::Box3D b;
    b.length = spec.length * (1.0 + gen.dim_jitter * (2.0 * rng.uniform01() - 1.0));
    b.width = spec.width * (1.0 + gen.dim_jitter * (2.0 * rng.uniform01() - 1.0));
    b.height = spec.height * (1.0 + gen.dim_jitter * (2.0 * rng.uniform01() - 1.0));
    const double r = rng.uniform(gen.spawn_radius_min, gen.spawn_radius_max);
    const double phi = rng.uniform(-geom::kPi, geom::kPi);
    b.center = {r * std::cos(phi), r * std::sin(phi), b.height / 2.0};
    b.yaw = geom::wrap_angle(rng.uniform(-geom::kPi, geom::kPi));
    b.vx = rng.uniform(-gen.max_speed, gen.max_speed);
    b.vy = rng.uniform(-gen.max_speed, gen.max_speed);
    b.class_id = cls;
    b.attribute_id = rng.uniform_int(0, gen.num_attributes - 1);
    b.score = rng.uniform(0.3, 1.0);
    out.boxes.push_back(b);
    out.source_gt.push_back(-1);
  }
  return out;
}

int Dataset::full3d_count() const {
  const DatasetConfig& c = manifest.config;
  const long n = std::lround(c.scene_count * c.full3d_fraction);
  return static_cast<int>(std::clamp(n, 0L, static_cast<long>(c.scene_count)));
}

std::vector<std::string> Dataset::class_names() const {
  std::vector<std::string> names;
  names.reserve(manifest.config.gen.classes.size());
  for (const ClassSpec& c : manifest.config.gen.classes) names.push_back(c.name);
  return names;
}

namespace {

void validate_dataset_config(const DatasetConfig& cfg) {
  if (cfg.scene_count < 1) throw ConfigError("dataset: scene_count < 1");
  if (!(cfg.full3d_fraction >= 0.0 && cfg.full3d_fraction <= 1.0))
    throw ConfigError("dataset: full3d_fraction outside [0, 1]");
  if (cfg.rig != "surround6" && cfg.rig != "waymo5")
    throw ConfigError("dataset: unknown rig '" + cfg.rig + "' (surround6 or waymo5)");
  if (cfg.image_width < 16 || cfg.image_height < 16)
    throw ConfigError("dataset: image size too small");
  validate_gen(cfg.gen);
  validate_noise(cfg.noise);
}

std::vector<geom::Camera> make_rig(const DatasetConfig& cfg) {
  return cfg.rig == "surround6" ? surround_rig(cfg.image_width, cfg.image_height)
                                : waymo_rig(cfg.image_width, cfg.image_height);
}

}  // namespace

Dataset generate_dataset(const DatasetConfig& cfg) {
  validate_dataset_config(cfg);
  Dataset ds;
  ds.manifest.version = 1;
  ds.manifest.config = cfg;
  ds.manifest.cameras = make_rig(cfg);
  const int n3d = ds.full3d_count();
  ds.scenes.reserve(cfg.scene_count);
  for (int k = 0; k < cfg.scene_count; ++k) {
    const LabelMode mode = k < n3d ? LabelMode::full3d : LabelMode::only2d;
    const std::uint64_t sk = static_cast<std::uint64_t>(k);
    Scene scene =
        generate_scene(derive_seed(cfg.seed, 2 * sk), cfg.gen, ds.manifest.cameras, k, mode);
    Predictions preds =
        perturb_predictions(scene, cfg.gen, cfg.noise, derive_seed(cfg.seed, 2 * sk + 1));
    scene.set_init_preds(std::move(preds.boxes), std::move(preds.source_gt));
    ds.scenes.push_back(std::move(scene));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

ordered_json box3d_json(const geom::Box3D& b) {
  ordered_json j;
  j["center"] = {b.center.x, b.center.y, b.center.z};
  j["dims"] = {b.length, b.width, b.height};
  j["yaw"] = b.yaw;
  j["vel"] = {b.vx, b.vy};
  j["class"] = b.class_id;
  j["attribute"] = b.attribute_id;
  return j;
}

geom::Box3D box3d_from_json(const ordered_json& j) {
  geom::Box3D b;
  b.center = {j.at("center").at(0).get<double>(), j.at("center").at(1).get<double>(),
              j.at("center").at(2).get<double>()};
  b.length = j.at("dims").at(0).get<double>();
  b.width = j.at("dims").at(1).get<double>();
  b.height = j.at("dims").at(2).get<double>();
  b.yaw = j.at("yaw").get<double>();
  b.vx = j.at("vel").at(0).get<double>();
  b.vy = j.at("vel").at(1).get<double>();
  b.class_id = j.at("class").get<int>();
  b.attribute_id = j.at("attribute").get<int>();
  return b;
}

ordered_json ann_json(const Ann2D& a) {
  ordered_json j;
  j["box"] = {a.box.x, a.box.y, a.box.w, a.box.h};
  j["depth"] = a.box.depth;
  j["class"] = a.class_id;
  j["attribute"] = a.attribute_id;
  j["gt"] = a.gt_index;
  return j;
}

Ann2D ann_from_json(const ordered_json& j) {
  Ann2D a;
  a.box.x = j.at("box").at(0).get<double>();
  a.box.y = j.at("box").at(1).get<double>();
  a.box.w = j.at("box").at(2).get<double>();
  a.box.h = j.at("box").at(3).get<double>();
  a.box.depth = j.at("depth").get<double>();
  a.class_id = j.at("class").get<int>();
  a.attribute_id = j.at("attribute").get<int>();
  a.gt_index = j.at("gt").get<int>();
  return a;
}

ordered_json camera_json(const geom::Camera& c) {
  ordered_json j;
  j["id"] = c.id;
  j["width"] = c.width;
  j["height"] = c.height;
  j["fx"] = c.intrinsics.fx;
  j["fy"] = c.intrinsics.fy;
  j["cx"] = c.intrinsics.cx;
  j["cy"] = c.intrinsics.cy;
  j["rotation"] = c.ego_to_cam.rotation.m;
  j["translation"] = {c.ego_to_cam.translation.x, c.ego_to_cam.translation.y,
                      c.ego_to_cam.translation.z};
  return j;
}

geom::Camera camera_from_json(const ordered_json& j) {
  geom::Camera c;
  c.id = j.at("id").get<std::string>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.intrinsics = {j.at("fx").get<double>(), j.at("fy").get<double>(), j.at("cx").get<double>(),
                  j.at("cy").get<double>()};
  const auto& r = j.at("rotation");
  for (int k = 0; k < 9; ++k) c.ego_to_cam.rotation.m[k] = r.at(k).get<double>();
  c.ego_to_cam.translation = {j.at("translation").at(0).get<double>(),
                              j.at("translation").at(1).get<double>(),
                              j.at("translation").at(2).get<double>()};
  return c;
}

ordered_json gen_json(const GenConfig& g) {
  ordered_json j;
  j["min_boxes"] = g.min_boxes;
  j["max_boxes"] = g.max_boxes;
  j["spawn_radius_min"] = g.spawn_radius_min;
  j["spawn_radius_max"] = g.spawn_radius_max;
  j["dim_jitter"] = g.dim_jitter;
  j["max_speed"] = g.max_speed;
  j["classes"] = ordered_json::array();
  for (const ClassSpec& c : g.classes)
    j["classes"].push_back({{"name", c.name}, {"dims", {c.length, c.width, c.height}}});
  j["num_attributes"] = g.num_attributes;
  j["max_rejections"] = g.max_rejections;
  return j;
}

GenConfig gen_from_json(const ordered_json& j) {
  GenConfig g;
  g.min_boxes = j.at("min_boxes").get<int>();
  g.max_boxes = j.at("max_boxes").get<int>();
  g.spawn_radius_min = j.at("spawn_radius_min").get<double>();
  g.spawn_radius_max = j.at("spawn_radius_max").get<double>();
  g.dim_jitter = j.at("dim_jitter").get<double>();
  g.max_speed = j.at("max_speed").get<double>();
  g.classes.clear();
  for (const auto& cj : j.at("classes"))
    g.classes.push_back({cj.at("name").get<std::string>(), cj.at("dims").at(0).get<double>(),
                         cj.at("dims").at(1).get<double>(), cj.at("dims").at(2).get<double>()});
  g.num_attributes = j.at("num_attributes").get<int>();
  g.max_rejections = j.at("max_rejections").get<int>();
  return g;
}

ordered_json noise_json(const NoiseConfig& n) {
  ordered_json j;
  j["center_sigma"] = n.center_sigma;
  j["scale_sigma"] = n.scale_sigma;
  j["yaw_sigma"] = n.yaw_sigma;
  j["vel_sigma"] = n.vel_sigma;
  j["drop_rate"] = n.drop_rate;
  j["spurious_rate"] = n.spurious_rate;
  j["class_flip_rate"] = n.class_flip_rate;
  return j;
}

NoiseConfig noise_from_json(const ordered_json& j) {
  NoiseConfig n;
  n.center_sigma = j.at("center_sigma").get<double>();
  n.scale_sigma = j.at("scale_sigma").get<double>();
  n.yaw_sigma = j.at("yaw_sigma").get<double>();
  n.vel_sigma = j.at("vel_sigma").get<double>();
  n.drop_rate = j.at("drop_rate").get<double>();
  n.spurious_rate = j.at("spurious_rate").get<double>();
  n.class_flip_rate = j.at("class_flip_rate").get<double>();
  return n;
}

ordered_json scene_json(const Scene& s) {
  ordered_json j;
  j["id"] = s.id();
  j["label_mode"] = to_string(s.label_mode());
  j["gt3d"] = ordered_json::array();
  for (const geom::Box3D& b : s.gt3d_eval_only()) j["gt3d"].push_back(box3d_json(b));
  j["init_preds"] = ordered_json::array();
  for (std::size_t k = 0; k < s.init_preds().size(); ++k) {
    ordered_json pj = box3d_json(s.init_preds()[k]);
    pj["score"] = s.init_preds()[k].score;
    pj["src"] = s.init_pred_source()[k];
    j["init_preds"].push_back(std::move(pj));
  }
  j["ann2d"] = ordered_json::object();
  for (std::size_t c = 0; c < s.cameras().size(); ++c) {
    ordered_json arr = ordered_json::array();
    for (const Ann2D& a : s.ann2d()[c]) arr.push_back(ann_json(a));
    j["ann2d"][s.cameras()[c].id] = std::move(arr);
  }
  return j;
}

std::string crc32_hex_of_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  uLong crc = ::crc32(0L, Z_NULL, 0);
  char buf[65536];
  for (;;) {
    in.read(buf, sizeof(buf));
    const std::streamsize got = in.gcount();
    if (got > 0)
      crc = ::crc32(crc, reinterpret_cast<const Bytef*>(buf), static_cast<uInt>(got));
    if (got < static_cast<std::streamsize>(sizeof(buf))) break;
  }
  if (in.bad()) throw Error("read failed for " + p.string());
  char hex[16];
  std::snprintf(hex, sizeof(hex), "%08lx", static_cast<unsigned long>(crc));
  return hex;
}

std::string depth_file_name(int scene_id, const std::string& camera_id) {
  return "depth/" + std::to_string(scene_id) + "_" + camera_id + ".dpm";
}

ordered_json manifest_json(const DatasetManifest& m, const std::vector<FileEntry>& files,
                           int full3d_count) {
  const DatasetConfig& cfg = m.config;
  ordered_json j;
  j["version"] = m.version;
  j["seed"] = cfg.seed;
  j["scene_count"] = cfg.scene_count;
  j["split"] = {{"full3d_fraction", cfg.full3d_fraction}, {"full3d_count", full3d_count}};
  j["classes"] = ordered_json::array();
  for (const ClassSpec& c : cfg.gen.classes) j["classes"].push_back(c.name);
  j["num_attributes"] = cfg.gen.num_attributes;
  j["rig"] = ordered_json::object();
  j["rig"]["name"] = cfg.rig;
  j["rig"]["image_width"] = cfg.image_width;
  j["rig"]["image_height"] = cfg.image_height;
  j["rig"]["cameras"] = ordered_json::array();
  for (const geom::Camera& c : m.cameras) j["rig"]["cameras"].push_back(camera_json(c));
  j["gen_config"] = gen_json(cfg.gen);
  j["noise_config"] = noise_json(cfg.noise);
  j["files"] = ordered_json::array();
  for (const FileEntry& f : files)
    j["files"].push_back({{"path", f.path}, {"crc32", f.crc32}});
  return j;
}

}  // namespace

void write_dataset(const Dataset& ds, const fs::path& dir) {
  if (static_cast<int>(ds.scenes.size()) != ds.manifest.config.scene_count)
    throw std::invalid_argument("write_dataset: scene list does not match the manifest");
  fs::create_directories(dir / "depth");

  {
    std::ofstream out(dir / "scenes.jsonl", std::ios::binary | std::ios::trunc);
    if (!out) throw Error("write_dataset: cannot open " + (dir / "scenes.jsonl").string());
    for (const Scene& s : ds.scenes) out << scene_json(s).dump() << '\n';
    if (!out) throw Error("write_dataset: write failed for scenes.jsonl");
  }

  std::vector<FileEntry> files;
  files.push_back({"scenes.jsonl", crc32_hex_of_file(dir / "scenes.jsonl")});
  for (const Scene& s : ds.scenes) {
    for (std::size_t c = 0; c < s.cameras().size(); ++c) {
      const std::string rel = depth_file_name(s.id(), s.cameras()[c].id);
      depth::save_depth_map(s.depth_maps()[c], dir / rel);
      files.push_back({rel, crc32_hex_of_file(dir / rel)});
    }
  }

  std::ofstream out(dir / "manifest.json", std::ios::binary | std::ios::trunc);
  if (!out) throw Error("write_dataset: cannot open " + (dir / "manifest.json").string());
  out << manifest_json(ds.manifest, files, ds.full3d_count()).dump(2) << '\n';
  if (!out) throw Error("write_dataset: write failed for manifest.json");
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.json";
  std::ifstream min(mpath, std::ios::binary);
  if (!min) throw Error("read_dataset: missing " + mpath.string());
  ordered_json mj;
  try {
    mj = ordered_json::parse(min);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("manifest.json: " + std::string(e.what()), e.byte);
  }

  Dataset ds;
  int manifest_full3d_count = 0;
  try {
    const int version = mj.at("version").get<int>();
    if (version != 1)
      throw UnsupportedVersion("manifest.json: version " + std::to_string(version) +
                               " unsupported (expected 1)");
    DatasetConfig cfg;
    cfg.seed = mj.at("seed").get<std::uint64_t>();
    cfg.scene_count = mj.at("scene_count").get<int>();
    cfg.full3d_fraction = mj.at("split").at("full3d_fraction").get<double>();
    manifest_full3d_count = mj.at("split").at("full3d_count").get<int>();
    const auto& rig = mj.at("rig");
    cfg.rig = rig.at("name").get<std::string>();
    cfg.image_width = rig.at("image_width").get<int>();
    cfg.image_height = rig.at("image_height").get<int>();
    cfg.gen = gen_from_json(mj.at("gen_config"));
    cfg.noise = noise_from_json(mj.at("noise_config"));

    const auto& names = mj.at("classes");
    if (names.size() != cfg.gen.classes.size())
      throw FormatError("manifest.json: class list does not match gen_config", 0);
    for (std::size_t i = 0; i < cfg.gen.classes.size(); ++i)
      if (names.at(i).get<std::string>() != cfg.gen.classes[i].name)
        throw FormatError("manifest.json: class list does not match gen_config", 0);
    if (mj.at("num_attributes").get<int>() != cfg.gen.num_attributes)
      throw FormatError("manifest.json: num_attributes does not match gen_config", 0);

    ds.manifest.version = version;
    ds.manifest.config = cfg;
    for (const auto& cj : rig.at("cameras")) ds.manifest.cameras.push_back(camera_from_json(cj));
    for (const auto& fj : mj.at("files"))
      ds.manifest.files.push_back(
          {fj.at("path").get<std::string>(), fj.at("crc32").get<std::string>()});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest.json: " + std::string(e.what()), 0);
  }

  if (manifest_full3d_count != ds.full3d_count())
    throw FormatError("manifest.json: full3d_count does not match the split fraction", 0);
  for (const geom::Camera& cam : ds.manifest.cameras) {
    try {
      geom::validate_camera(cam);
    } catch (const std::invalid_argument& e) {
      throw FormatError("manifest.json: camera " + cam.id + ": " + e.what(), 0);
    }
  }

  bool scenes_listed = false;
  for (const FileEntry& f : ds.manifest.files) {
    if (f.path.empty() || f.path.front() == '/' || f.path.find("..") != std::string::npos)
      throw FormatError("manifest.json: unsafe file path " + f.path, 0);
    if (f.path == "scenes.jsonl") scenes_listed = true;
    const fs::path p = dir / f.path;
    if (!fs::exists(p)) throw Error("read_dataset: missing dataset file " + f.path);
    const std::string crc = crc32_hex_of_file(p);
    if (crc != f.crc32)
      throw ChecksumMismatch("read_dataset: " + f.path + ": crc32 " + crc +
                             " does not match manifest " + f.crc32);
  }
  if (!scenes_listed) throw FormatError("manifest.json: scenes.jsonl not listed in files", 0);

  const int n3d = ds.full3d_count();
  const int n_classes = static_cast<int>(ds.manifest.config.gen.classes.size());
  const int n_attrs = ds.manifest.config.gen.num_attributes;

  std::ifstream sin(dir / "scenes.jsonl", std::ios::binary);
  if (!sin) throw Error("read_dataset: missing " + (dir / "scenes.jsonl").string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(sin, line)) {
    ++line_no;
    const std::string where = "scenes.jsonl line " + std::to_string(line_no);
    if (line.empty()) throw FormatError(where + ": empty line", line_no);
    ordered_json sj;
    try {
      sj = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(where + ": " + e.what(), line_no);
    }
    try {
      const int id = sj.at("id").get<int>();
      if (id != static_cast<int>(line_no) - 1)
        throw FormatError(where + ": scene ids must be sequential from 0", line_no);
      const LabelMode mode = label_mode_from_string(sj.at("label_mode").get<std::string>());
      const LabelMode expected = id < n3d ? LabelMode::full3d : LabelMode::only2d;
      if (mode != expected)
        throw FormatError(where + ": label mode contradicts the manifest split", line_no);

      std::vector<geom::Box3D> gt;
      for (const auto& bj : sj.at("gt3d")) {
        geom::Box3D b = box3d_from_json(bj);
        b.score = 1.0;
        if (b.class_id < 0 || b.class_id >= n_classes)
          throw FormatError(where + ": gt class out of range", line_no);
        if (b.attribute_id < 0 || b.attribute_id >= n_attrs)
          throw FormatError(where + ": gt attribute out of range", line_no);
        geom::validate(b);
        gt.push_back(b);
      }

      std::vector<geom::Box3D> preds;
      std::vector<int> src;
      for (const auto& bj : sj.at("init_preds")) {
        geom::Box3D b = box3d_from_json(bj);
        b.score = bj.at("score").get<double>();
        const int s = bj.at("src").get<int>();
        if (b.class_id < 0 || b.class_id >= n_classes)
          throw FormatError(where + ": prediction class out of range", line_no);
        if (b.attribute_id < 0 || b.attribute_id >= n_attrs)
          throw FormatError(where + ": prediction attribute out of range", line_no);
        if (s < -1 || s >= static_cast<int>(gt.size()))
          throw FormatError(where + ": prediction src out of range", line_no);
        geom::validate(b);
        preds.push_back(b);
        src.push_back(s);
      }

      const auto& cams = ds.manifest.cameras;
      const auto& aj = sj.at("ann2d");
      if (aj.size() != cams.size())
        throw FormatError(where + ": ann2d camera set does not match the rig", line_no);
      std::vector<std::vector<Ann2D>> ann(cams.size());
      std::vector<depth::DepthMap> maps;
      maps.reserve(cams.size());
      for (std::size_t c = 0; c < cams.size(); ++c) {
        if (!aj.contains(cams[c].id))
          throw FormatError(where + ": ann2d missing camera " + cams[c].id, line_no);
        for (const auto& ej : aj.at(cams[c].id)) {
          Ann2D a = ann_from_json(ej);
          if (a.class_id < 0 || a.class_id >= n_classes)
            throw FormatError(where + ": annotation class out of range", line_no);
          if (a.attribute_id < 0 || a.attribute_id >= n_attrs)
            throw FormatError(where + ": annotation attribute out of range", line_no);
          if (a.gt_index < 0 || a.gt_index >= static_cast<int>(gt.size()))
            throw FormatError(where + ": annotation gt index out of range", line_no);
          geom::validate(a.box);
          ann[c].push_back(a);
        }
        depth::DepthMap map = depth::load_depth_map(dir / depth_file_name(id, cams[c].id));
        if (map.width() != cams[c].width || map.height() != cams[c].height)
          throw FormatError(where + ": depth map dimensions do not match camera " + cams[c].id,
                            4);
        maps.push_back(std::move(map));
      }

      Scene scene(id, mode, cams, std::move(gt), std::move(ann), std::move(maps));
      scene.set_init_preds(std::move(preds), std::move(src));
      ds.scenes.push_back(std::move(scene));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(where + ": " + e.what(), line_no);
    } catch (const std::invalid_argument& e) {
      throw FormatError(where + ": " + e.what(), line_no);
    }
  }
  if (static_cast<int>(ds.scenes.size()) != ds.manifest.config.scene_count)
    throw FormatError("scenes.jsonl: scene count does not match the manifest", line_no);
  return ds;
}

}  // namespace bevtune::scenegen
