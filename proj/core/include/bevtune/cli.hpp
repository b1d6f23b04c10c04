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
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "bevtune/finetune.hpp"
#include "bevtune/geometry.hpp"
#include "bevtune/metrics.hpp"
#include "bevtune/scenegen.hpp"

// Command implementations behind the bevtune binary. They live in the
// library so tests can drive them in-process; the binary only parses flags.
// Commands signal usage/config problems with ConfigError (exit 2 at the
// binary level) and runtime failures with Error (exit 1); the int they
// return is the exit code of a completed run (nonzero for failed checks).
namespace bevtune::cli {

// Optional JSON configuration file shared by the commands. Sections:
//   "dataset": generation settings, consumed by `gen`
//   "train":   fine-tuning settings, consumed by `finetune`
//   "metrics": evaluation settings, consumed by `eval`
// Every key has a default; unknown keys anywhere raise ConfigError. Flags
// override file values.
struct RunConfig {
  scenegen::DatasetConfig dataset;
  finetune::TrainConfig train;
  metrics::MetricConfig metrics;  // class_names always comes from the dataset
};

RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::filesystem::path& file);

struct GenOptions {
  std::filesystem::path out_dir;
  std::filesystem::path config_file;  // empty: defaults
  std::optional<std::uint64_t> seed;
  std::optional<int> scenes;
  std::optional<double> split;  // fraction of scenes that keep 3D labels
  std::optional<std::string> rig;
  std::optional<int> image_width;
  std::optional<int> image_height;
};
int cmd_gen(const GenOptions& opt, std::ostream& out);

// Shared by the staged inspection commands project/match/loss.
struct StageOptions {
  std::filesystem::path dataset_dir;
  int scene = 0;
  std::string camera = "all";    // camera id, or "all" for per-camera sections
  std::string source = "preds";  // "preds" (noisy initialization) or "gt"
};
int cmd_project(const StageOptions& opt, std::ostream& out);
int cmd_match(const StageOptions& opt, std::ostream& out);
int cmd_loss(const StageOptions& opt, std::ostream& out);

struct GradCheckOptions {
  int trials = 200;  // must be positive
  std::uint64_t seed = 0;
  double tol_3d = 1e-3;  // relative, gradients through the projection
  double tol_2d = 1e-4;  // relative, image-plane and logit gradients
};

struct GradCheckReport {
  int trials = 0;
  int passed = 0;
  int excluded = 0;  // configurations flagged near a kink/tie/visibility edge
  int failed = 0;
  double max_rel_3d = 0.0;
  double max_rel_2d = 0.0;

  bool ok() const { return failed == 0 && excluded * 20 < trials; }
};

// Compares analytic gradients against central finite differences on random
// visible configurations, holding each trial's assignment fixed.
GradCheckReport run_grad_check(const GradCheckOptions& opt, std::ostream& out);
int cmd_grad_check(const GradCheckOptions& opt, std::ostream& out);

struct FinetuneOptions {
  std::filesystem::path dataset_dir;
  std::filesystem::path out_dir;
  std::filesystem::path config_file;  // empty: defaults
  std::optional<double> lr;
  std::optional<int> epochs;
  std::optional<double> mix;
  std::optional<int> max_steps;
  std::optional<double> grad_clip;
  std::optional<std::uint64_t> seed;
  std::optional<bool> cosine;
  bool overlays = true;
};
// Writes history.csv, metrics_initial.csv, metrics_final.csv,
// params_final.json, and overlays/scene_###.svg under out_dir.
int cmd_finetune(const FinetuneOptions& opt, std::ostream& out);

struct EvalOptions {
  std::filesystem::path dataset_dir;
  std::filesystem::path params_file;  // empty: score-initialized detector
  std::filesystem::path config_file;  // empty: default metric settings
  std::filesystem::path out_csv;      // empty: print only
};
int cmd_eval(const EvalOptions& opt, std::ostream& out);

// One SVG: a panel per camera with ground truth (green, solid), initial
// predictions (red, dashed), and final predictions (blue, solid).
std::string overlay_svg(const scenegen::Scene& scene,
                        const std::vector<geom::Box3D>& initial,
                        const std::vector<geom::Box3D>& final_boxes);

}  // namespace bevtune::cli
