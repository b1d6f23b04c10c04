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

#include <benchmark/benchmark.h>

#include "bevtune/finetune.hpp"
#include "bevtune/scenegen.hpp"

namespace {

using namespace bevtune;

scenegen::DatasetConfig small_config() {
  scenegen::DatasetConfig cfg;
  cfg.seed = 21;
  cfg.scene_count = 4;
  cfg.full3d_fraction = 0.5;
  cfg.image_width = 320;
  cfg.image_height = 180;
  return cfg;
}

void BM_GenerateScene(benchmark::State& state) {
  const auto cfg = small_config();
  const auto rig = scenegen::surround_rig(cfg.image_width, cfg.image_height);
  std::uint64_t seed = 0;
  for (auto _ : state) {
    const auto scene =
        scenegen::generate_scene(seed++, cfg.gen, rig, 0, scenegen::LabelMode::full3d);
    benchmark::DoNotOptimize(scene.ann2d());
  }
}
BENCHMARK(BM_GenerateScene);

void BM_Step2D(benchmark::State& state) {
  const auto ds = scenegen::generate_dataset(small_config());
  const finetune::TrainConfig tc;
  finetune::ToyDetector det(ds);
  const scenegen::Scene& scene = ds.scenes.back();  // only2d under the 0.5 split
  for (auto _ : state) {
    const auto r = finetune::step_2d(det, scene, tc, 1e-3);
    benchmark::DoNotOptimize(r.breakdown.total);
  }
}
BENCHMARK(BM_Step2D);

void BM_Evaluate(benchmark::State& state) {
  const auto ds = scenegen::generate_dataset(small_config());
  const finetune::ToyDetector det(ds);
  for (auto _ : state) {
    const auto rep = finetune::evaluate(det, ds);
    benchmark::DoNotOptimize(rep.nds_value);
  }
}
BENCHMARK(BM_Evaluate);

}  // namespace

BENCHMARK_MAIN();
