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

#include "bevtune/geometry.hpp"
#include "bevtune/rng.hpp"
#include "bevtune/scenegen.hpp"

namespace {

using namespace bevtune;

std::vector<geom::Box3D> sample_boxes(int n) {
  SplitMix64 rng(7);
  std::vector<geom::Box3D> boxes;
  for (int i = 0; i < n; ++i) {
    geom::Box3D b;
    const double r = rng.uniform(6.0, 30.0);
    const double phi = rng.uniform(-geom::kPi, geom::kPi);
    b.center = {r * std::cos(phi), r * std::sin(phi), 0.8};
    b.length = rng.uniform(1.0, 8.0);
    b.width = rng.uniform(0.5, 2.5);
    b.height = rng.uniform(1.0, 3.0);
    b.yaw = geom::wrap_angle(rng.uniform(-geom::kPi, geom::kPi));
    boxes.push_back(b);
  }
  return boxes;
}

void BM_ProjectBox(benchmark::State& state) {
  const auto rig = scenegen::surround_rig();
  const auto boxes = sample_boxes(64);
  std::size_t i = 0;
  for (auto _ : state) {
    const auto bb = geom::project_box(rig[i % rig.size()], boxes[i % boxes.size()]);
    benchmark::DoNotOptimize(bb);
    ++i;
  }
}
BENCHMARK(BM_ProjectBox);

void BM_ProjectBoxJacobian(benchmark::State& state) {
  const auto rig = scenegen::surround_rig();
  const auto boxes = sample_boxes(64);
  std::size_t i = 0;
  for (auto _ : state) {
    const auto jac = geom::project_box_jacobian(rig[i % rig.size()], boxes[i % boxes.size()]);
    benchmark::DoNotOptimize(jac);
    ++i;
  }
}
BENCHMARK(BM_ProjectBoxJacobian);

}  // namespace
