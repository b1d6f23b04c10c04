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

#include "bevtune/losses.hpp"
#include "bevtune/rng.hpp"

namespace {

using namespace bevtune;

geom::Box2D random_box(SplitMix64& rng) {
  geom::Box2D b;
  b.x = rng.uniform(0.0, 1400.0);
  b.y = rng.uniform(0.0, 700.0);
  b.w = rng.uniform(20.0, 300.0);
  b.h = rng.uniform(20.0, 200.0);
  b.depth = rng.uniform(2.0, 55.0);
  return b;
}

void BM_GiouGrad(benchmark::State& state) {
  SplitMix64 rng(3);
  std::vector<std::pair<geom::Box2D, geom::Box2D>> pairs;
  for (int i = 0; i < 256; ++i) pairs.emplace_back(random_box(rng), random_box(rng));
  std::size_t i = 0;
  for (auto _ : state) {
    const auto g = losses::giou_grad(pairs[i % pairs.size()].first,
                                     pairs[i % pairs.size()].second);
    benchmark::DoNotOptimize(g);
    ++i;
  }
}
BENCHMARK(BM_GiouGrad);

void BM_TotalLossGrad2D(benchmark::State& state) {
  SplitMix64 rng(5);
  const int n = static_cast<int>(state.range(0));
  std::vector<losses::Prediction2DLogits> preds;
  std::vector<matching::GroundTruth2D> gts;
  matching::Assignment asg;
  for (int i = 0; i < n; ++i) {
    std::vector<double> logits(5);
    for (double& v : logits) v = rng.uniform(-2.0, 2.0);
    preds.push_back({random_box(rng), std::move(logits)});
    gts.push_back({random_box(rng), static_cast<int>(rng.uniform_int(0, 3))});
    asg.pairs.emplace_back(i, i);
  }
  const losses::LossWeights w;
  const losses::FocalParams fp;
  const matching::Normalization norm;
  for (auto _ : state) {
    const auto g = losses::total_loss_grad_2d(asg, preds, gts, w, fp, norm);
    benchmark::DoNotOptimize(g);
  }
}
BENCHMARK(BM_TotalLossGrad2D)->Arg(4)->Arg(16)->Arg(64);

}  // namespace
