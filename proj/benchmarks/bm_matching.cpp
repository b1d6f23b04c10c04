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

#include "bevtune/matching.hpp"
#include "bevtune/rng.hpp"

namespace {

using namespace bevtune;

matching::CostMatrix random_cost(int n, std::uint64_t seed) {
  SplitMix64 rng(seed);
  matching::CostMatrix cost(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) cost.at(i, j) = rng.uniform01();
  return cost;
}

void BM_Hungarian(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto cost = random_cost(n, 11);
  for (auto _ : state) {
    const auto a = matching::hungarian(cost);
    benchmark::DoNotOptimize(a);
  }
  state.SetComplexityN(n);
}
BENCHMARK(BM_Hungarian)->Arg(4)->Arg(8)->Arg(32)->Arg(128)->Complexity();

void BM_BruteForceAssignment(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto cost = random_cost(n, 11);
  for (auto _ : state) {
    const auto a = matching::brute_force_assignment(cost);
    benchmark::DoNotOptimize(a);
  }
}
BENCHMARK(BM_BruteForceAssignment)->Arg(4)->Arg(6)->Arg(8);

}  // namespace
