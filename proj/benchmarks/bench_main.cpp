// SPDX-License-Identifier: Apache-2.0
#include <benchmark/benchmark.h>

#include <vector>

#include "dgod/autograd.hpp"
#include "dgod/detector.hpp"
#include "dgod/metrics.hpp"
#include "dgod/rng.hpp"
#include "dgod/toydata.hpp"

namespace {

using namespace dgod;

ag::Var random_var(ag::Shape shape, Rng& rng, bool param) {
  std::vector<double> v(ag::numel(shape));
  for (auto& x : v) x = rng.normal();
  return param ? ag::Var::parameter(shape, v) : ag::Var::constant(shape, v);
}

void BM_Conv2dForwardBackward(benchmark::State& state) {
  const int c = static_cast<int>(state.range(0));
  Rng rng(1);
  ag::Var x = random_var({c, 32, 32}, rng, false);
  ag::Var w = random_var({c, c * 9}, rng, true);
  ag::Var b = random_var({c}, rng, true);
  for (auto _ : state) {
    w.zero_grad();
    b.zero_grad();
    ag::backward(ag::sum(ag::conv2d(x, w, b, 3, 1, 1)));
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_Conv2dForwardBackward)->Arg(8)->Arg(16)->Arg(32);

void BM_RoiAlign(benchmark::State& state) {
  Rng rng(2);
  ag::Var fmap = random_var({32, 8, 8}, rng, true);
  std::vector<BoundingBox> boxes;
  for (int i = 0; i < state.range(0); ++i) {
    const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
    boxes.push_back({x, y, rng.uniform(8, 24), rng.uniform(8, 24)});
  }
  for (auto _ : state) {
    fmap.zero_grad();
    ag::backward(ag::sum(ag::roi_align(fmap, boxes, 1.0 / 8, 2, 2)));
    benchmark::ClobberMemory();
  }
}
BENCHMARK(BM_RoiAlign)->Arg(32)->Arg(128);

void BM_PooledAveragePrecision(benchmark::State& state) {
  Rng rng(3);
  const int images = static_cast<int>(state.range(0));
  std::vector<std::vector<ScoredBox>> preds(images);
  std::vector<std::vector<BoundingBox>> gts(images);
  for (int i = 0; i < images; ++i) {
    for (int g = 0; g < 3; ++g) gts[i].push_back({rng.uniform(0, 50), rng.uniform(0, 50), 12, 12});
    for (int p = 0; p < 10; ++p)
      preds[i].push_back({{rng.uniform(0, 50), rng.uniform(0, 50), 12, 12}, rng.uniform()});
  }
  for (auto _ : state) benchmark::DoNotOptimize(average_precision(preds, gts));
}
BENCHMARK(BM_PooledAveragePrecision)->Arg(100)->Arg(1000);

void BM_DetectorForward(benchmark::State& state) {
  const ReferenceDetector det;
  const DetectorParams params = det.init_params(4);
  ToySpec spec;
  spec.seed = 5;
  spec.images_per_domain = 1;
  const Image image = generate_toy_dataset(spec).source.domains[0][0].image;
  for (auto _ : state) benchmark::DoNotOptimize(detect(det, params, image));
}
BENCHMARK(BM_DetectorForward);

void BM_ToyGeneration(benchmark::State& state) {
  ToySpec spec;
  spec.seed = 6;
  spec.images_per_domain = 10;
  for (auto _ : state) benchmark::DoNotOptimize(generate_toy_dataset(spec));
}
BENCHMARK(BM_ToyGeneration);

}  // namespace

BENCHMARK_MAIN();
