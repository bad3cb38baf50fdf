#include <benchmark/benchmark.h>

#include "cloudtf/blocks.hpp"
#include "cloudtf/losses.hpp"
#include "cloudtf/ops.hpp"
#include "cloudtf/raster.hpp"

using namespace cloudtf;

namespace {

Tensor random(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  for (double& v : t.data()) v = uniform(rng, lo, hi);
  return t;
}

void BM_RasterizeMax(benchmark::State& state) {
  const int dims = static_cast<int>(state.range(0));
  const auto w = static_cast<std::size_t>(state.range(1));
  const std::size_t b = 4, n = 1024, c = 16;
  Rng rng(1);
  Tensor values = random({b, n, c}, rng, -1.0, 1.0);
  Tensor keys = random({b, n, static_cast<std::size_t>(dims)}, rng, 0.0, 1.0);
  NoGradGuard guard;
  for (auto _ : state) {
    raster::Footprint fp = raster::make_footprint(keys, w);
    benchmark::DoNotOptimize(raster::rasterize_max(values, fp).data.data().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * b * n));
}
BENCHMARK(BM_RasterizeMax)->Args({2, 16})->Args({2, 64})->Args({3, 8})->Args({3, 16});

void BM_Derasterize(benchmark::State& state) {
  const int dims = static_cast<int>(state.range(0));
  const auto w = static_cast<std::size_t>(state.range(1));
  const std::size_t b = 4, n = 1024, c = 16;
  Rng rng(2);
  Shape gs{b};
  for (int a = 0; a < dims; ++a) gs.push_back(w);
  gs.push_back(c);
  Tensor grid = random(gs, rng, -1.0, 1.0);
  Tensor keys = random({b, n, static_cast<std::size_t>(dims)}, rng, 0.0, 1.0);
  NoGradGuard guard;
  for (auto _ : state) {
    raster::Footprint fp = raster::make_footprint(keys, w);
    benchmark::DoNotOptimize(raster::derasterize(grid, fp).data().data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * b * n));
}
BENCHMARK(BM_Derasterize)->Args({2, 16})->Args({3, 8});

void BM_ConvSame(benchmark::State& state) {
  const int dims = static_cast<int>(state.range(0));
  const auto w = static_cast<std::size_t>(state.range(1));
  const std::size_t b = 4, c = 16;
  Rng rng(3);
  Shape gs{b};
  for (int a = 0; a < dims; ++a) gs.push_back(w);
  gs.push_back(c);
  Tensor grid = random(gs, rng, -1.0, 1.0);
  const nn::ConvParams p = nn::ConvParams::init(dims, c, c, 3, rng);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(nn::conv_same(grid, p).data().data());
}
BENCHMARK(BM_ConvSame)->Args({2, 16})->Args({2, 32})->Args({3, 8});

void BM_MhctForwardBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const std::size_t b = 2, g = 32;
  Rng rng(4);
  HeadLayout layout;
  layout.heads_2d = 2;
  layout.heads_3d = 2;
  layout.c2d = 8;
  layout.c3d = 4;
  MhctBlock block(cascade_configs(layout, g, nn::NormKind::batch, true, 0).front(), rng);
  PointCloudBatch pc;
  pc.positions = random({b, n, 3}, rng, -1.0, 1.0);
  pc.features = random({b, n, g}, rng, -1.0, 1.0);
  Tensor r = random({b, n, g}, rng, -1.0, 1.0);
  ParameterSet params = block.parameters();
  for (auto _ : state) {
    PointCloudBatch out = block.forward(pc, {true, {}});
    backward(sum(mul(out.features, r)));
    params.zero_grad();
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * b * n));
}
BENCHMARK(BM_MhctForwardBackward)->Arg(256)->Arg(1024)->Unit(benchmark::kMillisecond);

void BM_EmdExact(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(5);
  Tensor a = random({n, 3}, rng, -1.0, 1.0), b = random({n, 3}, rng, -1.0, 1.0);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(emd_exact(a, b).item());
}
BENCHMARK(BM_EmdExact)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_Chamfer(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(6);
  Tensor a = random({n, 3}, rng, -1.0, 1.0), b = random({n, 3}, rng, -1.0, 1.0);
  NoGradGuard guard;
  for (auto _ : state) benchmark::DoNotOptimize(chamfer(a, b).item());
}
BENCHMARK(BM_Chamfer)->Arg(256)->Arg(1024);

}  // namespace

BENCHMARK_MAIN();
