#include <benchmark/benchmark.h>

#include <random>

#include "fodpipe/fbc.hpp"
#include "fodpipe/fodfield.hpp"
#include "fodpipe/kernel.hpp"

using namespace fodpipe;

namespace {

const OrientationSet& tess3() {
  static const OrientationSet t = tessellate_sphere(3);
  return t;
}

const EnhancementKernel& kernel(int hw) {
  static const EnhancementKernel k2 = discretize_kernel({1.0, 0.04, 1.4}, 2, tess3(), 1e-3);
  static const EnhancementKernel k3 = discretize_kernel({1.0, 0.04, 1.4}, 3, tess3(), 1e-3);
  return hw == 2 ? k2 : k3;
}

FODField random_field(int n) {
  Grid g;
  g.dims = {n, n, n};
  FODField f(g, 8);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> d;
  for (Eigen::Index i = 0; i < f.coeffs.size(); ++i) f.coeffs.data()[i] = d(rng);
  return f;
}

void BM_DiscretizeKernel(benchmark::State& state) {
  const int hw = static_cast<int>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(discretize_kernel({1.0, 0.04, 1.4}, hw, tess3(), 1e-3));
}
BENCHMARK(BM_DiscretizeKernel)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_CompileOperator(benchmark::State& state) {
  const EnhancementKernel& k = kernel(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(ShiftTwistOperator::compile(k, 8));
}
BENCHMARK(BM_CompileOperator)->Arg(2)->Arg(3)->Unit(benchmark::kMillisecond);

void BM_ApplyOperator(benchmark::State& state) {
  const ShiftTwistOperator op = ShiftTwistOperator::compile(kernel(2), 8);
  const FODField f = random_field(static_cast<int>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(op.apply(f));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.num_voxels()));
}
BENCHMARK(BM_ApplyOperator)->Arg(8)->Arg(16)->Unit(benchmark::kMillisecond);

void BM_ConvolveSampled(benchmark::State& state) {
  const FODField f = random_field(static_cast<int>(state.range(0)));
  ConvolveOptions o;
  o.engine = ConvolutionEngine::Sampled;
  for (auto _ : state) benchmark::DoNotOptimize(shift_twist_convolve(kernel(2), f, o));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(f.num_voxels()));
}
BENCHMARK(BM_ConvolveSampled)->Arg(8)->Unit(benchmark::kMillisecond);

OrientedPointSet parallel_bundle(int n_fibers) {
  Tractogram t;
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d(0.0, 1.0);
  for (int i = 0; i < n_fibers; ++i) {
    Streamline s;
    const double y = d(rng), z = d(rng);
    for (int k = 0; k <= 30; ++k) s.points.push_back(Vec3(k, y + 0.05 * d(rng), z + 0.05 * d(rng)));
    t.streamlines.push_back(std::move(s));
  }
  return build_oriented_set(t, 1.0);
}

void BM_LFBC(benchmark::State& state) {
  const OrientedPointSet gamma = parallel_bundle(static_cast<int>(state.range(0)));
  LFBCOptions o;
  o.use_cutoff = state.range(1) != 0;
  for (auto _ : state) benchmark::DoNotOptimize(compute_lfbc(gamma, {1.0, 0.04, 1.4}, o));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(gamma.total_oriented_points()));
}
BENCHMARK(BM_LFBC)->Args({50, 1})->Args({50, 0})->Args({200, 1})->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
