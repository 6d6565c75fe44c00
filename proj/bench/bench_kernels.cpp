// Serial reference vs OpenMP kernels. Both policies produce identical results;
// this only measures the speed difference.

#include <benchmark/benchmark.h>

#include <random>

#include "apmg/kernels.hpp"
#include "apmg/render.hpp"
#include "apmg/trainer.hpp"

using namespace apmg;

namespace {

Model bench_model() {
  ModelConfig mc;
  mc.grids = 16;
  mc.resolution = {32, 32, 32};
  mc.seed = 1;
  Model m = init_model(mc);
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<float> u(-0.1f, 0.1f);
  for (auto& v : m.grids) v = u(rng);
  m.vmin = 0.f;
  m.vmax = 1.f;
  return m;
}

std::vector<Vec3f> bench_points(std::size_t n) {
  std::vector<Vec3f> pts(n);
  sample_batch(7, 0, pts);
  return pts;
}

Exec policy(const benchmark::State& state) { return state.range(1) ? Exec::parallel : Exec::serial; }

void BM_Forward(benchmark::State& state) {
  const Model m = bench_model();
  const auto pts = bench_points(static_cast<std::size_t>(state.range(0)));
  std::vector<float> out(pts.size());
  for (auto _ : state) {
    forward_batch<float>(m, pts, out, policy(state));
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_ReconGradients(benchmark::State& state) {
  const Model m = bench_model();
  const auto pts = bench_points(static_cast<std::size_t>(state.range(0)));
  std::vector<float> targets(pts.size(), 0.5f), errors(pts.size());
  auto g = GradientSet<float>::zeros_like(m);
  for (auto _ : state) {
    benchmark::DoNotOptimize(recon_loss_and_grads<float>(m, pts, targets, g, errors, policy(state)));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_DensityGradients(benchmark::State& state) {
  const Model m = bench_model();
  const auto pts = bench_points(static_cast<std::size_t>(state.range(0)));
  std::vector<float> errors(pts.size());
  for (std::size_t i = 0; i < errors.size(); ++i) errors[i] = 1e-3f * float(1 + i % 5);
  auto g = GradientSet<float>::zeros_like(m);
  for (auto _ : state) {
    benchmark::DoNotOptimize(density_loss_and_grads<float>(m, pts, errors, g, policy(state)));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_RenderModel(benchmark::State& state) {
  const ModelField field(bench_model(), policy(state));
  Camera cam;
  cam.eye = {2.0, 1.5, 2.5};
  cam.width = cam.height = static_cast<int>(state.range(0));
  RenderConfig cfg;
  cfg.samples_per_ray = 64;
  for (auto _ : state) benchmark::DoNotOptimize(render_frame(field, cam, TransferFunction::ramp(), cfg).rgba.data());
}

}  // namespace

BENCHMARK(BM_Forward)->ArgsProduct({{1 << 14, 1 << 17}, {0, 1}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ReconGradients)->ArgsProduct({{1 << 14}, {0, 1}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DensityGradients)->ArgsProduct({{1 << 14}, {0, 1}})->Unit(benchmark::kMillisecond);
BENCHMARK(BM_RenderModel)->ArgsProduct({{64}, {0, 1}})->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
