// Serial reference kernels versus the packed OpenMP kernels on the shapes
// the desk-scale network actually runs.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "brainseg/nn/kernels.hpp"

namespace k = brainseg::nn::kernels;

namespace {

std::vector<float> random_vector(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = dist(rng);
  return v;
}

// args: m, n, k
void BM_GemmReference(benchmark::State& state) {
  const int m = state.range(0), n = state.range(1), kk = state.range(2);
  auto a = random_vector(static_cast<std::size_t>(m) * kk, 1);
  auto b = random_vector(static_cast<std::size_t>(kk) * n, 2);
  std::vector<float> c(static_cast<std::size_t>(m) * n);
  for (auto _ : state) {
    k::reference::gemm(k::Trans::kNo, k::Trans::kNo, m, n, kk, a.data(), kk, b.data(), n, 0.0f,
                       c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * n * kk, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

void BM_GemmParallel(benchmark::State& state) {
  const int m = state.range(0), n = state.range(1), kk = state.range(2);
  auto a = random_vector(static_cast<std::size_t>(m) * kk, 1);
  auto b = random_vector(static_cast<std::size_t>(kk) * n, 2);
  std::vector<float> c(static_cast<std::size_t>(m) * n);
  for (auto _ : state) {
    k::gemm(k::Trans::kNo, k::Trans::kNo, m, n, kk, a.data(), kk, b.data(), n, 0.0f, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * n * kk, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

// Weight-gradient shape: dW = dY * col^T.
void BM_GemmParallelTransB(benchmark::State& state) {
  const int m = state.range(0), n = state.range(1), kk = state.range(2);
  auto a = random_vector(static_cast<std::size_t>(m) * kk, 1);
  auto b = random_vector(static_cast<std::size_t>(n) * kk, 2);
  std::vector<float> c(static_cast<std::size_t>(m) * n);
  for (auto _ : state) {
    k::gemm(k::Trans::kNo, k::Trans::kYes, m, n, kk, a.data(), kk, b.data(), kk, 0.0f, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOPS"] = benchmark::Counter(2.0 * m * n * kk, benchmark::Counter::kIsIterationInvariantRate,
                                                benchmark::Counter::kIs1000);
}

// args: channels, spatial extent
void BM_ConvDirect(benchmark::State& state) {
  const int c = state.range(0), hw = state.range(1);
  auto x = random_vector(static_cast<std::size_t>(c) * hw * hw, 3);
  auto w = random_vector(static_cast<std::size_t>(c) * c * 9, 4);
  std::vector<float> y(static_cast<std::size_t>(c) * hw * hw);
  for (auto _ : state) {
    k::reference::conv2d(x.data(), c, hw, hw, w.data(), static_cast<const float*>(nullptr), c, 3, 1, 1, y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_ConvIm2colGemm(benchmark::State& state) {
  const int c = state.range(0), hw = state.range(1);
  auto x = random_vector(static_cast<std::size_t>(c) * hw * hw, 3);
  auto w = random_vector(static_cast<std::size_t>(c) * c * 9, 4);
  std::vector<float> col(static_cast<std::size_t>(c) * 9 * hw * hw);
  std::vector<float> y(static_cast<std::size_t>(c) * hw * hw);
  for (auto _ : state) {
    k::im2col(x.data(), c, hw, hw, 3, 1, 1, hw, hw, col.data());
    k::gemm(k::Trans::kNo, k::Trans::kNo, c, hw * hw, c * 9, w.data(), c * 9, col.data(), hw * hw,
            0.0f, y.data(), hw * hw);
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_GemmReference)->Args({32, 1024, 288})->Args({16, 4096, 144});
BENCHMARK(BM_GemmParallel)
    ->Args({32, 1024, 288})
    ->Args({16, 4096, 144})
    ->Args({32, 4096, 288})
    ->Args({128, 64, 1152})
    ->Args({256, 256, 256});
BENCHMARK(BM_GemmParallelTransB)->Args({32, 288, 4096})->Args({16, 144, 4096});
BENCHMARK(BM_ConvDirect)->Args({16, 64})->Args({32, 32});
BENCHMARK(BM_ConvIm2colGemm)->Args({16, 64})->Args({32, 32})->Args({32, 64});

BENCHMARK_MAIN();
