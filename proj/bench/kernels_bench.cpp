// Serial reference kernels against their OpenMP counterparts on the shapes
// the model and SAE actually use. Set OMP_NUM_THREADS to vary the pool.

#include <benchmark/benchmark.h>

#include <vector>

#include "cprobe/core/kernels.h"
#include "cprobe/core/rng.h"

namespace {

using namespace cprobe;

std::vector<float> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal(0.0, 1.0));
  return v;
}

// Args: m, k, n
template <bool Parallel>
void BM_MatmulNN(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = random_vec(m * k, 1), b = random_vec(k * n, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::omp::matmul_nn(m, k, n, a.data(), b.data(), c.data(), false);
    } else {
      kernels::serial::matmul_nn(m, k, n, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
  state.counters["GFLOP/s"] =
      benchmark::Counter(2.0 * m * k * n, benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <bool Parallel>
void BM_MatmulNT(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto n = static_cast<std::size_t>(state.range(2));
  const auto a = random_vec(m * k, 3), b = random_vec(n * k, 4);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::omp::matmul_nt(m, k, n, a.data(), b.data(), c.data(), false);
    } else {
      kernels::serial::matmul_nt(m, k, n, a.data(), b.data(), c.data(), false);
    }
    benchmark::DoNotOptimize(c.data());
  }
}

// Args: rows, width
template <bool Parallel>
void BM_LayerNorm(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto d = static_cast<std::size_t>(state.range(1));
  const auto x = random_vec(rows * d, 5);
  const std::vector<float> gain(d, 1.0f), bias(d, 0.0f);
  std::vector<float> y(rows * d), mean(rows), rstd(rows);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::omp::layer_norm(rows, d, x.data(), gain.data(), bias.data(), 1e-5f, y.data(), mean.data(), rstd.data());
    } else {
      kernels::serial::layer_norm(rows, d, x.data(), gain.data(), bias.data(), 1e-5f, y.data(), mean.data(),
                                  rstd.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Parallel>
void BM_SoftmaxRows(benchmark::State& state) {
  const auto rows = static_cast<std::size_t>(state.range(0));
  const auto n = static_cast<std::size_t>(state.range(1));
  const auto x = random_vec(rows * n, 6);
  std::vector<float> y(rows * n);
  for (auto _ : state) {
    if constexpr (Parallel) {
      kernels::omp::softmax_rows(rows, n, x.data(), y.data());
    } else {
      kernels::serial::softmax_rows(rows, n, x.data(), y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
}

// Args: hidden width, k
template <bool Parallel>
void BM_TopK(benchmark::State& state) {
  const auto h = static_cast<std::size_t>(state.range(0));
  const auto k = static_cast<std::size_t>(state.range(1));
  const auto row = random_vec(h, 7);
  for (auto _ : state) {
    auto idx = Parallel ? kernels::omp::top_k_indices<float>(row, k) : kernels::serial::top_k_indices<float>(row, k);
    benchmark::DoNotOptimize(idx.data());
  }
}

void matmul_shapes(benchmark::internal::Benchmark* b) {
  b->Args({64, 32, 1000});   // toy vocabulary head
  b->Args({256, 128, 512});  // feedforward, small model
  b->Args({256, 896, 896});  // attention projection at full width
}

}  // namespace

BENCHMARK(BM_MatmulNN<false>)->Name("matmul_nn/serial")->Apply(matmul_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MatmulNN<true>)->Name("matmul_nn/omp")->Apply(matmul_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MatmulNT<false>)->Name("matmul_nt/serial")->Apply(matmul_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_MatmulNT<true>)->Name("matmul_nt/omp")->Apply(matmul_shapes)->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_LayerNorm<false>)->Name("layer_norm/serial")->Args({256, 896})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_LayerNorm<true>)->Name("layer_norm/omp")->Args({256, 896})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_SoftmaxRows<false>)->Name("softmax_rows/serial")->Args({256, 256})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_SoftmaxRows<true>)->Name("softmax_rows/omp")->Args({256, 256})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_TopK<false>)->Name("top_k/serial")->Args({4480, 50})->Unit(benchmark::kMicrosecond);
BENCHMARK(BM_TopK<true>)->Name("top_k/omp")->Args({4480, 50})->Unit(benchmark::kMicrosecond);

BENCHMARK_MAIN();
