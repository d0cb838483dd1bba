// Parallel kernels against the serial reference, plus whole-network forward.

#include <random>
#include <vector>

#include <benchmark/benchmark.h>

#include "earnet/kernels.hpp"
#include "earnet/model.hpp"
#include "earnet/ops.hpp"

using namespace earnet;

namespace {

std::vector<float> random_vec(std::size_t n, unsigned seed) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = u(rng);
  return v;
}

// Pointwise convolution shapes: (out channels, in channels, pixels).
void gemm_args(benchmark::internal::Benchmark* b) {
  b->Args({48, 48, 28 * 28})->Args({96, 96, 14 * 14})->Args({192, 192, 7 * 7})->Args({384, 192, 49});
}

void BM_GemmParallel(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0)), k = static_cast<std::size_t>(state.range(1)),
             n = static_cast<std::size_t>(state.range(2));
  auto a = random_vec(m * k, 1), b = random_vec(k * n, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    kernels::gemm(false, false, m, n, k, a.data(), k, b.data(), n, c.data(), n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * n * k));
}
BENCHMARK(BM_GemmParallel)->Apply(gemm_args);

void BM_GemmReference(benchmark::State& state) {
  const auto m = static_cast<std::size_t>(state.range(0)), k = static_cast<std::size_t>(state.range(1)),
             n = static_cast<std::size_t>(state.range(2));
  auto a = random_vec(m * k, 1), b = random_vec(k * n, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    kernels::reference::gemm(false, false, m, n, k, a.data(), k, b.data(), n, c.data(), n, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(static_cast<std::int64_t>(state.iterations() * m * n * k));
}
BENCHMARK(BM_GemmReference)->Apply(gemm_args);

kernels::ConvGeometry dw_geometry(std::size_t hw, std::size_t stride) {
  kernels::ConvGeometry g;
  g.in_h = g.in_w = hw;
  g.kernel_h = g.kernel_w = 3;
  g.stride_h = g.stride_w = stride;
  g.pad_h = g.pad_w = 1;
  return g;
}

void BM_DepthwiseParallel(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), hw = static_cast<std::size_t>(state.range(1));
  auto g = dw_geometry(hw, 1);
  auto in = random_vec(c * hw * hw, 3), w = random_vec(c * 9, 4);
  std::vector<float> out(c * g.out_h() * g.out_w());
  for (auto _ : state) {
    kernels::depthwise_conv2d(in.data(), w.data(), c, g, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_DepthwiseParallel)->Args({24, 56})->Args({48, 28})->Args({96, 14});

void BM_DepthwiseReference(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0)), hw = static_cast<std::size_t>(state.range(1));
  auto g = dw_geometry(hw, 1);
  auto in = random_vec(c * hw * hw, 3), w = random_vec(c * 9, 4);
  std::vector<float> out(c * g.out_h() * g.out_w());
  for (auto _ : state) {
    kernels::reference::conv2d<float>(in.data(), 1, c, w.data(), nullptr, c, c, g, out.data());
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK(BM_DepthwiseReference)->Args({24, 56})->Args({48, 28})->Args({96, 14});

void BM_Forward(benchmark::State& state) {
  ModelConfig cfg = state.range(0) == 0 ? ModelConfig::desk() : ModelConfig::paper();
  Network<float> net(cfg, 1);
  net.set_mode(Mode::eval);
  net.set_trainable(false);
  const std::size_t s = cfg.input_size;
  Tensor<float> x(Shape{1, 3, s, s}, random_vec(3 * s * s, 5));
  for (auto _ : state) benchmark::DoNotOptimize(net.forward(x).logits3.ptr());
  state.SetLabel(state.range(0) == 0 ? "desk" : "paper");
}
BENCHMARK(BM_Forward)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
