#pragma once

// Wall-clock inference throughput and latency percentiles.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "earnet/model.hpp"

namespace earnet {

struct BenchOptions {
  std::size_t batch = 1;
  std::size_t warmup = 50;
  std::size_t iterations = 500;
  int threads = 1;
  std::uint64_t seed = 0;  // for the random input
  bool heatmap = false;    // time grad_cam instead of a plain forward pass
};

struct BenchReport {
  std::string model;
  Shape input_shape;
  std::size_t parameters = 0;
  std::size_t warmup = 0, iterations = 0;
  int threads = 1;
  bool heatmap = false;
  double avg_fps = 0;  // iterations * batch / timed seconds
  double mean_ms = 0, p50_ms = 0, p95_ms = 0, p99_ms = 0;
  std::string cpu;
  std::string timestamp;  // UTC, ISO 8601
  std::vector<double> latencies_ms;
};

// Element count over trainable tensors (BN running statistics excluded).
std::size_t count_params(const std::vector<Tensor<float>>& tensors);
std::size_t count_params(const Network<float>& model);

// Requires an eval-mode model (ContractError otherwise); heatmap mode also
// needs it frozen. Kernel threads are set for the run and restored after.
BenchReport fps_bench(const Network<float>& model, const BenchOptions& opts);

// Nearest-rank percentile of `values` (q in [0, 100]).
double percentile(std::vector<double> values, double q);

std::string cpu_description();

inline constexpr const char* kBenchCsvHeader =
    "model,batch,threads,heatmap,warmup,iterations,params,avg_fps,mean_ms,p50_ms,p95_ms,p99_ms,cpu,"
    "timestamp";
void write_bench_csv_row(std::ostream& os, const BenchReport& r);
std::string bench_json(const BenchReport& r);
std::string bench_table(const BenchReport& r);

}  // namespace earnet
