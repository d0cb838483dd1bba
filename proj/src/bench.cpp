#include "earnet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "earnet/errors.hpp"
#include "earnet/explain.hpp"
#include "earnet/kernels.hpp"
#include "earnet/ops.hpp"

namespace earnet {

namespace {

std::string utc_now() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

struct ThreadGuard {
  int saved;
  explicit ThreadGuard(int n) : saved(kernels::max_threads()) { kernels::set_threads(n); }
  ~ThreadGuard() { kernels::set_threads(saved); }
};

}  // namespace

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw InputError("percentile of an empty sample");
  if (!(q >= 0 && q <= 100)) throw ConfigError("percentile must lie in [0, 100]");
  std::sort(values.begin(), values.end());
  const auto n = values.size();
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(n)));
  rank = std::clamp<std::size_t>(rank, 1, n);
  return values[rank - 1];
}

std::size_t count_params(const std::vector<Tensor<float>>& tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) {
    if (t.defined()) n += t.numel();
  }
  return n;
}

std::size_t count_params(const Network<float>& model) { return count_params(model.parameters()); }

std::string cpu_description() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      auto pos = line.find(':');
      if (pos != std::string::npos) {
        auto s = line.substr(pos + 1);
        s.erase(0, s.find_first_not_of(' '));
        return s;
      }
    }
  }
  return "unknown";
}

BenchReport fps_bench(const Network<float>& model, const BenchOptions& opts) {
  if (model.mode() != Mode::eval) throw ContractError("fps_bench needs an eval-mode model");
  if (opts.batch == 0 || opts.iterations == 0) throw ConfigError("bench batch and iterations must be positive");
  if (opts.threads < 1) throw ConfigError("bench threads must be >= 1");
  if (opts.heatmap && opts.batch != 1) throw ConfigError("heatmap benchmarking uses batch 1");

  const std::size_t s = model.config().input_size;
  Shape shape{opts.batch, 3, s, s};
  Tensor<float> x(shape);
  Rng rng(opts.seed);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (auto& v : x.data()) v = nd(rng);

  ThreadGuard guard(opts.threads);
  auto run_once = [&] {
    if (opts.heatmap) {
      (void)grad_cam(model, x);
    } else {
      (void)model.forward(x);
    }
  };
  for (std::size_t i = 0; i < opts.warmup; ++i) run_once();

  BenchReport r;
  r.model = to_string(model.config().arch);
  r.input_shape = shape;
  r.parameters = count_params(model);
  r.warmup = opts.warmup;
  r.iterations = opts.iterations;
  r.threads = opts.threads;
  r.heatmap = opts.heatmap;
  r.latencies_ms.reserve(opts.iterations);
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  for (std::size_t i = 0; i < opts.iterations; ++i) {
    const auto t0 = clock::now();
    run_once();
    r.latencies_ms.push_back(std::chrono::duration<double, std::milli>(clock::now() - t0).count());
  }
  const double total = std::chrono::duration<double>(clock::now() - start).count();
  r.avg_fps = static_cast<double>(opts.iterations * opts.batch) / total;
  r.mean_ms = std::accumulate(r.latencies_ms.begin(), r.latencies_ms.end(), 0.0) /
              static_cast<double>(r.latencies_ms.size());
  r.p50_ms = percentile(r.latencies_ms, 50);
  r.p95_ms = percentile(r.latencies_ms, 95);
  r.p99_ms = percentile(r.latencies_ms, 99);
  r.cpu = cpu_description();
  r.timestamp = utc_now();
  return r;
}

void write_bench_csv_row(std::ostream& os, const BenchReport& r) {
  os << r.model << ',' << r.input_shape.at(0) << ',' << r.threads << ',' << (r.heatmap ? 1 : 0)
     << ',' << r.warmup << ',' << r.iterations << ',' << r.parameters << ',' << std::setprecision(6)
     << r.avg_fps << ',' << r.mean_ms << ',' << r.p50_ms << ',' << r.p95_ms << ',' << r.p99_ms << ','
     << csv_field(r.cpu) << ',' << r.timestamp << '\n';
}

std::string bench_json(const BenchReport& r) {
  nlohmann::json j = {{"model", r.model},         {"input_shape", r.input_shape},
                      {"params", r.parameters},   {"warmup", r.warmup},
                      {"iterations", r.iterations}, {"threads", r.threads},
                      {"heatmap", r.heatmap},     {"avg_fps", r.avg_fps},
                      {"mean_ms", r.mean_ms},     {"p50_ms", r.p50_ms},
                      {"p95_ms", r.p95_ms},       {"p99_ms", r.p99_ms},
                      {"cpu", r.cpu},             {"timestamp", r.timestamp}};
  return j.dump(2);
}

std::string bench_table(const BenchReport& r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  os << "model       " << r.model << (r.heatmap ? " (+heatmap)" : "") << '\n'
     << "input       " << shape_str(r.input_shape) << '\n'
     << "params      " << r.parameters << '\n'
     << "threads     " << r.threads << '\n'
     << "iterations  " << r.iterations << " (warmup " << r.warmup << ")\n"
     << "avg fps     " << r.avg_fps << '\n'
     << "latency ms  mean " << r.mean_ms << "  p50 " << r.p50_ms << "  p95 " << r.p95_ms
     << "  p99 " << r.p99_ms << '\n'
     << "cpu         " << r.cpu << '\n';
  return os.str();
}

}  // namespace earnet
