#include "wiflex/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <random>

#include "wiflex/parallel.hpp"

namespace wiflex {

TimingStats time_calls(std::size_t warmup, std::size_t iters, const std::function<void()>& fn) {
  if (iters < 1) throw ValidationError("bench: iters must be >= 1");
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> ms(iters);
  for (std::size_t i = 0; i < iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    ms[i] = std::chrono::duration<double, std::milli>(t1 - t0).count();
  }
  TimingStats s;
  s.min_ms = ms[0];
  s.max_ms = ms[0];
  double sum = 0.0;
  for (double v : ms) {
    sum += v;
    s.min_ms = std::min(s.min_ms, v);
    s.max_ms = std::max(s.max_ms, v);
  }
  s.mean_ms = sum / double(iters);
  double var = 0.0;
  for (double v : ms) var += (v - s.mean_ms) * (v - s.mean_ms);
  s.std_ms = iters > 1 ? std::sqrt(var / double(iters)) : 0.0;
  // Summation order can leave the mean an ulp outside [min, max].
  s.mean_ms = std::clamp(s.mean_ms, s.min_ms, s.max_ms);
  return s;
}

const std::vector<std::string>& BenchReport::json_keys() {
  static const std::vector<std::string> keys{
      "warmup_iters", "measure_iters", "mean_ms",   "std_ms",  "min_ms",   "max_ms",
      "batch",        "input_shape",   "precision", "threads", "cpu_model"};
  return keys;
}

nlohmann::json BenchReport::to_json() const {
  return {{"warmup_iters", warmup_iters},
          {"measure_iters", measure_iters},
          {"mean_ms", mean_ms},
          {"std_ms", std_ms},
          {"min_ms", min_ms},
          {"max_ms", max_ms},
          {"batch", batch},
          {"input_shape", input_shape},
          {"precision", precision},
          {"threads", threads},
          {"cpu_model", cpu_model}};
}

std::string cpu_model_string() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) {
        std::string s = line.substr(colon + 1);
        s.erase(0, s.find_first_not_of(' '));
        return s;
      }
    }
  }
  return "unknown";
}

template <class T>
BenchReport bench_inference(ParamSet<T>& params, const ModelConfig& cfg, std::size_t warmup,
                            std::size_t iters, std::size_t batch, std::uint64_t seed, BenchCounters* counters) {
  cfg.validate();
  if (batch < 1) throw ValidationError("bench: batch must be >= 1");
  Tensor<T> x({batch, cfg.in_channels, cfg.in_freq, cfg.seq_len});
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (T& v : x.values()) v = T(u(gen));

  std::size_t calls = 0;
  const TimingStats s = time_calls(warmup, iters, [&] {
    predict(params, cfg, x);
    ++calls;
  });
  if (counters) {
    counters->warmup += std::min(calls, warmup);
    counters->measured += calls - std::min(calls, warmup);
  }
  BenchReport r;
  r.warmup_iters = warmup;
  r.measure_iters = iters;
  r.mean_ms = s.mean_ms;
  r.std_ms = s.std_ms;
  r.min_ms = s.min_ms;
  r.max_ms = s.max_ms;
  r.batch = batch;
  r.input_shape = {cfg.in_channels, cfg.in_freq, cfg.seq_len};
  r.precision = sizeof(T) == 4 ? 32 : 64;
  r.threads = num_threads();
  r.cpu_model = cpu_model_string();
  return r;
}

template BenchReport bench_inference<float>(ParamSet<float>&, const ModelConfig&, std::size_t,
                                            std::size_t, std::size_t, std::uint64_t, BenchCounters*);
template BenchReport bench_inference<double>(ParamSet<double>&, const ModelConfig&, std::size_t,
                                             std::size_t, std::size_t, std::uint64_t, BenchCounters*);

}  // namespace wiflex
