#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>

#include "json.hpp"
#include "wiflex/model.hpp"

namespace wiflex {

struct TimingStats {
  double mean_ms = 0.0, std_ms = 0.0, min_ms = 0.0, max_ms = 0.0;
};

/// Calls fn `warmup` times unmeasured, then `iters` times timed one call at a
/// time with the steady clock. std is the population standard deviation.
TimingStats time_calls(std::size_t warmup, std::size_t iters, const std::function<void()>& fn);

struct BenchReport {
  std::size_t warmup_iters = 100;
  std::size_t measure_iters = 1000;
  double mean_ms = 0.0, std_ms = 0.0, min_ms = 0.0, max_ms = 0.0;
  std::size_t batch = 1;
  std::array<std::size_t, 3> input_shape{};  // C, F, T
  int precision = 32;
  unsigned threads = 1;
  std::string cpu_model;

  nlohmann::json to_json() const;
  /// Exact key set of the JSON document.
  static const std::vector<std::string>& json_keys();
};

/// Forward calls observed by bench_inference, split by phase.
struct BenchCounters {
  std::size_t warmup = 0, measured = 0;
};

/// Eval-mode forward latency on one fixed random input (model only; no
/// feature extraction inside the timed region).
template <class T>
BenchReport bench_inference(ParamSet<T>& params, const ModelConfig& cfg, std::size_t warmup = 100,
                            std::size_t iters = 1000, std::size_t batch = 1,
                            std::uint64_t seed = 0, BenchCounters* counters = nullptr);

std::string cpu_model_string();

}  // namespace wiflex
