#include <set>

#include "doctest.h"
#include "model_harness.hpp"
#include "wiflex/bench.hpp"

using namespace wiflex;

TEST_SUITE("bench") {

TEST_CASE("time_calls counts warmup and measured calls separately") {
  std::size_t calls = 0;
  const TimingStats s = time_calls(3, 7, [&] { ++calls; });
  CHECK(calls == 10);
  CHECK(s.min_ms <= s.mean_ms);
  CHECK(s.mean_ms <= s.max_ms);
  CHECK(s.std_ms >= 0.0);
  CHECK_THROWS_AS(time_calls(0, 0, [] {}), ValidationError);
}

TEST_CASE("a single measurement has zero spread") {
  const TimingStats s = time_calls(0, 1, [] {
    volatile double acc = 0;
    for (int i = 0; i < 1000; ++i) acc = acc + i;
  });
  CHECK(s.std_ms == 0.0);
  CHECK(s.mean_ms == s.min_ms);
  CHECK(s.mean_ms == s.max_ms);
}

TEST_CASE("bench_inference reports the protocol and an exact key set") {
  const ModelConfig cfg = testing::tiny_config();
  auto params = init_params<float>(cfg, 1);
  BenchCounters counters;
  const BenchReport r = bench_inference(params, cfg, 5, 12, 2, 0, &counters);
  CHECK(counters.warmup == 5);
  CHECK(counters.measured == 12);
  CHECK(r.warmup_iters == 5);
  CHECK(r.measure_iters == 12);
  CHECK(r.batch == 2);
  CHECK(r.precision == 32);
  CHECK(r.input_shape == std::array<std::size_t, 3>{1, 4, 8});
  CHECK(r.min_ms <= r.mean_ms);
  CHECK(r.mean_ms <= r.max_ms);

  const auto j = r.to_json();
  std::set<std::string> keys;
  for (const auto& [k, v] : j.items()) keys.insert(k);
  const auto& expected = BenchReport::json_keys();
  CHECK(keys == std::set<std::string>(expected.begin(), expected.end()));
  CHECK(j["input_shape"].size() == 3);
  CHECK(j["warmup_iters"].is_number_integer());
  CHECK(j["mean_ms"].is_number_float());

  auto pd = init_params<double>(cfg, 1);
  CHECK(bench_inference(pd, cfg, 0, 1).precision == 64);
  CHECK_THROWS_AS(bench_inference(pd, cfg, 0, 0), ValidationError);
  CHECK_THROWS_AS(bench_inference(pd, cfg, 0, 1, 0), ValidationError);
}

TEST_CASE("default protocol constants") {
  const BenchReport r;
  CHECK(r.warmup_iters == 100);
  CHECK(r.measure_iters == 1000);
  CHECK(r.batch == 1);
}

}  // TEST_SUITE
