#pragma once

#include <random>
#include <vector>

#include "wiflex/tape.hpp"

namespace testing {

inline wiflex::Tensor<double> make(wiflex::Shape shape, std::vector<double> v) {
  return wiflex::Tensor<double>(std::move(shape), std::move(v));
}

inline wiflex::Tensor<double> random_tensor(wiflex::Shape shape, std::mt19937_64& gen,
                                            double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  wiflex::Tensor<double> t(std::move(shape));
  for (double& x : t.values()) x = u(gen);
  return t;
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return a.size() == b.size() ? m : 1e300;
}

}  // namespace testing
