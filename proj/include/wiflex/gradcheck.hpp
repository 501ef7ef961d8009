#pragma once

#include <functional>
#include <string>
#include <vector>

#include "wiflex/tape.hpp"

namespace wiflex {

struct NamedTensor {
  std::string name;
  Tensor<double> value;
};

struct TensorGradError {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;  // coordinates with a gradient above the floor
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_tensor;
  std::vector<TensorGradError> tensors;
  bool passed = false;
};

/// Builds a scalar loss on `tape` from one leaf per parameter, in order.
using LossFn = std::function<Var<double>(GradTape<double>&, const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients with central differences
/// (f(θ+ε) - f(θ-ε)) / 2ε for every coordinate of every parameter.
/// Relative error is |a - n| / max(|a|, |n|), counted only where
/// max(|a|, |n|) > 1e-6. The loss must be deterministic.
/// Throws NumericError on non-finite values.
GradCheckReport check_gradients(const LossFn& loss, const std::vector<NamedTensor>& params,
                                double eps, double tol);

}  // namespace wiflex
