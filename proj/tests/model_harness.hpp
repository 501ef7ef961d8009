#pragma once

#include <random>
#include <vector>

#include "wiflex/gradcheck.hpp"
#include "wiflex/model.hpp"

namespace testing {

/// C=1, F=4, T=8, d=8, h=2, one layer, three classes, two Gaussians.
inline wiflex::ModelConfig tiny_config() {
  wiflex::ModelConfig c;
  c.in_channels = 1;
  c.in_freq = 4;
  c.seq_len = 8;
  c.d_model = 8;
  c.heads = 2;
  c.encoder_layers = 1;
  c.ffn_dim = 16;
  c.classes = 3;
  c.gauss_count = 2;
  c.dropout = 0.0;
  return c;
}

/// Finite-difference check of the full model loss with respect to every
/// learnable tensor. Dropout must be zero in `cfg` so the loss is deterministic.
inline wiflex::GradCheckReport model_grad_check(const wiflex::ModelConfig& cfg, std::uint64_t seed,
                                                double eps, double tol) {
  using namespace wiflex;
  ParamSet<double> params = init_params<double>(cfg, seed);
  std::mt19937_64 gen(seed + 1);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const std::size_t B = 3;
  Tensor<double> x({B, cfg.in_channels, cfg.in_freq, cfg.seq_len});
  for (double& v : x.values()) v = u(gen);
  std::vector<int> labels{0, 1, 2};

  std::vector<NamedTensor> named;
  for (const auto& e : params.entries())
    if (e.kind != ParamKind::buffer) named.push_back({e.name, e.value});

  auto loss = [&, params](GradTape<double>& tape, const std::vector<Var<double>>& vars) mutable {
    // Fresh running statistics on every evaluation keep the loss a pure function.
    ParamSet<double> local = params;
    BoundParams<double> bound(tape, local, vars);
    Var<double> logits = forward(bound, cfg, tape.constant(x), Mode::train);
    return cross_entropy(logits, std::span<const int>(labels));
  };
  return check_gradients(loss, named, eps, tol);
}

}  // namespace testing
