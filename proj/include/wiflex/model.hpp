#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "wiflex/ops.hpp"

namespace wiflex {

/// WiFlexFormer architecture hyperparameters.
///
/// Amplitude inputs use in_channels = 1 and in_freq = subcarriers; DFS
/// inputs use in_channels = subcarriers and in_freq = frequency bins.
struct ModelConfig {
  std::size_t in_channels = 1;
  std::size_t in_freq = 52;
  std::size_t seq_len = 351;
  std::size_t d_model = 32;
  std::size_t encoder_layers = 4;
  std::size_t heads = 16;
  std::size_t ffn_dim = 64;
  std::size_t classes = 3;
  std::size_t gauss_count = 10;
  double dropout = 0.1;
  double bn_momentum = 0.1;
  double bn_eps = 1e-5;
  double ln_eps = 1e-5;
  // Class token receives PE(0) when set; otherwise only the T stem outputs
  // are encoded and the token is prepended afterwards.
  bool pe_includes_cls = true;
  // Dropout on attention weights and the feed-forward output.
  bool encoder_dropout = true;

  /// Throws ConfigError on an unusable configuration.
  void validate() const;
  std::size_t token_count() const { return seq_len + 1; }
  bool has_stem2d() const { return in_channels > 1; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class ParamKind : std::uint8_t {
  weight,      // conv kernels and weight matrices (decayed)
  bias,
  norm,        // BN / LN affine
  positional,  // Gaussian mu, sigma, E
  token,       // class token
  buffer,      // BN running statistics, not learnable
};

template <class T>
struct ParamEntry {
  std::string name;
  Tensor<T> value;
  ParamKind kind;
};

/// Named, shaped model tensors in a fixed canonical order.
template <class T>
class ParamSet {
 public:
  void add(std::string name, Tensor<T> value, ParamKind kind);

  Tensor<T>& at(const std::string& name);
  const Tensor<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<ParamEntry<T>>& entries() noexcept { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const noexcept { return entries_; }

  /// Learnable scalars (buffers excluded).
  std::size_t learnable_count() const;

  template <class U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<U>(), e.kind);
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) {
    if (a.entries_.size() != b.entries_.size()) return false;
    for (std::size_t i = 0; i < a.entries_.size(); ++i) {
      const auto& x = a.entries_[i];
      const auto& y = b.entries_[i];
      if (x.name != y.name || x.kind != y.kind || !(x.value == y.value)) return false;
    }
    return true;
  }

 private:
  std::vector<ParamEntry<T>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Layout of every tensor a configuration instantiates, in canonical order.
struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
  std::size_t fan_in = 0;  // weights only
};
std::vector<ParamSpec> param_layout(const ModelConfig& cfg);

/// Exact learnable scalar count (BN running statistics excluded).
std::size_t param_count(const ModelConfig& cfg);

/// Uniform ±sqrt(1/fan_in) weights, zero biases, unit/zero norms, identity
/// BN statistics, evenly spaced Gaussian centres with sigma = tokens/K,
/// E and class token uniform in ±0.02.
template <class T>
ParamSet<T> init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Leaf variables for every learnable tensor of a ParamSet on one tape.
template <class T>
class BoundParams {
 public:
  BoundParams(GradTape<T>& tape, ParamSet<T>& params);
  /// Binds the learnable tensors, in canonical order, to existing variables.
  BoundParams(GradTape<T>& tape, ParamSet<T>& params, const std::vector<Var<T>>& learnable);

  Var<T> operator[](const std::string& name) const;
  GradTape<T>& tape() const { return *tape_; }
  ParamSet<T>& params() const { return *params_; }
  RunningStats<T> running(const std::string& prefix) const;

  /// Gradients after tape.backward(), keyed by parameter name.
  std::map<std::string, Tensor<T>> gradients() const;

 private:
  GradTape<T>* tape_;
  ParamSet<T>* params_;
  std::map<std::string, Var<T>> vars_;
};

/// [B, C, F, T] -> [B, F, T]; only valid when C > 1.
template <class T>
Var<T> stem2d_forward(const BoundParams<T>& p, Var<T> x);

/// [B, F, T] -> [B, d_model, T]
template <class T>
Var<T> stem1d_forward(const BoundParams<T>& p, const ModelConfig& cfg, Var<T> x, Mode mode);

/// Runs the encoder stack over a token sequence [B, L, d] and returns [B, L, d].
template <class T>
Var<T> encoder_forward(const BoundParams<T>& p, const ModelConfig& cfg, Var<T> tokens, Mode mode);

/// Full network: [B, C, F, T] -> logits [B, classes].
template <class T>
Var<T> forward(const BoundParams<T>& p, const ModelConfig& cfg, Var<T> x, Mode mode);

/// Eval-mode logits without recording gradients.
template <class T>
Tensor<T> predict(ParamSet<T>& params, const ModelConfig& cfg, const Tensor<T>& x);

struct AuxTensor {
  std::string name;
  Tensor<float> value;
};

/// Checkpoint contents. `extras` carries auxiliary tensors (e.g. a fitted
/// projection) under names starting with "aux.".
struct Checkpoint {
  ModelConfig config;
  ParamSet<float> params;
  std::uint32_t step = 0;
  std::vector<AuxTensor> extras;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Byte size of the fixed checkpoint header (magic, version, config, count).
std::size_t checkpoint_header_size();

}  // namespace wiflex
