#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "wiflex/features.hpp"
#include "wiflex/model.hpp"

namespace wiflex {

struct TrainConfig {
  std::size_t epochs = 10;
  double lr = 1e-3;
  double weight_decay = 1e-3;
  std::size_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 0;

  void validate() const;
};

template <class T>
struct OptimizerState {
  std::map<std::string, Tensor<T>> m, v;
  std::uint64_t step = 0;
};

/// Decoupled decay applies to conv kernels and weight matrices only.
inline bool is_decayed(ParamKind kind) { return kind == ParamKind::weight; }

/// One AdamW update over every learnable tensor. Decayed tensors are first
/// scaled by (1 - lr·wd); then θ -= lr·m̂/(sqrt(v̂) + eps). Gaussian sigmas
/// are clamped to kMinSigma afterwards. Throws NumericError naming the first
/// parameter with a non-finite gradient.
template <class T>
void adamw_step(ParamSet<T>& params, const std::map<std::string, Tensor<T>>& grads,
                OptimizerState<T>& state, const TrainConfig& cfg);

struct Metrics {
  double accuracy = 0.0;
  double precision_macro = 0.0;
  double recall_macro = 0.0;
  double f1_macro = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]

  /// Macro averages with 0/0 taken as 0 for empty classes.
  static Metrics from_confusion(std::vector<std::vector<std::size_t>> confusion);
  static Metrics from_predictions(const std::vector<int>& predicted, const std::vector<int>& truth,
                                  std::size_t classes);
  nlohmann::json to_json() const;
};

/// Stacks feature tensors [C, F, T] into a batch [B, C, F, T].
template <class T>
Tensor<T> stack_features(const std::vector<FeatureTensor>& features,
                         const std::vector<std::size_t>& indices);

/// Model input shape for a feature tensor layout.
ModelConfig configure_for(const FeatureTensor& sample, std::size_t classes, ModelConfig base = {});

struct Evaluation {
  Metrics metrics;
  double loss = 0.0;  // mean cross-entropy
};

/// Eval-mode predictions over precomputed features.
template <class T>
Evaluation evaluate_features(ParamSet<T>& params, const ModelConfig& cfg,
                             const std::vector<FeatureTensor>& features,
                             const std::vector<int>& labels, std::size_t batch_size = 32);

template <class T>
Metrics evaluate(ParamSet<T>& params, const ModelConfig& cfg, const std::vector<CsiWindow>& windows,
                 const FeaturePipeline& pipeline);

struct TrainReport {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  std::vector<Metrics> val_metrics;
  std::size_t best_epoch = 0;
  std::string best_checkpoint;

  nlohmann::json to_json() const;
};

template <class T>
struct TrainResult {
  TrainReport report;
  ParamSet<T> best_params;
  std::uint64_t best_step = 0;
};

/// Balanced-sampler training with best-on-validation-loss selection.
/// Features are extracted once per window with `pipeline`. When
/// `checkpoint` is set, the best parameters are written there (with `aux`
/// tensors appended) every time the validation loss improves.
template <class T>
TrainResult<T> train(const std::vector<CsiWindow>& train_windows,
                     const std::vector<CsiWindow>& val_windows, const ModelConfig& model_cfg,
                     const TrainConfig& cfg, const FeaturePipeline& pipeline,
                     const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                     const std::vector<AuxTensor>& aux = {});

/// Same loop over precomputed features.
template <class T>
TrainResult<T> train_features(const std::vector<FeatureTensor>& train_x,
                              const std::vector<int>& train_y,
                              const std::vector<FeatureTensor>& val_x,
                              const std::vector<int>& val_y, const ModelConfig& model_cfg,
                              const TrainConfig& cfg,
                              const std::optional<std::filesystem::path>& checkpoint = std::nullopt,
                              const std::vector<AuxTensor>& aux = {});

}  // namespace wiflex
