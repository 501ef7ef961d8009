#include "wiflex/training.hpp"

#include <cmath>
#include <limits>

namespace wiflex {

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("train config: epochs must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ValidationError("train config: lr must be >= 0");
  if (!(weight_decay >= 0.0)) throw ValidationError("train config: weight decay must be >= 0");
  if (batch_size < 1) throw ValidationError("train config: batch size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ValidationError("train config: betas must be in [0, 1)");
  if (!(eps > 0.0)) throw ValidationError("train config: eps must be > 0");
}

// ---------------------------------------------------------------------------
// AdamW

template <class T>
void adamw_step(ParamSet<T>& params, const std::map<std::string, Tensor<T>>& grads,
                OptimizerState<T>& state, const TrainConfig& cfg) {
  for (const auto& e : params.entries()) {
    if (e.kind == ParamKind::buffer) continue;
    auto g = grads.find(e.name);
    if (g == grads.end()) throw ValidationError("adamw: no gradient for " + e.name);
    if (g->second.shape() != e.value.shape())
      throw ValidationError("adamw: gradient shape mismatch for " + e.name);
    for (T v : g->second.values())
      if (!std::isfinite(v)) throw NumericError("adamw: non-finite gradient in " + e.name);
  }

  ++state.step;
  const T lr = T(cfg.lr), b1 = T(cfg.beta1), b2 = T(cfg.beta2), eps = T(cfg.eps);
  const T decay = T(1) - T(cfg.lr * cfg.weight_decay);
  const T c1 = T(1) - T(std::pow(cfg.beta1, double(state.step)));
  const T c2 = T(1) - T(std::pow(cfg.beta2, double(state.step)));
  for (auto& e : params.entries()) {
    if (e.kind == ParamKind::buffer) continue;
    const Tensor<T>& g = grads.at(e.name);
    auto [mi, fresh_m] = state.m.try_emplace(e.name, e.value.shape());
    auto [vi, fresh_v] = state.v.try_emplace(e.name, e.value.shape());
    Tensor<T>& m = mi->second;
    Tensor<T>& v = vi->second;
    const bool decayed = is_decayed(e.kind);
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      T theta = e.value[i];
      if (decayed) theta *= decay;
      m[i] = b1 * m[i] + (T(1) - b1) * g[i];
      v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
      const T mhat = m[i] / c1;
      const T vhat = v[i] / c2;
      e.value[i] = theta - lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
  if (params.contains("pos.sigma"))
    for (T& s : params.at("pos.sigma").values()) s = std::max(s, T(kMinSigma));
}

// ---------------------------------------------------------------------------
// metrics

Metrics Metrics::from_confusion(std::vector<std::vector<std::size_t>> confusion) {
  Metrics m;
  const std::size_t c = confusion.size();
  std::size_t total = 0, correct = 0;
  for (std::size_t i = 0; i < c; ++i) {
    if (confusion[i].size() != c) throw ValidationError("metrics: confusion matrix must be square");
    for (std::size_t j = 0; j < c; ++j) total += confusion[i][j];
    correct += confusion[i][i];
  }
  m.accuracy = total ? double(correct) / double(total) : 0.0;
  for (std::size_t k = 0; k < c; ++k) {
    std::size_t predicted = 0, actual = 0;
    for (std::size_t i = 0; i < c; ++i) {
      predicted += confusion[i][k];
      actual += confusion[k][i];
    }
    const double tp = double(confusion[k][k]);
    const double p = predicted ? tp / double(predicted) : 0.0;
    const double r = actual ? tp / double(actual) : 0.0;
    m.precision_macro += p;
    m.recall_macro += r;
    m.f1_macro += (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  if (c) {
    m.precision_macro /= double(c);
    m.recall_macro /= double(c);
    m.f1_macro /= double(c);
  }
  m.confusion = std::move(confusion);
  return m;
}

Metrics Metrics::from_predictions(const std::vector<int>& predicted, const std::vector<int>& truth,
                                  std::size_t classes) {
  if (predicted.size() != truth.size()) throw ValidationError("metrics: length mismatch");
  std::vector<std::vector<std::size_t>> conf(classes, std::vector<std::size_t>(classes, 0));
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || std::size_t(truth[i]) >= classes || predicted[i] < 0 ||
        std::size_t(predicted[i]) >= classes)
      throw ValidationError("metrics: label out of range");
    ++conf[std::size_t(truth[i])][std::size_t(predicted[i])];
  }
  return from_confusion(std::move(conf));
}

nlohmann::json Metrics::to_json() const {
  return {{"accuracy", accuracy},
          {"precision_macro", precision_macro},
          {"recall_macro", recall_macro},
          {"f1_macro", f1_macro},
          {"confusion", confusion}};
}

nlohmann::json TrainReport::to_json() const {
  nlohmann::json j;
  j["train_loss"] = train_loss;
  j["val_loss"] = val_loss;
  std::vector<double> acc, prec, rec, f1;
  std::vector<std::vector<std::vector<std::size_t>>> conf;
  for (const Metrics& m : val_metrics) {
    acc.push_back(m.accuracy);
    prec.push_back(m.precision_macro);
    rec.push_back(m.recall_macro);
    f1.push_back(m.f1_macro);
    conf.push_back(m.confusion);
  }
  j["accuracy"] = acc;
  j["precision_macro"] = prec;
  j["recall_macro"] = rec;
  j["f1_macro"] = f1;
  j["confusion"] = conf;
  j["best_epoch"] = best_epoch;
  j["best_checkpoint"] = best_checkpoint;
  return j;
}

// ---------------------------------------------------------------------------
// evaluation

template <class T>
Tensor<T> stack_features(const std::vector<FeatureTensor>& features,
                         const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ValidationError("stack_features: empty batch");
  const FeatureTensor& first = features.at(indices.front());
  const std::size_t per = first.data.size();
  Tensor<T> out({indices.size(), first.channels, first.freq, first.time});
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const FeatureTensor& f = features.at(indices[b]);
    if (f.shape() != first.shape()) throw ValidationError("stack_features: feature shapes differ");
    for (std::size_t i = 0; i < per; ++i) out[b * per + i] = T(f.data[i]);
  }
  return out;
}

ModelConfig configure_for(const FeatureTensor& sample, std::size_t classes, ModelConfig base) {
  base.in_channels = sample.channels;
  base.in_freq = sample.freq;
  base.seq_len = sample.time;
  base.classes = classes;
  base.validate();
  return base;
}

template <class T>
Evaluation evaluate_features(ParamSet<T>& params, const ModelConfig& cfg,
                             const std::vector<FeatureTensor>& features,
                             const std::vector<int>& labels, std::size_t batch_size) {
  if (features.empty()) throw ValidationError("evaluate: no windows");
  if (features.size() != labels.size()) throw ValidationError("evaluate: label count mismatch");
  std::vector<int> predicted;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < features.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(features.size(), start + batch_size); ++i) idx.push_back(i);
    GradTape<T> tape(false);
    BoundParams<T> bound(tape, params);
    Var<T> logits = forward(bound, cfg, tape.constant(stack_features<T>(features, idx)), Mode::eval);
    std::vector<int> y;
    for (std::size_t i : idx) y.push_back(labels[i]);
    loss_sum += double(cross_entropy(logits, std::span<const int>(y)).value()[0]) * double(idx.size());
    const Tensor<T>& z = logits.value();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      std::size_t best = 0;
      for (std::size_t c = 1; c < cfg.classes; ++c)
        if (z[b * cfg.classes + c] > z[b * cfg.classes + best]) best = c;
      predicted.push_back(int(best));
    }
  }
  return {Metrics::from_predictions(predicted, labels, cfg.classes),
          loss_sum / double(features.size())};
}

template <class T>
Metrics evaluate(ParamSet<T>& params, const ModelConfig& cfg, const std::vector<CsiWindow>& windows,
                 const FeaturePipeline& pipeline) {
  std::vector<FeatureTensor> feats;
  std::vector<int> labels;
  for (const CsiWindow& w : windows) {
    feats.push_back(pipeline(w));
    labels.push_back(w.label);
  }
  return evaluate_features(params, cfg, feats, labels).metrics;
}

// ---------------------------------------------------------------------------
// training loop

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (a + 1) + 0xD1B54A32D192ED03ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace

template <class T>
TrainResult<T> train_features(const std::vector<FeatureTensor>& train_x,
                              const std::vector<int>& train_y,
                              const std::vector<FeatureTensor>& val_x,
                              const std::vector<int>& val_y, const ModelConfig& model_cfg,
                              const TrainConfig& cfg,
                              const std::optional<std::filesystem::path>& checkpoint,
                              const std::vector<AuxTensor>& aux) {
  cfg.validate();
  model_cfg.validate();
  if (train_x.empty() || val_x.empty()) throw ValidationError("train: both splits must be non-empty");
  if (train_x.size() != train_y.size() || val_x.size() != val_y.size())
    throw ValidationError("train: feature/label count mismatch");

  ParamSet<T> params = init_params<T>(model_cfg, cfg.seed);
  OptimizerState<T> opt;
  BalancedSampler sampler(train_y, model_cfg.classes, cfg.batch_size, derive_seed(cfg.seed, 1, 0));

  TrainResult<T> result{TrainReport{}, params, 0};
  double best_loss = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    double loss_sum = 0.0;
    const auto batches = sampler.epoch();
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const std::vector<std::size_t>& idx = batches[bi];
      GradTape<T> tape(true, derive_seed(cfg.seed, 2 + epoch, bi));
      BoundParams<T> bound(tape, params);
      std::vector<int> y;
      for (std::size_t i : idx) y.push_back(train_y[i]);
      Var<T> logits = forward(bound, model_cfg, tape.constant(stack_features<T>(train_x, idx)), Mode::train);
      Var<T> loss = cross_entropy(logits, std::span<const int>(y));
      const double lv = double(loss.value()[0]);
      if (!std::isfinite(lv)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(bi));
      }
      tape.backward(loss);
      adamw_step(params, bound.gradients(), opt, cfg);
      loss_sum += lv;
    }

    Evaluation ev = evaluate_features(params, model_cfg, val_x, val_y, cfg.batch_size);
    result.report.train_loss.push_back(loss_sum / double(batches.size()));
    result.report.val_loss.push_back(ev.loss);
    result.report.val_metrics.push_back(ev.metrics);
    if (ev.loss < best_loss) {
      best_loss = ev.loss;
      result.report.best_epoch = epoch;
      result.best_params = params;
      result.best_step = opt.step;
      if (checkpoint) {
        Checkpoint ck{model_cfg, params.template cast<float>(), std::uint32_t(opt.step), aux};
        save_checkpoint(*checkpoint, ck);
        result.report.best_checkpoint = checkpoint->string();
      }
    }
  }
  return result;
}

template <class T>
TrainResult<T> train(const std::vector<CsiWindow>& train_windows,
                     const std::vector<CsiWindow>& val_windows, const ModelConfig& model_cfg,
                     const TrainConfig& cfg, const FeaturePipeline& pipeline,
                     const std::optional<std::filesystem::path>& checkpoint,
                     const std::vector<AuxTensor>& aux) {
  std::vector<FeatureTensor> tx, vx;
  std::vector<int> ty, vy;
  for (const CsiWindow& w : train_windows) {
    tx.push_back(pipeline(w));
    ty.push_back(w.label);
  }
  for (const CsiWindow& w : val_windows) {
    vx.push_back(pipeline(w));
    vy.push_back(w.label);
  }
  return train_features<T>(tx, ty, vx, vy, model_cfg, cfg, checkpoint, aux);
}

#define WIFLEX_INSTANTIATE_TRAINING(T)                                                          \
  template void adamw_step<T>(ParamSet<T>&, const std::map<std::string, Tensor<T>>&,            \
                              OptimizerState<T>&, const TrainConfig&);                          \
  template Tensor<T> stack_features<T>(const std::vector<FeatureTensor>&,                       \
                                       const std::vector<std::size_t>&);                        \
  template Evaluation evaluate_features<T>(ParamSet<T>&, const ModelConfig&,                    \
                                           const std::vector<FeatureTensor>&,                   \
                                           const std::vector<int>&, std::size_t);               \
  template Metrics evaluate<T>(ParamSet<T>&, const ModelConfig&, const std::vector<CsiWindow>&, \
                               const FeaturePipeline&);                                         \
  template TrainResult<T> train_features<T>(                                                    \
      const std::vector<FeatureTensor>&, const std::vector<int>&,                               \
      const std::vector<FeatureTensor>&, const std::vector<int>&, const ModelConfig&,           \
      const TrainConfig&, const std::optional<std::filesystem::path>&,                          \
      const std::vector<AuxTensor>&);                                                           \
  template TrainResult<T> train<T>(const std::vector<CsiWindow>&, const std::vector<CsiWindow>&, \
                                   const ModelConfig&, const TrainConfig&,                      \
                                   const FeaturePipeline&,                                      \
                                   const std::optional<std::filesystem::path>&,                 \
                                   const std::vector<AuxTensor>&);

WIFLEX_INSTANTIATE_TRAINING(float)
WIFLEX_INSTANTIATE_TRAINING(double)

}  // namespace wiflex
