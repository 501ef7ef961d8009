// One PASS/FAIL line per acceptance criterion; exit status is nonzero if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <unistd.h>

#include "helpers.hpp"
#include "model_harness.hpp"
#include "oracles.hpp"
#include "wiflex/bench.hpp"
#include "wiflex/binary_io.hpp"
#include "wiflex/training.hpp"

using namespace wiflex;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() /
         ("wiflex_acc_" + std::to_string(::getpid()) + "_" + name);
}

ModelConfig amplitude_3do() {
  ModelConfig c;
  c.in_channels = 1;
  c.in_freq = 52;
  c.seq_len = 351;
  c.classes = 3;
  c.gauss_count = 10;
  return c;
}

ModelConfig dfs_3do() {
  ModelConfig c = amplitude_3do();
  c.in_channels = 52;
  c.in_freq = 121;
  return c;
}

void param_budget(Outcome& o) {
  const std::size_t amp = param_count(amplitude_3do());
  const std::size_t dfs = param_count(dfs_3do());
  o.detail << "amplitude=" << amp << " dfs=" << dfs;
  o.require(amp >= 40'000 && amp <= 60'000, "amplitude count in [40000, 60000]");
  o.require(dfs >= 50'000 && dfs <= 70'000, "dfs count in [50000, 70000]");
  o.require(dfs > amp, "dfs count exceeds amplitude count");
}

void gradient_check(Outcome& o) {
  const GradCheckReport r = testing::model_grad_check(testing::tiny_config(), 11, 1e-4, 1e-4);
  o.detail << "max_rel_error=" << r.max_rel_error << " worst=" << r.worst_tensor
           << " tensors=" << r.tensors.size();
  o.require(r.passed && r.max_rel_error < 1e-4, "max relative error < 1e-4");
  for (const char* name : {"pos.mu", "pos.sigma", "pos.E", "class_token"}) {
    const auto it = std::find_if(r.tensors.begin(), r.tensors.end(),
                                 [&](const TensorGradError& t) { return t.name == name; });
    o.require(it != r.tensors.end() && it->checked > 0, std::string(name) + " checked");
  }
}

// Reflect-padded Gaussian-windowed segment around frame t through the naive DFT,
// re-centred so that DC lands in the middle of the kept band.
std::vector<cdouble> oracle_frame(const std::vector<cdouble>& series, std::size_t t, std::size_t L,
                                  double sigma, std::size_t bins) {
  const long T = long(series.size());
  std::vector<cdouble> seg(L);
  for (std::size_t j = 0; j < L; ++j) {
    long i = long(t) + long(j) - long((L - 1) / 2);
    while (i < 0 || i >= T) i = i < 0 ? -i : 2 * (T - 1) - i;
    const double z = (double(j) - (double(L) - 1) / 2) / sigma;
    seg[j] = series[std::size_t(i)] * std::exp(-0.5 * z * z);
  }
  const auto X = oracle::naive_dft(seg);
  std::vector<cdouble> out(bins);
  const long half = long(bins - 1) / 2;
  for (long b = -half; b <= half; ++b) out[std::size_t(b + half)] = X[std::size_t((b + long(L)) % long(L))];
  return out;
}

void dfs_oracle(Outcome& o) {
  const std::size_t F = 52, T = 351;
  const DfsConfig cfg;
  CsiWindow w;
  w.subcarriers = F;
  w.length = T;
  w.csi.resize(F * T);
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t t = 0; t < T; ++t)
      w.at(f, t) = std::polar(1.0 + 0.01 * double(f), 2 * std::numbers::pi * 12.0 * double(t) / 100.0);
  const DfsSpectrum s = stft_dfs(w, cfg);
  const FeatureTensor m = dfs_magnitude(s);
  o.require(m.channels == 52 && m.freq == 121 && m.time == 351, "shape [52, 121, 351]");
  o.detail << "shape=[" << m.channels << ", " << m.freq << ", " << m.time << "]";

  const std::size_t dc = cfg.band_bins / 2, target = dc + 15;
  // The first and last frames see a mirrored (negative-frequency) half segment,
  // where +12 and -12 Hz tie; the peak is asserted on every interior frame.
  std::size_t off_peak = 0;
  for (std::size_t c = 0; c < F; ++c)
    for (std::size_t t = 1; t + 1 < T; ++t) {
      std::size_t best = 0;
      for (std::size_t b = 1; b < m.freq; ++b)
        if (m.at(c, b, t) > m.at(c, best, t)) best = b;
      off_peak += best != target;
    }
  o.require(off_peak == 0, "peak at DC+15 on every interior frame");

  double worst = 0.0;
  for (std::size_t f : {std::size_t{0}, std::size_t{25}, std::size_t{51}}) {
    std::vector<cdouble> series(w.csi.begin() + long(f * T), w.csi.begin() + long((f + 1) * T));
    for (std::size_t t : {std::size_t{0}, std::size_t{1}, std::size_t{100}, std::size_t{175}, T - 1}) {
      const auto ref = oracle_frame(series, t, cfg.segment_len, cfg.gauss_sigma, cfg.band_bins);
      double scale = 0.0;
      for (const auto& v : ref) scale = std::max(scale, std::abs(v));
      for (std::size_t b = 0; b < cfg.band_bins; ++b)
        worst = std::max(worst, std::abs(s.at(f, b, t) - ref[b]) / scale);
    }
  }
  o.detail << " peak_bin=DC+15 oracle_rel_error=" << worst;
  o.require(worst < 1e-9, "matches naive DFT within 1e-9");
}

double train_and_score(FeatureKind kind, Outcome& o) {
  SynthSpec spec;
  spec.subcarriers = 8;
  spec.class_doppler_hz = {4.0, 12.0, 24.0};
  spec.snr_db = 20.0;
  spec.sequences_per_class = 20;
  spec.packets_per_sequence = 512;
  spec.seed = 2024;
  const auto windows = extract_windows(synth_generate(spec), 128, 128, false);
  const auto parts = split_windows(windows, SplitSpec{{3, 1, 1}, 7});
  FeaturePipeline pipe;
  pipe.kind = kind;
  TrainConfig cfg;
  cfg.seed = 1;
  ModelConfig base;
  base.gauss_count = 10;
  const ModelConfig mcfg = configure_for(pipe(parts[0].front()), 3, base);
  const auto r = train<float>(parts[0], parts[1], mcfg, cfg, pipe);
  const double acc = r.report.val_metrics[r.report.best_epoch].accuracy;
  o.detail << (kind == FeatureKind::amplitude ? "amplitude" : "dfs") << "_val_acc=" << acc
           << " (train/val windows " << parts[0].size() << "/" << parts[1].size() << ") ";
  return acc;
}

void end_to_end(Outcome& o) {
  const double amp = train_and_score(FeatureKind::amplitude, o);
  o.require(amp >= 0.95, "amplitude validation accuracy >= 0.95");
  const double dfs = train_and_score(FeatureKind::dfs_magnitude, o);
  o.require(dfs >= 0.95, "dfs validation accuracy >= 0.95");
}

void subsampling(Outcome& o) {
  std::mt19937_64 gen(5);
  std::normal_distribution<double> n(0.0, 1.0);
  CsiWindow w;
  w.subcarriers = 52;
  w.length = 64;
  w.csi.resize(52 * 64);
  for (auto& v : w.csi) v = {n(gen), n(gen)};

  const FeatureTensor a = amplitude(select_subcarriers(w, SubsamplingSpec::parse("U1")));
  const FeatureTensor b = amplitude(select_subcarriers(w, SubsamplingSpec::parse("none")));
  o.require(a.data == b.data && a.freq == b.freq, "U1 and none bit-identical");

  const auto u4 = subcarrier_indices(SubsamplingSpec::parse("U4"), 52);
  std::vector<std::size_t> want(13);
  for (std::size_t i = 0; i < 13; ++i) want[i] = 4 * i;
  o.require(u4 == want, "U4 keeps {0, 4, ..., 48}");

  const auto b84 = subcarrier_indices(SubsamplingSpec::parse("B8-4", 3), 52);
  const std::set<std::size_t> distinct(b84.begin(), b84.end());
  o.require(b84.size() == 32 && distinct.size() == 32, "B8-4 keeps 32 distinct indices");
  const auto sizes = band_sizes(52, 8);
  std::size_t start = 0;
  bool four_each = true;
  for (std::size_t size : sizes) {
    four_each &= std::count_if(b84.begin(), b84.end(),
                               [&](std::size_t i) { return i >= start && i < start + size; }) == 4;
    start += size;
  }
  o.require(four_each && start == 52, "4 indices per contiguous band");

  std::vector<CsiWindow> train{w};
  for (int k = 0; k < 3; ++k) {
    CsiWindow extra = w;
    for (auto& v : extra.csi) v = {n(gen), n(gen)};
    train.push_back(extra);
  }
  const PcaModel pca = pca_fit(train, 52);
  double err = 0.0;
  for (const auto& x : train) {
    const CsiWindow back = pca_reconstruct(pca_project(x, pca), pca);
    for (std::size_t i = 0; i < x.csi.size(); ++i) err = std::max(err, std::abs(back.csi[i] - x.csi[i]));
  }
  o.detail << "U4=" << u4.size() << " B8-4=" << b84.size() << " PC52_reconstruction_error=" << err;
  o.require(err < 1e-6, "PC52 reconstruction within 1e-6");
}

void adamw_analytics(Outcome& o) {
  TrainConfig cfg;
  ParamSet<double> p;
  p.add("w", Tensor<double>({4}, std::vector<double>{1.0, -2.5, 0.125, 7.0}), ParamKind::weight);
  const ParamSet<double> before = p;
  OptimizerState<double> st;
  std::map<std::string, Tensor<double>> g{{"w", Tensor<double>({4})}};
  adamw_step(p, g, st, cfg);
  bool exact = true;
  for (std::size_t i = 0; i < 4; ++i) exact &= p.at("w")[i] == before.at("w")[i] * (1.0 - 1e-3 * 1e-3);
  o.require(exact, "zero-gradient step scales by exactly 1 - 1e-6");

  ParamSet<double> q;
  q.add("theta", Tensor<double>({1}, 1.0), ParamKind::weight);
  OptimizerState<double> sq;
  const auto ref = oracle::adamw_quadratic(1.0, 10, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps);
  double err = 0.0;
  for (int t = 0; t < 10; ++t) {
    std::map<std::string, Tensor<double>> gq{{"theta", Tensor<double>({1}, 2.0 * q.at("theta")[0])}};
    adamw_step(q, gq, sq, cfg);
    err = std::max(err, std::abs(q.at("theta")[0] - ref[std::size_t(t)]));
  }
  o.detail << "quadratic_trajectory_error=" << err;
  o.require(err < 1e-10, "10-step trajectory within 1e-10");
}

void bench_protocol(Outcome& o) {
  double means[2] = {0.0, 0.0};
  int i = 0;
  for (const ModelConfig& cfg : {amplitude_3do(), dfs_3do()}) {
    auto params = init_params<float>(cfg, 3);
    BenchCounters counters;
    const BenchReport defaults;
    const BenchReport r = bench_inference(params, cfg, defaults.warmup_iters, defaults.measure_iters,
                                          defaults.batch, 0, &counters);
    o.require(counters.warmup == 100 && counters.measured == 1000, "exactly 100 + 1000 forwards");
    o.require(r.batch == 1 && r.warmup_iters == 100 && r.measure_iters == 1000, "report protocol fields");
    o.require(r.min_ms <= r.mean_ms && r.mean_ms <= r.max_ms && r.std_ms >= 0, "min <= mean <= max");
    const auto j = r.to_json();
    std::set<std::string> keys;
    for (const auto& [k, v] : j.items()) keys.insert(k);
    const auto& want = BenchReport::json_keys();
    bool typed = j["input_shape"].is_array() && j["input_shape"].size() == 3 &&
                 j["precision"].get<int>() == 32;
    for (const char* k : {"warmup_iters", "measure_iters", "batch"}) typed &= j[k].is_number_unsigned();
    for (const char* k : {"mean_ms", "std_ms", "min_ms", "max_ms"}) typed &= j[k].is_number();
    o.require(keys == std::set<std::string>(want.begin(), want.end()) && typed, "schema-exact report");
    means[i++] = r.mean_ms;
  }
  o.detail << "amplitude_mean_ms=" << means[0] << " dfs_mean_ms=" << means[1];
  o.require(means[1] > means[0], "dfs mean latency exceeds amplitude mean latency");
}

void determinism(Outcome& o) {
  SynthSpec spec;
  spec.subcarriers = 6;
  spec.sequences_per_class = 2;
  spec.packets_per_sequence = 200;
  spec.seed = 9;
  const CsiDataset ds = synth_generate(spec);
  const auto csib = temp_path("round.csib");
  save_dataset(ds, csib);
  const auto bytes = io::read_file(csib);
  const CsiDataset back = load_dataset(csib);
  save_dataset(back, csib);
  o.require(back.sequences == ds.sequences && io::read_file(csib) == bytes, "CSIB round trip");
  std::filesystem::remove(csib);

  const ModelConfig cfg = testing::tiny_config();
  Checkpoint ck;
  ck.config = cfg;
  ck.params = init_params<float>(cfg, 4);
  ck.step = 17;
  const auto wflx = temp_path("round.wflx");
  save_checkpoint(wflx, ck);
  const auto first = io::read_file(wflx);
  const Checkpoint loaded = load_checkpoint(wflx);
  save_checkpoint(wflx, loaded);
  o.require(loaded.params == ck.params && loaded.step == 17 && io::read_file(wflx) == first,
            "WFLX round trip");
  std::filesystem::remove(wflx);

  const auto windows = extract_windows(ds, 50, 50, false);
  const auto parts = split_windows(windows, SplitSpec{{3, 1}, 2});
  FeaturePipeline pipe;
  ModelConfig base;
  base.d_model = 8;
  base.heads = 2;
  base.ffn_dim = 16;
  base.encoder_layers = 1;
  base.gauss_count = 4;
  const ModelConfig mcfg = configure_for(pipe(parts[0].front()), 3, base);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.seed = 12;
  const auto a = train<double>(parts[0], parts[1], mcfg, tc, pipe);
  const auto b = train<double>(parts[0], parts[1], mcfg, tc, pipe);
  o.require(a.report.to_json().dump() == b.report.to_json().dump() && a.best_params == b.best_params,
            "identical TrainReports for identical seeds");
  o.detail << "csib_bytes=" << bytes.size() << " wflx_bytes=" << first.size();
}

void encoder_property(Outcome& o) {
  ModelConfig cfg = testing::tiny_config();
  cfg.encoder_layers = 2;
  auto params = init_params<double>(cfg, 21);
  std::mt19937_64 gen(22);
  const std::size_t B = 2, L = 9, d = cfg.d_model;
  const auto tokens = testing::random_tensor({B, L, d}, gen);
  std::vector<std::size_t> perm(L);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  Tensor<double> permuted(tokens.shape());
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t i = 0; i < d; ++i) permuted[(b * L + l) * d + i] = tokens[(b * L + perm[l]) * d + i];

  // Encoder stack alone: no positional encoding and no class token.
  GradTape<double> tape(false);
  BoundParams<double> p(tape, params);
  const auto y = encoder_forward(p, cfg, tape.constant(tokens), Mode::eval).value();
  const auto yp = encoder_forward(p, cfg, tape.constant(permuted), Mode::eval).value();
  double err = 0.0;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t l = 0; l < L; ++l)
      for (std::size_t i = 0; i < d; ++i)
        err = std::max(err, std::abs(yp[(b * L + l) * d + i] - y[(b * L + perm[l]) * d + i]));
  o.require(err < 1e-6, "encoder outputs permute with the inputs");

  double changed = 0.0;
  std::size_t trials_changed = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = testing::random_tensor({1, cfg.in_channels, cfg.in_freq, cfg.seq_len}, gen);
    std::vector<std::size_t> tperm(cfg.seq_len);
    std::iota(tperm.begin(), tperm.end(), 0);
    std::shuffle(tperm.begin(), tperm.end(), gen);
    Tensor<double> xp(x.shape());
    const std::size_t T = cfg.seq_len, rows = x.size() / T;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t t = 0; t < T; ++t) xp[r * T + t] = x[r * T + tperm[t]];
    const double diff = testing::max_abs_diff(predict(params, cfg, x).values(), predict(params, cfg, xp).values());
    changed = std::max(changed, diff);
    trials_changed += diff > 1e-9;
  }
  o.detail << "equivariance_error=" << err << " max_logit_change_with_pe=" << changed;
  o.require(trials_changed == 5, "logits change under permutation with positional encoding");
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Outcome&)>>> criteria{
      {"parameter budget", param_budget},
      {"gradient correctness", gradient_check},
      {"DFS oracle", dfs_oracle},
      {"end-to-end learning", end_to_end},
      {"sub-sampling identities", subsampling},
      {"AdamW analytics", adamw_analytics},
      {"bench protocol", bench_protocol},
      {"determinism and formats", determinism},
      {"encoder property", encoder_property},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      criteria[i].second(o);
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " [exception: " << e.what() << "]";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failures += !o.pass;
    std::printf("criterion %zu (%s): %s in %.2f s — %s\n", i + 1, criteria[i].first.c_str(),
                o.pass ? "PASS" : "FAIL", secs, o.detail.str().c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
