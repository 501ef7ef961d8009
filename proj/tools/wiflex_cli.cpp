// wiflex: synthetic data, feature extraction, training, evaluation and latency benchmark.
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "wiflex/bench.hpp"
#include "wiflex/parallel.hpp"
#include "wiflex/training.hpp"

using namespace wiflex;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  int precision = 32;
  unsigned threads = 1;
  bool pretty = false;
};

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

double parse_real(const std::string& key, const std::string& text) {
  const std::string t = trim(text);
  if (t == "inf" || t == "+inf") return std::numeric_limits<double>::infinity();
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(t, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != t.size()) throw ValidationError("spec: '" + key + "' is not a number: " + t);
  return v;
}

std::size_t parse_count(const std::string& key, const std::string& text) {
  const double v = parse_real(key, text);
  if (!(v >= 0) || v != std::floor(v) || v > 1e12)
    throw ValidationError("spec: '" + key + "' must be a non-negative integer");
  return std::size_t(v);
}

/// key=value lines; '#' starts a comment.
SynthSpec read_synth_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open spec file " + path.string());
  SynthSpec spec;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("spec line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (key == "F") {
      spec.subcarriers = parse_count(key, value);
    } else if (key == "c") {
      spec.classes = parse_count(key, value);
    } else if (key == "sample_rate_hz") {
      spec.sample_rate_hz = parse_real(key, value);
    } else if (key == "class_doppler_hz") {
      spec.class_doppler_hz.clear();
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) spec.class_doppler_hz.push_back(parse_real(key, item));
    } else if (key == "snr_db") {
      spec.snr_db = parse_real(key, value);
    } else if (key == "packets_per_sequence") {
      spec.packets_per_sequence = parse_count(key, value);
    } else if (key == "sequences_per_class") {
      spec.sequences_per_class = parse_count(key, value);
    } else if (key == "seed") {
      spec.seed = parse_count(key, value);
    } else if (key == "static_path_gain") {
      spec.static_path_gain = parse_real(key, value);
    } else {
      throw ValidationError("spec line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

FeatureKind parse_kind(const std::string& s) {
  if (s == "amplitude") return FeatureKind::amplitude;
  if (s == "dfs") return FeatureKind::dfs_magnitude;
  throw ValidationError("unknown feature kind '" + s + "' (amplitude|dfs)");
}

std::vector<double> parse_ratios(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ':')) out.push_back(parse_real("split", item));
  return out;
}

void emit(const json& j, const std::string& out, const std::string& table) {
  if (!out.empty()) {
    std::ofstream f(out, std::ios::binary);
    if (!f) throw IoError("cannot write " + out);
    f << j.dump(2) << '\n';
    if (!f) throw IoError("write failed: " + out);
  }
  std::cout << (table.empty() ? j.dump(2) : table) << '\n';
}

std::string metrics_table(const Metrics& m) {
  std::ostringstream s;
  s << "accuracy         " << m.accuracy << "\nprecision_macro  " << m.precision_macro
    << "\nrecall_macro     " << m.recall_macro << "\nf1_macro         " << m.f1_macro << "\nconfusion (true x predicted)";
  for (const auto& row : m.confusion) {
    s << "\n ";
    for (std::size_t v : row) s << ' ' << v;
  }
  return s.str();
}

Tensor<float> to_float_tensor(Shape shape, const std::vector<double>& values) {
  std::vector<float> f(values.begin(), values.end());
  return Tensor<float>(std::move(shape), std::move(f));
}

std::vector<double> to_doubles(const Tensor<float>& t) { return {t.values().begin(), t.values().end()}; }

// The fitted projection travels in the checkpoint as aux tensors; complex values
// are stored as trailing (re, im) pairs.
std::vector<AuxTensor> pca_aux(const PcaModel& m) {
  std::vector<double> mean, comps;
  for (const auto& v : m.mean) mean.insert(mean.end(), {v.real(), v.imag()});
  for (const auto& v : m.components) comps.insert(comps.end(), {v.real(), v.imag()});
  return {{"aux.pca.mean", to_float_tensor({m.subcarriers, 2}, mean)},
          {"aux.pca.components", to_float_tensor({m.count, m.subcarriers, 2}, comps)},
          {"aux.pca.eigenvalues", to_float_tensor({m.count}, m.eigenvalues)}};
}

PcaModel pca_from_aux(const std::vector<AuxTensor>& extras) {
  const Tensor<float>* mean = nullptr;
  const Tensor<float>* comps = nullptr;
  const Tensor<float>* eig = nullptr;
  for (const auto& e : extras) {
    if (e.name == "aux.pca.mean") mean = &e.value;
    if (e.name == "aux.pca.components") comps = &e.value;
    if (e.name == "aux.pca.eigenvalues") eig = &e.value;
  }
  if (!mean || !comps || !eig) throw FormatError("checkpoint has no PCA projection (aux.pca.*)");
  if (mean->rank() != 2 || comps->rank() != 3 || comps->dim(1) != mean->dim(0))
    throw FormatError("checkpoint PCA tensors have inconsistent shapes");
  PcaModel m;
  m.subcarriers = mean->dim(0);
  m.count = comps->dim(0);
  const auto mv = to_doubles(*mean), cv = to_doubles(*comps);
  for (std::size_t i = 0; i < mv.size(); i += 2) m.mean.emplace_back(mv[i], mv[i + 1]);
  for (std::size_t i = 0; i < cv.size(); i += 2) m.components.emplace_back(cv[i], cv[i + 1]);
  m.eigenvalues = to_doubles(*eig);
  return m;
}

// --- subcommands -----------------------------------------------------------

struct SynthArgs {
  std::string spec, out;
};

void run_synth(const SynthArgs& a) {
  const SynthSpec spec = read_synth_spec(a.spec);
  const CsiDataset ds = synth_generate(spec);
  save_dataset(ds, a.out);
  std::cout << json{{"sequences", ds.sequences.size()},
                    {"packets", ds.packet_count()},
                    {"subcarriers", ds.subcarrier_count},
                    {"classes", ds.class_count},
                    {"out", a.out}}
                   .dump(2)
            << '\n';
}

struct FeatureArgs {
  std::string in, kind = "amplitude", subsample = "none", out;
  std::size_t window = 351, stride = 351;
  std::uint64_t seed = 0;
};

void run_features(const FeatureArgs& a, const Globals& g) {
  const CsiDataset ds = load_dataset(a.in);
  const auto windows = extract_windows(ds, a.window, a.stride, false);
  FeaturePipeline pipe;
  pipe.kind = parse_kind(a.kind);
  pipe.subsampling = SubsamplingSpec::parse(a.subsample, a.seed);
  if (pipe.subsampling.strategy == SubsamplingSpec::Strategy::pca)
    pipe.pca = pca_fit(windows, pipe.subsampling.n);
  fs::create_directories(a.out);
  json files = json::array(), labels = json::array();
  std::vector<std::size_t> shape;
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const FeatureTensor t = pipe(windows[i]);
    char name[32];
    std::snprintf(name, sizeof name, "window_%06zu.wft", i);
    save_feature_tensor(t, fs::path(a.out) / name);
    files.push_back(name);
    labels.push_back(windows[i].label);
    shape = t.shape();
  }
  const json manifest{{"window_count", windows.size()},
                      {"shape", shape},
                      {"kind", a.kind},
                      {"subsample", pipe.subsampling.to_string()},
                      {"labels", labels},
                      {"files", files}};
  std::ofstream f(fs::path(a.out) / "manifest.json", std::ios::binary);
  if (!f) throw IoError("cannot write manifest in " + a.out);
  f << manifest.dump(2) << '\n';
  if (g.pretty) {
    std::cout << windows.size() << " windows of shape [" << (shape.empty() ? 0 : shape[0]) << ", "
              << (shape.empty() ? 0 : shape[1]) << ", " << (shape.empty() ? 0 : shape[2]) << "] -> "
              << a.out << '\n';
  } else {
    std::cout << json{{"window_count", windows.size()}, {"shape", shape}, {"out", a.out}}.dump(2) << '\n';
  }
}

struct TrainArgs {
  std::string in, kind = "amplitude", subsample = "none", split = "3:1:1", out;
  std::size_t window = 351, stride = 351, epochs = 10, batch = 32;
  double lr = 1e-3, wd = 1e-3;
  std::uint64_t seed = 0;
};

template <class T>
TrainReport train_as(const std::vector<CsiWindow>& tr, const std::vector<CsiWindow>& va,
                     const ModelConfig& mcfg, const TrainConfig& cfg, const FeaturePipeline& pipe,
                     const fs::path& ckpt, const std::vector<AuxTensor>& aux) {
  return train<T>(tr, va, mcfg, cfg, pipe, ckpt, aux).report;
}

void run_train(const TrainArgs& a, const Globals& g) {
  const CsiDataset ds = load_dataset(a.in);
  const auto windows = extract_windows(ds, a.window, a.stride, false);
  const auto parts = split_windows(windows, SplitSpec{parse_ratios(a.split), a.seed});
  if (parts.size() < 2 || parts[0].empty() || parts[1].empty())
    throw ValidationError("train: split must yield non-empty train and validation parts");

  FeaturePipeline pipe;
  pipe.kind = parse_kind(a.kind);
  pipe.subsampling = SubsamplingSpec::parse(a.subsample, a.seed);
  std::vector<AuxTensor> aux;
  if (pipe.subsampling.strategy == SubsamplingSpec::Strategy::pca) {
    pipe.pca = pca_fit(parts[0], pipe.subsampling.n);
    aux = pca_aux(*pipe.pca);
  }
  TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.lr = a.lr;
  cfg.weight_decay = a.wd;
  cfg.batch_size = a.batch;
  cfg.seed = a.seed;
  cfg.validate();
  const ModelConfig mcfg = configure_for(pipe(parts[0].front()), ds.class_count);

  fs::create_directories(a.out);
  const fs::path ckpt = fs::path(a.out) / "best.wflx";
  const TrainReport report = g.precision == 64 ? train_as<double>(parts[0], parts[1], mcfg, cfg, pipe, ckpt, aux)
                                               : train_as<float>(parts[0], parts[1], mcfg, cfg, pipe, ckpt, aux);
  const json j = report.to_json();
  std::string table;
  if (g.pretty) {
    std::ostringstream s;
    s << "epoch  train_loss  val_loss  val_accuracy";
    for (std::size_t e = 0; e < report.train_loss.size(); ++e)
      s << '\n' << e << "      " << report.train_loss[e] << "  " << report.val_loss[e] << "  "
        << report.val_metrics[e].accuracy << (e == report.best_epoch ? "  *" : "");
    s << "\nbest checkpoint: " << report.best_checkpoint;
    table = s.str();
  }
  emit(j, (fs::path(a.out) / "train_report.json").string(), table);
}

struct EvalArgs {
  std::string ckpt, in, kind = "amplitude", subsample = "none", out;
  std::size_t stride = 0;
  std::uint64_t seed = 0;
};

void run_eval(const EvalArgs& a, const Globals& g) {
  Checkpoint ck = load_checkpoint(a.ckpt);
  const CsiDataset ds = load_dataset(a.in);
  const std::size_t window = ck.config.seq_len;
  const auto windows = extract_windows(ds, window, a.stride ? a.stride : window, false);
  FeaturePipeline pipe;
  pipe.kind = parse_kind(a.kind);
  pipe.subsampling = SubsamplingSpec::parse(a.subsample, a.seed);
  if (pipe.subsampling.strategy == SubsamplingSpec::Strategy::pca) pipe.pca = pca_from_aux(ck.extras);
  if (windows.empty()) throw ValidationError("eval: input yields no windows of length " + std::to_string(window));
  const FeatureTensor probe = pipe(windows.front());
  if (probe.channels != ck.config.in_channels || probe.freq != ck.config.in_freq)
    throw ConfigError("eval: features [" + std::to_string(probe.channels) + ", " + std::to_string(probe.freq) +
                      "] do not match the checkpoint input [" + std::to_string(ck.config.in_channels) + ", " +
                      std::to_string(ck.config.in_freq) + "]");
  Metrics m;
  if (g.precision == 64) {
    auto p = ck.params.cast<double>();
    m = evaluate(p, ck.config, windows, pipe);
  } else {
    m = evaluate(ck.params, ck.config, windows, pipe);
  }
  emit(m.to_json(), a.out, g.pretty ? metrics_table(m) : "");
}

struct BenchArgs {
  std::string ckpt, out;
  std::size_t warmup = 100, iters = 1000, batch = 1;
  std::uint64_t seed = 0;
};

void run_bench(const BenchArgs& a, const Globals& g) {
  Checkpoint ck = load_checkpoint(a.ckpt);
  BenchReport r;
  if (g.precision == 64) {
    auto p = ck.params.cast<double>();
    r = bench_inference(p, ck.config, a.warmup, a.iters, a.batch, a.seed);
  } else {
    r = bench_inference(ck.params, ck.config, a.warmup, a.iters, a.batch, a.seed);
  }
  std::string table;
  if (g.pretty) {
    std::ostringstream s;
    s << "input      [" << r.batch << ", " << r.input_shape[0] << ", " << r.input_shape[1] << ", "
      << r.input_shape[2] << "] fp" << r.precision << "\niterations " << r.warmup_iters << " warmup + "
      << r.measure_iters << " measured\nmean_ms    " << r.mean_ms << "\nstd_ms     " << r.std_ms
      << "\nmin_ms     " << r.min_ms << "\nmax_ms     " << r.max_ms << "\nthreads    " << r.threads
      << "\ncpu        " << r.cpu_model;
    table = s.str();
  }
  emit(r.to_json(), a.out, table);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"WiFi CSI activity recognition: synth, features, train, eval, bench"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--precision", g.precision, "Floating-point width for training and inference")
      ->check(CLI::IsMember({32, 64}));
  app.add_option("--threads", g.threads, "Worker threads for the heavier kernels")->check(CLI::Range(1u, 256u));
  app.add_flag("--pretty", g.pretty, "Human-readable table instead of JSON on stdout");

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic CSIB dataset");
  synth->add_option("--spec", sa.spec, "key=value spec file")->required();
  synth->add_option("--out", sa.out, "Output .csib path")->required();

  FeatureArgs fa;
  auto* feats = app.add_subcommand("features", "Extract feature tensors and a manifest");
  feats->add_option("--in", fa.in, "Input CSIB")->required();
  feats->add_option("--kind", fa.kind, "amplitude|dfs");
  feats->add_option("--window", fa.window, "Window length in packets");
  feats->add_option("--stride", fa.stride, "Window stride in packets");
  feats->add_option("--subsample", fa.subsample, "none | R<n> | U<n> | B<n>-<m> | PC<n>");
  feats->add_option("--seed", fa.seed, "Seed for random sub-sampling");
  feats->add_option("--out", fa.out, "Output directory")->required();

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train and keep the best checkpoint by validation loss");
  trn->add_option("--in", ta.in, "Input CSIB")->required();
  trn->add_option("--kind", ta.kind, "amplitude|dfs");
  trn->add_option("--window", ta.window, "Window length in packets");
  trn->add_option("--stride", ta.stride, "Window stride in packets");
  trn->add_option("--subsample", ta.subsample, "none | R<n> | U<n> | B<n>-<m> | PC<n>");
  trn->add_option("--split", ta.split, "train:val[:test] ratios");
  trn->add_option("--epochs", ta.epochs, "Epochs");
  trn->add_option("--lr", ta.lr, "Learning rate");
  trn->add_option("--wd", ta.wd, "Decoupled weight decay");
  trn->add_option("--batch", ta.batch, "Batch size");
  trn->add_option("--seed", ta.seed, "Seed");
  trn->add_option("--out", ta.out, "Output directory")->required();

  EvalArgs ea;
  auto* evl = app.add_subcommand("eval", "Metrics of a checkpoint on a dataset");
  evl->add_option("--ckpt", ea.ckpt, "WFLX checkpoint")->required();
  evl->add_option("--in", ea.in, "Input CSIB")->required();
  evl->add_option("--kind", ea.kind, "amplitude|dfs");
  evl->add_option("--subsample", ea.subsample, "Sub-sampling used at training time");
  evl->add_option("--stride", ea.stride, "Window stride (default: the window length)");
  evl->add_option("--seed", ea.seed, "Seed used at training time (random sub-sampling)");
  evl->add_option("--out", ea.out, "Metrics JSON path");

  BenchArgs ba;
  auto* bch = app.add_subcommand("bench", "Inference latency of a checkpoint");
  bch->add_option("--ckpt", ba.ckpt, "WFLX checkpoint")->required();
  bch->add_option("--warmup", ba.warmup, "Unmeasured forwards");
  bch->add_option("--iters", ba.iters, "Measured forwards");
  bch->add_option("--batch", ba.batch, "Batch size");
  bch->add_option("--seed", ba.seed, "Seed of the random input");
  bch->add_option("--out", ba.out, "BenchReport JSON path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "usage_error: " << trim(e.what()) << '\n';
    return 2;
  }

  try {
    set_num_threads(g.threads);
    if (*synth) run_synth(sa);
    if (*feats) run_features(fa, g);
    if (*trn) run_train(ta, g);
    if (*evl) run_eval(ea, g);
    if (*bch) run_bench(ba, g);
  } catch (const Error& e) {
    std::cerr << e.code() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal_error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
