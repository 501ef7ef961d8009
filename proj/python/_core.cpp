#include <pybind11/complex.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "wiflex/bench.hpp"
#include "wiflex/training.hpp"

namespace py = pybind11;
using namespace wiflex;

namespace {

using CArray = py::array_t<std::complex<double>, py::array::c_style | py::array::forcecast>;
using DArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

CsiWindow window_from(const CArray& csi) {
  if (csi.ndim() != 2) throw ValidationError("csi must be a 2-D [F, T] complex array");
  CsiWindow w;
  w.subcarriers = std::size_t(csi.shape(0));
  w.length = std::size_t(csi.shape(1));
  w.csi.assign(csi.data(), csi.data() + csi.size());
  return w;
}

py::array_t<double> to_array(const FeatureTensor& t) {
  py::array_t<double> out({t.channels, t.freq, t.time});
  std::copy(t.data.begin(), t.data.end(), out.mutable_data());
  return out;
}

std::vector<FeatureTensor> features_from(const DArray& x) {
  if (x.ndim() != 4) throw ValidationError("features must be a 4-D [N, C, F, T] array");
  const std::size_t n = std::size_t(x.shape(0)), C = std::size_t(x.shape(1)), F = std::size_t(x.shape(2)),
                    T = std::size_t(x.shape(3));
  std::vector<FeatureTensor> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].kind = C > 1 ? FeatureKind::dfs_magnitude : FeatureKind::amplitude;
    out[i].channels = C;
    out[i].freq = F;
    out[i].time = T;
    out[i].data.assign(x.data() + i * C * F * T, x.data() + (i + 1) * C * F * T);
  }
  return out;
}

template <class T>
Tensor<T> batch_from(const DArray& x) {
  if (x.ndim() != 4) throw ValidationError("input must be a 4-D [B, C, F, T] array");
  Shape shape;
  for (py::ssize_t d = 0; d < 4; ++d) shape.push_back(std::size_t(x.shape(d)));
  return Tensor<T>(shape, std::vector<T>(x.data(), x.data() + x.size()));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of wiflexformer";

  static py::exception<Error> error(m, "WiflexError");
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const Error& e) {
      py::set_error(error, (e.code() + ": " + e.what()).c_str());
    }
  });

  py::class_<SynthSpec>(m, "SynthSpec")
      .def(py::init<>())
      .def_readwrite("subcarriers", &SynthSpec::subcarriers)
      .def_readwrite("classes", &SynthSpec::classes)
      .def_readwrite("sample_rate_hz", &SynthSpec::sample_rate_hz)
      .def_readwrite("class_doppler_hz", &SynthSpec::class_doppler_hz)
      .def_readwrite("snr_db", &SynthSpec::snr_db)
      .def_readwrite("packets_per_sequence", &SynthSpec::packets_per_sequence)
      .def_readwrite("sequences_per_class", &SynthSpec::sequences_per_class)
      .def_readwrite("seed", &SynthSpec::seed)
      .def_readwrite("static_path_gain", &SynthSpec::static_path_gain);

  m.def(
      "synth_windows",
      [](const SynthSpec& spec, std::size_t window, std::size_t stride) {
        const auto windows = extract_windows(synth_generate(spec), window, stride, false);
        const std::size_t F = spec.subcarriers;
        py::array_t<std::complex<double>> csi({windows.size(), F, window});
        py::array_t<int> labels(py::ssize_t(windows.size()));
        for (std::size_t i = 0; i < windows.size(); ++i) {
          std::copy(windows[i].csi.begin(), windows[i].csi.end(), csi.mutable_data() + i * F * window);
          labels.mutable_at(py::ssize_t(i)) = windows[i].label;
        }
        return py::make_tuple(csi, labels);
      },
      py::arg("spec"), py::arg("window") = 351, py::arg("stride") = 351,
      "Synthetic dataset cut into windows: (complex [N, F, T], labels [N]).");

  m.def(
      "amplitude", [](const CArray& csi) { return to_array(amplitude(window_from(csi))); }, py::arg("csi"),
      "|csi| as a [1, F, T] feature tensor.");
  m.def(
      "dfs",
      [](const CArray& csi, std::size_t segment_len, std::size_t bins, double sample_rate_hz) {
        DfsConfig cfg = DfsConfig::with_segment(segment_len, bins);
        cfg.sample_rate_hz = sample_rate_hz;
        return to_array(dfs_magnitude(stft_dfs(window_from(csi), cfg)));
      },
      py::arg("csi"), py::arg("segment_len") = 125, py::arg("bins") = 121, py::arg("sample_rate_hz") = 100.0,
      "Gaussian-window STFT magnitude as an [F, bins, T] feature tensor.");
  m.def(
      "subcarrier_indices",
      [](const std::string& spec, std::size_t F, std::uint64_t seed) {
        return subcarrier_indices(SubsamplingSpec::parse(spec, seed), F);
      },
      py::arg("spec"), py::arg("F"), py::arg("seed") = 0);

  py::class_<ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("in_channels", &ModelConfig::in_channels)
      .def_readwrite("in_freq", &ModelConfig::in_freq)
      .def_readwrite("seq_len", &ModelConfig::seq_len)
      .def_readwrite("d_model", &ModelConfig::d_model)
      .def_readwrite("encoder_layers", &ModelConfig::encoder_layers)
      .def_readwrite("heads", &ModelConfig::heads)
      .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
      .def_readwrite("classes", &ModelConfig::classes)
      .def_readwrite("gauss_count", &ModelConfig::gauss_count)
      .def_readwrite("dropout", &ModelConfig::dropout)
      .def("validate", &ModelConfig::validate);
  m.def("param_count", &param_count, py::arg("config"));

  py::class_<TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("epochs", &TrainConfig::epochs)
      .def_readwrite("lr", &TrainConfig::lr)
      .def_readwrite("weight_decay", &TrainConfig::weight_decay)
      .def_readwrite("batch_size", &TrainConfig::batch_size)
      .def_readwrite("seed", &TrainConfig::seed);

  py::class_<Checkpoint>(m, "Checkpoint")
      .def_readonly("config", &Checkpoint::config)
      .def_readonly("step", &Checkpoint::step)
      .def_property_readonly("param_names", [](const Checkpoint& c) {
        std::vector<std::string> names;
        for (const auto& e : c.params.entries()) names.push_back(e.name);
        return names;
      });
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  m.def(
      "train",
      [](const DArray& x_train, const std::vector<int>& y_train, const DArray& x_val,
         const std::vector<int>& y_val, std::size_t classes, const TrainConfig& cfg,
         std::optional<std::filesystem::path> checkpoint, int precision) {
        const auto tx = features_from(x_train), vx = features_from(x_val);
        if (tx.empty()) throw ValidationError("train: no training windows");
        const ModelConfig mcfg = configure_for(tx.front(), classes);
        TrainReport report;
        {
          py::gil_scoped_release release;
          report = precision == 64 ? train_features<double>(tx, y_train, vx, y_val, mcfg, cfg, checkpoint).report
                                   : train_features<float>(tx, y_train, vx, y_val, mcfg, cfg, checkpoint).report;
        }
        return to_python(report.to_json());
      },
      py::arg("x_train"), py::arg("y_train"), py::arg("x_val"), py::arg("y_val"), py::arg("classes") = 3,
      py::arg("config") = TrainConfig{}, py::arg("checkpoint") = py::none(), py::arg("precision") = 32,
      "Balanced-sampler AdamW training on [N, C, F, T] features; returns the report as a dict.");

  m.def(
      "predict",
      [](Checkpoint& ck, const DArray& x) {
        const Tensor<float> logits = predict(ck.params, ck.config, batch_from<float>(x));
        py::array_t<float> out({logits.dim(0), logits.dim(1)});
        std::copy(logits.values().begin(), logits.values().end(), out.mutable_data());
        return out;
      },
      py::arg("checkpoint"), py::arg("x"), "Eval-mode logits [B, classes].");

  m.def(
      "bench",
      [](Checkpoint& ck, std::size_t warmup, std::size_t iters, std::size_t batch) {
        BenchReport r;
        {
          py::gil_scoped_release release;
          r = bench_inference(ck.params, ck.config, warmup, iters, batch);
        }
        return to_python(r.to_json());
      },
      py::arg("checkpoint"), py::arg("warmup") = 100, py::arg("iters") = 1000, py::arg("batch") = 1,
      "Forward latency report as a dict.");
}
