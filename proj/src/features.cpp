#include "wiflex/features.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>
#include <numeric>

#include "wiflex/binary_io.hpp"
#include "wiflex/error.hpp"
#include "wiflex/parallel.hpp"

namespace wiflex {

FeatureTensor amplitude(const CsiWindow& window) {
  FeatureTensor out;
  out.kind = FeatureKind::amplitude;
  out.channels = 1;
  out.freq = window.subcarriers;
  out.time = window.length;
  out.data.resize(window.csi.size());
  for (std::size_t i = 0; i < window.csi.size(); ++i) out.data[i] = std::abs(window.csi[i]);
  return out;
}

// ---------------------------------------------------------------------------
// DFT

namespace {

/// Recursive mixed-radix decimation in time. Radix-p butterflies are plain
/// p-point DFTs, so prime lengths degrade to the direct sum.
class DftPlan {
 public:
  explicit DftPlan(std::size_t n) : n_(n), twiddle_(n) {
    for (std::size_t j = 0; j < n; ++j)
      twiddle_[j] = std::polar(1.0, -2.0 * std::numbers::pi * double(j) / double(n));
    std::size_t rest = n;
    for (std::size_t p = 2; p * p <= rest; ++p)
      while (rest % p == 0) {
        factors_.push_back(p);
        rest /= p;
      }
    if (rest > 1) factors_.push_back(rest);
  }

  void run(const cdouble* in, cdouble* out) const {
    if (n_ == 1) {
      out[0] = in[0];
      return;
    }
    std::vector<cdouble> scratch(factors_.empty() ? 1 : *std::max_element(factors_.begin(), factors_.end()));
    rec(in, 1, out, n_, 0, scratch);
  }

 private:
  void rec(const cdouble* in, std::size_t stride, cdouble* out, std::size_t n, std::size_t fi,
           std::vector<cdouble>& scratch) const {
    if (n == 1) {
      out[0] = in[0];
      return;
    }
    const std::size_t p = factors_[fi];
    const std::size_t m = n / p;
    for (std::size_t q = 0; q < p; ++q) rec(in + q * stride, stride * p, out + q * m, m, fi + 1, scratch);
    const std::size_t step = n_ / n;  // twiddle index scale for an n-point sub-transform
    for (std::size_t k = 0; k < m; ++k) {
      for (std::size_t q = 0; q < p; ++q) scratch[q] = out[q * m + k];
      for (std::size_t r = 0; r < p; ++r) {
        const std::size_t bin = k + r * m;
        cdouble acc = scratch[0];
        for (std::size_t q = 1; q < p; ++q) acc += scratch[q] * twiddle_[(q * bin * step) % n_];
        out[bin] = acc;
      }
    }
  }

  std::size_t n_;
  std::vector<cdouble> twiddle_;
  std::vector<std::size_t> factors_;
};

const DftPlan& plan_for(std::size_t n) {
  thread_local std::map<std::size_t, DftPlan> cache;
  auto it = cache.find(n);
  if (it == cache.end()) it = cache.emplace(n, DftPlan(n)).first;
  return it->second;
}

// Index into [0, n) under reflection about both ends (edge samples not repeated).
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::ptrdiff_t period = 2 * std::ptrdiff_t(n - 1);
  std::ptrdiff_t r = i % period;
  if (r < 0) r += period;
  return std::size_t(r < std::ptrdiff_t(n) ? r : period - r);
}

}  // namespace

std::vector<cdouble> dft(std::span<const cdouble> x) {
  if (x.empty()) throw ValidationError("dft: input must be non-empty");
  std::vector<cdouble> out(x.size());
  plan_for(x.size()).run(x.data(), out.data());
  return out;
}

// ---------------------------------------------------------------------------
// STFT / DFS

DfsConfig DfsConfig::with_segment(std::size_t len, std::size_t bins) {
  DfsConfig c;
  c.segment_len = len;
  c.gauss_sigma = double(len) / 6.0;
  c.band_bins = bins;
  return c;
}

void DfsConfig::validate() const {
  if (segment_len < 1) throw ValidationError("dfs: segment_len must be >= 1");
  if (band_bins > segment_len)
    throw ValidationError("dfs: band_bins " + std::to_string(band_bins) + " exceeds segment_len " +
                          std::to_string(segment_len));
  if (band_bins % 2 == 0) throw ValidationError("dfs: band_bins must be odd");
  if (hop < 1) throw ValidationError("dfs: hop must be >= 1");
  if (!(gauss_sigma > 0.0)) throw ValidationError("dfs: gauss_sigma must be > 0");
  if (!(sample_rate_hz > 0.0)) throw ValidationError("dfs: sample_rate_hz must be > 0");
}

std::vector<double> gaussian_window(std::size_t len, double sigma) {
  std::vector<double> w(len);
  const double centre = (double(len) - 1.0) / 2.0;
  for (std::size_t j = 0; j < len; ++j) {
    const double z = (double(j) - centre) / sigma;
    w[j] = std::exp(-0.5 * z * z);
  }
  return w;
}

DfsSpectrum stft_dfs(const CsiWindow& window, const DfsConfig& cfg) {
  cfg.validate();
  if (window.length < 1) throw ValidationError("dfs: window must have T >= 1");
  const std::size_t L = cfg.segment_len, T = window.length, F = window.subcarriers;
  const std::size_t pad_left = (L - 1) / 2;
  const std::size_t frames = (T - 1) / cfg.hop + 1;
  const std::size_t half = L / 2;                    // DC sits at index `half` after rotation
  const std::size_t first = half - (cfg.band_bins - 1) / 2;
  const std::vector<double> w = gaussian_window(L, cfg.gauss_sigma);

  DfsSpectrum out;
  out.subcarriers = F;
  out.bins = cfg.band_bins;
  out.frames = frames;
  out.data.assign(F * cfg.band_bins * frames, cdouble{});
  parallel_for(F, [&](std::size_t f) {
    const DftPlan& plan = plan_for(L);
    std::vector<cdouble> seg(L), spec(L);
    for (std::size_t t = 0; t < frames; ++t) {
      const std::ptrdiff_t start = std::ptrdiff_t(t * cfg.hop) - std::ptrdiff_t(pad_left);
      for (std::size_t j = 0; j < L; ++j)
        seg[j] = window.at(f, reflect_index(start + std::ptrdiff_t(j), T)) * w[j];
      plan.run(seg.data(), spec.data());
      for (std::size_t b = 0; b < cfg.band_bins; ++b) {
        // rotated index r maps to DFT bin (r - half) mod L
        const std::size_t r = first + b;
        const std::size_t k = (r + L - half) % L;
        out.data[(f * cfg.band_bins + b) * frames + t] = spec[k];
      }
    }
  });
  return out;
}

FeatureTensor dfs_magnitude(const DfsSpectrum& s) {
  FeatureTensor out;
  out.kind = FeatureKind::dfs_magnitude;
  out.channels = s.subcarriers;
  out.freq = s.bins;
  out.time = s.frames;
  out.data.resize(s.data.size());
  for (std::size_t i = 0; i < s.data.size(); ++i) out.data[i] = std::abs(s.data[i]);
  return out;
}

// ---------------------------------------------------------------------------
// sub-sampling

SubsamplingSpec SubsamplingSpec::parse(const std::string& text, std::uint64_t seed) {
  SubsamplingSpec s;
  s.seed = seed;
  auto number = [&](const std::string& digits) -> std::size_t {
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit))
      throw ValidationError("subsample spec '" + text + "': expected a count");
    const std::size_t v = std::stoul(digits);
    if (v < 1) throw ValidationError("subsample spec '" + text + "': counts must be >= 1");
    return v;
  };
  std::string lower = text;
  std::transform(lower.begin(), lower.end(), lower.begin(), ::tolower);
  if (lower == "none") return s;
  if (text.rfind("PC", 0) == 0) {
    s.strategy = Strategy::pca;
    s.n = number(text.substr(2));
  } else if (text.rfind("R", 0) == 0) {
    s.strategy = Strategy::random;
    s.n = number(text.substr(1));
  } else if (text.rfind("U", 0) == 0) {
    s.strategy = Strategy::uniform;
    s.n = number(text.substr(1));
  } else if (text.rfind("B", 0) == 0) {
    const auto dash = text.find('-');
    if (dash == std::string::npos) throw ValidationError("subsample spec '" + text + "': expected B<n>-<m>");
    s.strategy = Strategy::banded;
    s.n = number(text.substr(1, dash - 1));
    s.m = number(text.substr(dash + 1));
  } else {
    throw ValidationError("subsample spec '" + text + "': expected none, R<n>, U<n>, B<n>-<m> or PC<n>");
  }
  return s;
}

std::string SubsamplingSpec::to_string() const {
  switch (strategy) {
    case Strategy::none: return "none";
    case Strategy::random: return "R" + std::to_string(n);
    case Strategy::uniform: return "U" + std::to_string(n);
    case Strategy::banded: return "B" + std::to_string(n) + "-" + std::to_string(m);
    case Strategy::pca: return "PC" + std::to_string(n);
  }
  return "none";
}

std::vector<std::size_t> band_sizes(std::size_t F, std::size_t n) {
  if (n < 1 || n > F)
    throw ValidationError("banded: " + std::to_string(n) + " bands over " + std::to_string(F) +
                          " subcarriers");
  std::vector<std::size_t> sizes(n, F / n);
  for (std::size_t i = 0; i < F % n; ++i) ++sizes[i];
  return sizes;
}

std::vector<std::size_t> subcarrier_indices(const SubsamplingSpec& spec, std::size_t F) {
  using S = SubsamplingSpec::Strategy;
  std::vector<std::size_t> idx;
  switch (spec.strategy) {
    case S::none:
      idx.resize(F);
      std::iota(idx.begin(), idx.end(), 0);
      break;
    case S::uniform:
      if (spec.n < 1) throw ValidationError("uniform: step must be >= 1");
      for (std::size_t i = 0; i < F; i += spec.n) idx.push_back(i);
      break;
    case S::random: {
      if (spec.n < 1 || spec.n > F)
        throw ValidationError("random: cannot draw " + std::to_string(spec.n) + " of " +
                              std::to_string(F) + " subcarriers");
      std::vector<std::size_t> all(F);
      std::iota(all.begin(), all.end(), 0);
      std::mt19937_64 gen(spec.seed);
      std::shuffle(all.begin(), all.end(), gen);
      idx.assign(all.begin(), all.begin() + std::ptrdiff_t(spec.n));
      std::sort(idx.begin(), idx.end());
      break;
    }
    case S::banded: {
      const std::vector<std::size_t> sizes = band_sizes(F, spec.n);
      if (spec.m < 1 || spec.m > F / spec.n)
        throw ValidationError("banded: " + std::to_string(spec.m) + " per band exceeds band size " +
                              std::to_string(F / spec.n));
      std::mt19937_64 gen(spec.seed);
      std::size_t start = 0;
      for (std::size_t sz : sizes) {
        std::vector<std::size_t> band(sz);
        std::iota(band.begin(), band.end(), start);
        std::shuffle(band.begin(), band.end(), gen);
        idx.insert(idx.end(), band.begin(), band.begin() + std::ptrdiff_t(spec.m));
        start += sz;
      }
      std::sort(idx.begin(), idx.end());
      break;
    }
    case S::pca:
      throw ValidationError("pca strategy selects projections, not indices");
  }
  return idx;
}

CsiWindow select_subcarriers(const CsiWindow& window, const SubsamplingSpec& spec,
                             const PcaModel* pca) {
  using S = SubsamplingSpec::Strategy;
  if (spec.strategy == S::none) return window;
  if (spec.strategy == S::pca) {
    if (!pca) throw ValidationError("pca sub-sampling requires a fitted PcaModel");
    if (pca->count != spec.n)
      throw ValidationError("pca sub-sampling: model has " + std::to_string(pca->count) +
                            " components, spec asks for " + std::to_string(spec.n));
    return pca_project(window, *pca);
  }
  const std::vector<std::size_t> idx = subcarrier_indices(spec, window.subcarriers);
  CsiWindow out = window;
  out.subcarriers = idx.size();
  out.csi.resize(idx.size() * window.length);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(window.csi.begin() + std::ptrdiff_t(idx[i] * window.length), window.length,
                out.csi.begin() + std::ptrdiff_t(i * window.length));
  return out;
}

// ---------------------------------------------------------------------------
// PCA

PcaModel pca_fit(const std::vector<CsiWindow>& windows, std::size_t n) {
  if (windows.empty()) throw ValidationError("pca_fit: no training windows");
  const std::size_t F = windows.front().subcarriers;
  if (n < 1 || n > F)
    throw ValidationError("pca_fit: component count " + std::to_string(n) + " must be in [1, " +
                          std::to_string(F) + "]");
  std::size_t total = 0;
  for (const CsiWindow& w : windows) {
    if (w.subcarriers != F) throw ValidationError("pca_fit: windows differ in subcarrier count");
    total += w.length;
  }
  if (total < F)
    throw ValidationError("pca_fit: need at least " + std::to_string(F) + " packets, have " +
                          std::to_string(total));

  Eigen::VectorXcd mean = Eigen::VectorXcd::Zero(Eigen::Index(F));
  for (const CsiWindow& w : windows)
    for (std::size_t f = 0; f < F; ++f)
      for (std::size_t t = 0; t < w.length; ++t) mean[Eigen::Index(f)] += w.at(f, t);
  mean /= double(total);

  Eigen::MatrixXcd cov = Eigen::MatrixXcd::Zero(Eigen::Index(F), Eigen::Index(F));
  Eigen::VectorXcd x(static_cast<Eigen::Index>(F));
  for (const CsiWindow& w : windows)
    for (std::size_t t = 0; t < w.length; ++t) {
      for (std::size_t f = 0; f < F; ++f) x[Eigen::Index(f)] = w.at(f, t) - mean[Eigen::Index(f)];
      cov.selfadjointView<Eigen::Lower>().rankUpdate(x, 1.0);
    }
  cov = cov.selfadjointView<Eigen::Lower>();
  cov /= double(total);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> solver(cov);
  if (solver.info() != Eigen::Success) throw NumericError("pca_fit: eigen-decomposition failed");

  PcaModel model;
  model.subcarriers = F;
  model.count = n;
  model.mean.assign(mean.data(), mean.data() + F);
  model.components.resize(n * F);
  for (std::size_t k = 0; k < n; ++k) {
    const Eigen::Index col = Eigen::Index(F - 1 - k);  // eigenvalues come ascending
    Eigen::VectorXcd u = solver.eigenvectors().col(col);
    Eigen::Index big = 0;
    for (Eigen::Index i = 1; i < u.size(); ++i)
      if (std::abs(u[i]) > std::abs(u[big])) big = i;
    u *= std::conj(u[big]) / std::abs(u[big]);
    for (std::size_t f = 0; f < F; ++f) model.components[k * F + f] = std::conj(u[Eigen::Index(f)]);
    model.eigenvalues.push_back(solver.eigenvalues()[col]);
  }
  return model;
}

CsiWindow pca_project(const CsiWindow& window, const PcaModel& model) {
  if (window.subcarriers != model.subcarriers)
    throw ValidationError("pca_project: window has " + std::to_string(window.subcarriers) +
                          " subcarriers, model expects " + std::to_string(model.subcarriers));
  const std::size_t F = model.subcarriers, n = model.count, T = window.length;
  CsiWindow out = window;
  out.subcarriers = n;
  out.csi.assign(n * T, cdouble{});
  for (std::size_t k = 0; k < n; ++k) {
    const cdouble* row = model.components.data() + k * F;
    for (std::size_t f = 0; f < F; ++f) {
      const cdouble c = row[f];
      const cdouble mu = model.mean[f];
      for (std::size_t t = 0; t < T; ++t) out.csi[k * T + t] += c * (window.at(f, t) - mu);
    }
  }
  return out;
}

CsiWindow pca_reconstruct(const CsiWindow& projected, const PcaModel& model) {
  if (projected.subcarriers != model.count)
    throw ValidationError("pca_reconstruct: component count mismatch");
  const std::size_t F = model.subcarriers, n = model.count, T = projected.length;
  CsiWindow out = projected;
  out.subcarriers = F;
  out.csi.assign(F * T, cdouble{});
  for (std::size_t f = 0; f < F; ++f)
    for (std::size_t t = 0; t < T; ++t) {
      cdouble acc = model.mean[f];
      for (std::size_t k = 0; k < n; ++k)
        acc += std::conj(model.components[k * F + f]) * projected.csi[k * T + t];
      out.csi[f * T + t] = acc;
    }
  return out;
}

// ---------------------------------------------------------------------------
// feature files and pipeline

void save_feature_tensor(const FeatureTensor& t, const std::filesystem::path& path) {
  io::ByteWriter w;
  w.put(std::uint8_t(t.kind));
  w.put(std::uint32_t(t.channels));
  w.put(std::uint32_t(t.freq));
  w.put(std::uint32_t(t.time));
  for (double v : t.data) w.put(float(v));
  io::write_file(path, w.bytes());
}

FeatureTensor load_feature_tensor(const std::filesystem::path& path) {
  io::ByteReader r(io::read_file(path));
  FeatureTensor t;
  const auto kind = r.get<std::uint8_t>();
  if (kind > 1) throw FormatError(path.string() + ": unknown feature kind " + std::to_string(kind));
  t.kind = FeatureKind(kind);
  t.channels = r.get<std::uint32_t>();
  t.freq = r.get<std::uint32_t>();
  t.time = r.get<std::uint32_t>();
  t.data.resize(t.channels * t.freq * t.time);
  for (double& v : t.data) v = r.get<float>();
  if (r.remaining() != 0) throw CorruptionError(path.string() + ": trailing bytes");
  return t;
}

FeatureTensor FeaturePipeline::operator()(const CsiWindow& window) const {
  const CsiWindow sub = select_subcarriers(window, subsampling, pca ? &*pca : nullptr);
  if (kind == FeatureKind::amplitude) return amplitude(sub);
  return dfs_magnitude(stft_dfs(sub, dfs));
}

}  // namespace wiflex
