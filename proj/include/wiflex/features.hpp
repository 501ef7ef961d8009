#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "wiflex/csi.hpp"

namespace wiflex {

enum class FeatureKind : std::uint8_t { amplitude = 0, dfs_magnitude = 1 };

/// Dense non-negative [C, F, T] block fed to the model.
struct FeatureTensor {
  FeatureKind kind = FeatureKind::amplitude;
  std::size_t channels = 0, freq = 0, time = 0;
  std::vector<double> data;  // row-major [C, F, T]

  double& at(std::size_t c, std::size_t f, std::size_t t) { return data[(c * freq + f) * time + t]; }
  double at(std::size_t c, std::size_t f, std::size_t t) const {
    return data[(c * freq + f) * time + t];
  }
  std::vector<std::size_t> shape() const { return {channels, freq, time}; }
};

/// out[0, f, t] = |csi[f, t]|
FeatureTensor amplitude(const CsiWindow& window);

/// X[k] = Σ_n x[n]·exp(-2πi·k·n/N), mixed-radix for composite N.
std::vector<cdouble> dft(std::span<const cdouble> x);

struct DfsConfig {
  std::size_t segment_len = 125;  // window and FFT length
  double gauss_sigma = 125.0 / 6.0;
  std::size_t band_bins = 121;    // centred bins kept around DC
  std::size_t hop = 1;
  double sample_rate_hz = 100.0;

  /// Segment length L with the default sigma L/6.
  static DfsConfig with_segment(std::size_t len, std::size_t bins);
  void validate() const;
  double bin_hz() const { return sample_rate_hz / double(segment_len); }
};

/// Complex [subcarriers, bins, frames] STFT output.
struct DfsSpectrum {
  std::size_t subcarriers = 0, bins = 0, frames = 0;
  std::vector<cdouble> data;

  const cdouble& at(std::size_t f, std::size_t b, std::size_t t) const {
    return data[(f * bins + b) * frames + t];
  }
};

/// Per-subcarrier Gaussian-windowed STFT over the reflect-padded series.
/// Bin b of the output is frequency (b - (bins-1)/2)·fs/L; with hop 1 the
/// frame count equals the window length.
DfsSpectrum stft_dfs(const CsiWindow& window, const DfsConfig& cfg);

/// Elementwise modulus as a [subcarriers, bins, frames] feature tensor.
FeatureTensor dfs_magnitude(const DfsSpectrum& spectrum);

/// Gaussian window w[j] = exp(-0.5·((j - (L-1)/2)/sigma)²).
std::vector<double> gaussian_window(std::size_t len, double sigma);

struct SubsamplingSpec {
  enum class Strategy { none, random, uniform, banded, pca };
  Strategy strategy = Strategy::none;
  std::size_t n = 0;  // R/U/B/PC count, step, or band count
  std::size_t m = 0;  // per-band picks for banded
  std::uint64_t seed = 0;

  /// Parses `none`, `R<n>`, `U<n>`, `B<n>-<m>` or `PC<n>`.
  static SubsamplingSpec parse(const std::string& text, std::uint64_t seed = 0);
  std::string to_string() const;
};

/// Fitted complex principal-component projection. Row k of `components`
/// is the conjugate of the k-th eigenvector, so y = components·(x - mean).
struct PcaModel {
  std::size_t subcarriers = 0;
  std::size_t count = 0;
  std::vector<cdouble> mean;        // [F]
  std::vector<cdouble> components;  // [count, F]
  std::vector<double> eigenvalues;  // non-increasing
};

/// Subcarrier indices an index-based strategy keeps for F subcarriers.
std::vector<std::size_t> subcarrier_indices(const SubsamplingSpec& spec, std::size_t F);

/// Sizes of n contiguous bands over F subcarriers, larger bands first.
std::vector<std::size_t> band_sizes(std::size_t F, std::size_t n);

CsiWindow select_subcarriers(const CsiWindow& window, const SubsamplingSpec& spec,
                             const PcaModel* pca = nullptr);

/// Top-n eigenpairs of the Hermitian packet covariance over every column of
/// the training windows. Each eigenvector's largest-modulus entry is made
/// real-positive.
PcaModel pca_fit(const std::vector<CsiWindow>& windows, std::size_t n);

CsiWindow pca_project(const CsiWindow& window, const PcaModel& model);

/// Inverse of pca_project when count equals the subcarrier count.
CsiWindow pca_reconstruct(const CsiWindow& projected, const PcaModel& model);

/// Feature file: kind u8, C u32, F u32, T u32, then f32 row-major data.
void save_feature_tensor(const FeatureTensor& t, const std::filesystem::path& path);
FeatureTensor load_feature_tensor(const std::filesystem::path& path);
inline constexpr std::size_t kFeatureHeaderSize = 1 + 4 + 4 + 4;

/// Feature extraction pipeline: sub-sampling then amplitude or |DFS|.
struct FeaturePipeline {
  FeatureKind kind = FeatureKind::amplitude;
  SubsamplingSpec subsampling;
  DfsConfig dfs;
  std::optional<PcaModel> pca;

  FeatureTensor operator()(const CsiWindow& window) const;
};

}  // namespace wiflex
