#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <random>
#include <string>
#include <vector>

namespace wiflex {

using cfloat = std::complex<float>;
using cdouble = std::complex<double>;

struct CsiPacket {
  std::vector<cfloat> csi;  // one entry per subcarrier
  int label = 0;
  float timestamp = 0.0f;   // seconds since sequence start

  friend bool operator==(const CsiPacket&, const CsiPacket&) = default;
};

using CsiSequence = std::vector<CsiPacket>;

struct CsiDataset {
  std::size_t subcarrier_count = 0;
  std::size_t class_count = 0;
  float sample_rate_hz = 0.0f;
  std::vector<CsiSequence> sequences;
  std::vector<std::string> class_names;  // optional; not stored in CSIB

  /// Throws ValidationError when any dataset invariant is broken.
  void validate() const;
  std::size_t packet_count() const;

  friend bool operator==(const CsiDataset&, const CsiDataset&) = default;
};

/// A [F, T] complex block cut from one sequence, row-major by subcarrier.
struct CsiWindow {
  std::size_t subcarriers = 0;
  std::size_t length = 0;
  std::vector<cdouble> csi;  // csi[f * length + t]
  int label = 0;
  std::size_t sequence = 0;
  std::size_t offset = 0;

  cdouble& at(std::size_t f, std::size_t t) { return csi[f * length + t]; }
  const cdouble& at(std::size_t f, std::size_t t) const { return csi[f * length + t]; }
};

struct SplitSpec {
  std::vector<double> ratios{3.0, 1.0, 1.0};
  std::uint64_t seed = 0;
};

struct SynthSpec {
  std::size_t subcarriers = 52;
  std::size_t classes = 3;
  double sample_rate_hz = 100.0;
  std::vector<double> class_doppler_hz{4.0, 12.0, 24.0};
  double snr_db = 20.0;  // +inf disables noise
  std::size_t packets_per_sequence = 1000;
  std::size_t sequences_per_class = 5;
  std::uint64_t seed = 0;
  // Magnitude of a static (non-moving) path added to every subcarrier. It
  // makes the Doppler tone visible in the amplitude; 0 gives a pure tone.
  double static_path_gain = 1.0;

  void validate() const;
};

/// CSIB reader/writer. Little-endian, fields packed without padding.
CsiDataset load_dataset(const std::filesystem::path& path);
void save_dataset(const CsiDataset& dataset, const std::filesystem::path& path);
std::vector<unsigned char> encode_dataset(const CsiDataset& dataset);
CsiDataset decode_dataset(std::vector<unsigned char> bytes);

/// Size of a CSIB file holding zero sequences.
inline constexpr std::size_t kCsibHeaderSize = 4 + 2 + 2 + 2 + 4 + 4;

/// Keeps packets 0, factor, 2·factor, … of each sequence.
CsiDataset resample(const CsiDataset& dataset, std::size_t factor);

/// Non-spanning windows at offsets 0, stride, … per sequence. A sequence
/// shorter than window_len yields one end-zero-padded window if pad_short.
/// Labels are the majority over covered packets, ties to the lower class.
std::vector<CsiWindow> extract_windows(const CsiDataset& dataset, std::size_t window_len,
                                       std::size_t stride, bool pad_short);

/// Seeded shuffle, then contiguous parts sized floor(N·r/Σr) with the
/// remainder added to the first part.
std::vector<std::vector<CsiWindow>> split_windows(const std::vector<CsiWindow>& windows,
                                                  const SplitSpec& spec);

/// Part sizes split_windows would produce for n windows.
std::vector<std::size_t> split_sizes(std::size_t n, const std::vector<double>& ratios);

/// Per-class Doppler tone plus static path and complex Gaussian noise.
CsiDataset synth_generate(const SynthSpec& spec);

/// Class-balanced sampling with replacement: each draw picks a class
/// uniformly, then a window uniformly within it. Windows of a class are
/// addressed in their input order.
class BalancedSampler {
 public:
  BalancedSampler(const std::vector<int>& labels, std::size_t class_count, std::size_t batch_size,
                  std::uint64_t seed);

  /// One epoch: ceil(N / batch_size) batches of exactly batch_size indices.
  std::vector<std::vector<std::size_t>> epoch();
  std::vector<std::size_t> next_batch();
  std::size_t batches_per_epoch() const { return batches_per_epoch_; }

 private:
  std::vector<std::vector<std::size_t>> by_class_;
  std::size_t batch_size_;
  std::size_t batches_per_epoch_;
  std::mt19937_64 gen_;
};

}  // namespace wiflex
