#include "wiflex/csi.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "wiflex/binary_io.hpp"
#include "wiflex/error.hpp"

namespace wiflex {

namespace {
constexpr char kCsibMagic[4] = {'C', 'S', 'I', 'B'};
constexpr std::uint16_t kCsibVersion = 1;
}  // namespace

void CsiDataset::validate() const {
  if (subcarrier_count == 0 || subcarrier_count > 0xFFFF)
    throw ValidationError("dataset: subcarrier count must be in [1, 65535]");
  if (class_count == 0 || class_count > 256)
    throw ValidationError("dataset: class count must be in [1, 256]");
  if (!(sample_rate_hz > 0.0f) || !std::isfinite(sample_rate_hz))
    throw ValidationError("dataset: sample rate must be positive");
  if (!class_names.empty() && class_names.size() != class_count)
    throw ValidationError("dataset: class_names must list every class");
  for (std::size_t s = 0; s < sequences.size(); ++s) {
    const CsiSequence& seq = sequences[s];
    for (std::size_t i = 0; i < seq.size(); ++i) {
      const CsiPacket& p = seq[i];
      const std::string where = "sequence " + std::to_string(s) + " packet " + std::to_string(i);
      if (p.csi.size() != subcarrier_count)
        throw ValidationError(where + ": csi length " + std::to_string(p.csi.size()) +
                              " != subcarrier count " + std::to_string(subcarrier_count));
      if (p.label < 0 || std::size_t(p.label) >= class_count)
        throw ValidationError(where + ": label " + std::to_string(p.label) + " out of range");
      if (!(p.timestamp >= 0.0f)) throw ValidationError(where + ": negative timestamp");
      if (i > 0 && p.timestamp < seq[i - 1].timestamp)
        throw ValidationError(where + ": timestamps not non-decreasing");
    }
  }
}

std::size_t CsiDataset::packet_count() const {
  std::size_t n = 0;
  for (const auto& s : sequences) n += s.size();
  return n;
}

// ---------------------------------------------------------------------------
// CSIB

std::vector<unsigned char> encode_dataset(const CsiDataset& d) {
  d.validate();
  io::ByteWriter w;
  w.put_bytes(kCsibMagic, 4);
  w.put(kCsibVersion);
  w.put(std::uint16_t(d.subcarrier_count));
  w.put(std::uint16_t(d.class_count));
  w.put(d.sample_rate_hz);
  w.put(std::uint32_t(d.sequences.size()));
  for (const CsiSequence& seq : d.sequences) {
    w.put(std::uint32_t(seq.size()));
    for (const CsiPacket& p : seq) {
      w.put(std::uint8_t(p.label));
      w.put(p.timestamp);
      for (const cfloat& c : p.csi) {
        w.put(c.real());
        w.put(c.imag());
      }
    }
  }
  return w.bytes();
}

CsiDataset decode_dataset(std::vector<unsigned char> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.remaining() < 4 || r.get_string(4) != std::string(kCsibMagic, 4))
    throw FormatError("not a CSIB file (bad magic)");
  if (const auto v = r.get<std::uint16_t>(); v != kCsibVersion)
    throw FormatError("unsupported CSIB version " + std::to_string(v));
  CsiDataset d;
  d.subcarrier_count = r.get<std::uint16_t>();
  d.class_count = r.get<std::uint16_t>();
  d.sample_rate_hz = r.get<float>();
  const auto nseq = r.get<std::uint32_t>();
  const std::size_t record = 1 + 4 + 8 * d.subcarrier_count;
  for (std::uint32_t s = 0; s < nseq; ++s) {
    const auto npk = r.get<std::uint32_t>();
    if (std::size_t(npk) * record > r.remaining())
      throw CorruptionError("truncated payload in sequence " + std::to_string(s));
    CsiSequence seq(npk);
    for (CsiPacket& p : seq) {
      p.label = r.get<std::uint8_t>();
      p.timestamp = r.get<float>();
      p.csi.resize(d.subcarrier_count);
      for (cfloat& c : p.csi) {
        const float re = r.get<float>();
        const float im = r.get<float>();
        c = {re, im};
      }
    }
    d.sequences.push_back(std::move(seq));
  }
  if (r.remaining() != 0) throw CorruptionError("trailing bytes after last sequence");
  d.validate();
  return d;
}

CsiDataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path));
}

void save_dataset(const CsiDataset& dataset, const std::filesystem::path& path) {
  io::write_file(path, encode_dataset(dataset));
}

// ---------------------------------------------------------------------------
// resampling and windows

CsiDataset resample(const CsiDataset& dataset, std::size_t factor) {
  if (factor < 1) throw ValidationError("resample: factor must be >= 1");
  CsiDataset out = dataset;
  out.sample_rate_hz = dataset.sample_rate_hz / float(factor);
  for (CsiSequence& seq : out.sequences) {
    CsiSequence kept;
    kept.reserve(seq.size() / factor + 1);
    for (std::size_t i = 0; i < seq.size(); i += factor) kept.push_back(std::move(seq[i]));
    seq = std::move(kept);
  }
  return out;
}

namespace {

CsiWindow cut_window(const CsiDataset& d, std::size_t s, std::size_t offset, std::size_t len) {
  const CsiSequence& seq = d.sequences[s];
  const std::size_t F = d.subcarrier_count;
  CsiWindow w;
  w.subcarriers = F;
  w.length = len;
  w.sequence = s;
  w.offset = offset;
  w.csi.assign(F * len, cdouble{});
  std::vector<std::size_t> votes(d.class_count, 0);
  const std::size_t avail = std::min(len, seq.size() - offset);
  for (std::size_t t = 0; t < avail; ++t) {
    const CsiPacket& p = seq[offset + t];
    ++votes[std::size_t(p.label)];
    for (std::size_t f = 0; f < F; ++f) w.at(f, t) = cdouble(p.csi[f]);
  }
  // max_element returns the first maximum, i.e. the lowest class index.
  w.label = int(std::max_element(votes.begin(), votes.end()) - votes.begin());
  return w;
}

}  // namespace

std::vector<CsiWindow> extract_windows(const CsiDataset& dataset, std::size_t window_len,
                                       std::size_t stride, bool pad_short) {
  if (window_len < 1) throw ValidationError("extract_windows: window_len must be >= 1");
  if (stride < 1) throw ValidationError("extract_windows: stride must be >= 1");
  std::vector<CsiWindow> out;
  for (std::size_t s = 0; s < dataset.sequences.size(); ++s) {
    const std::size_t n = dataset.sequences[s].size();
    if (n >= window_len) {
      for (std::size_t off = 0; off + window_len <= n; off += stride)
        out.push_back(cut_window(dataset, s, off, window_len));
    } else if (pad_short && n > 0) {
      out.push_back(cut_window(dataset, s, 0, window_len));
    }
  }
  return out;
}

std::vector<std::size_t> split_sizes(std::size_t n, const std::vector<double>& ratios) {
  if (ratios.empty()) throw ValidationError("split: at least one ratio required");
  double total = 0.0;
  for (double r : ratios) {
    if (!(r > 0.0) || !std::isfinite(r)) throw ValidationError("split: ratios must be positive");
    total += r;
  }
  if (n < ratios.size()) {
    throw ValidationError("split: " + std::to_string(n) + " windows cannot fill " +
                          std::to_string(ratios.size()) + " parts");
  }
  std::vector<std::size_t> sizes;
  std::size_t used = 0;
  for (double r : ratios) {
    sizes.push_back(std::size_t(std::floor(double(n) * r / total)));
    used += sizes.back();
  }
  sizes.front() += n - used;
  return sizes;
}

std::vector<std::vector<CsiWindow>> split_windows(const std::vector<CsiWindow>& windows,
                                                  const SplitSpec& spec) {
  const std::vector<std::size_t> sizes = split_sizes(windows.size(), spec.ratios);
  std::vector<std::size_t> order(windows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 gen(spec.seed);
  std::shuffle(order.begin(), order.end(), gen);
  std::vector<std::vector<CsiWindow>> parts;
  std::size_t pos = 0;
  for (std::size_t sz : sizes) {
    std::vector<CsiWindow> part;
    part.reserve(sz);
    for (std::size_t i = 0; i < sz; ++i) part.push_back(windows[order[pos++]]);
    parts.push_back(std::move(part));
  }
  return parts;
}

// ---------------------------------------------------------------------------
// synthetic data

void SynthSpec::validate() const {
  if (subcarriers < 1 || subcarriers > 0xFFFF)
    throw ValidationError("synth: subcarriers must be in [1, 65535]");
  if (classes < 1 || classes > 256) throw ValidationError("synth: classes must be in [1, 256]");
  if (!(sample_rate_hz > 0.0)) throw ValidationError("synth: sample_rate_hz must be positive");
  if (class_doppler_hz.size() != classes)
    throw ValidationError("synth: class_doppler_hz needs one tone per class");
  const double nyquist = sample_rate_hz / 2.0;
  std::set<double> seen;
  for (double f : class_doppler_hz) {
    if (!(std::abs(f) < nyquist))
      throw ValidationError("synth: tone " + std::to_string(f) + " Hz is not below Nyquist");
    if (!seen.insert(f).second) throw ValidationError("synth: tones must be pairwise distinct");
  }
  if (std::isnan(snr_db)) throw ValidationError("synth: snr_db is NaN");
  if (packets_per_sequence < 1) throw ValidationError("synth: packets_per_sequence must be >= 1");
  if (sequences_per_class < 1) throw ValidationError("synth: sequences_per_class must be >= 1");
  if (!(static_path_gain >= 0.0)) throw ValidationError("synth: static_path_gain must be >= 0");
}

CsiDataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  constexpr double two_pi = 2.0 * std::numbers::pi;
  std::mt19937_64 gen(spec.seed);
  std::uniform_real_distribution<double> amp(0.5, 1.5);
  std::uniform_real_distribution<double> phase(0.0, two_pi);
  std::normal_distribution<double> normal(0.0, 1.0);
  const bool noisy = std::isfinite(spec.snr_db);

  CsiDataset d;
  d.subcarrier_count = spec.subcarriers;
  d.class_count = spec.classes;
  d.sample_rate_hz = float(spec.sample_rate_hz);
  const std::size_t F = spec.subcarriers;
  for (std::size_t k = 0; k < spec.classes; ++k) {
    const double tone = spec.class_doppler_hz[k];
    for (std::size_t s = 0; s < spec.sequences_per_class; ++s) {
      std::vector<double> a(F), phi(F), psi(F);
      double power = 0.0;
      for (std::size_t f = 0; f < F; ++f) {
        a[f] = amp(gen);
        phi[f] = phase(gen);
        psi[f] = phase(gen);
        power += a[f] * a[f];
      }
      power /= double(F);
      const double noise_std = noisy ? std::sqrt(power / std::pow(10.0, spec.snr_db / 10.0) / 2.0) : 0.0;

      CsiSequence seq(spec.packets_per_sequence);
      for (std::size_t n = 0; n < seq.size(); ++n) {
        CsiPacket& p = seq[n];
        p.label = int(k);
        p.timestamp = float(double(n) / spec.sample_rate_hz);
        p.csi.resize(F);
        const double theta = two_pi * tone * double(n) / spec.sample_rate_hz;
        for (std::size_t f = 0; f < F; ++f) {
          cdouble v = a[f] * std::polar(1.0, theta + phi[f]);
          if (spec.static_path_gain > 0.0) v += std::polar(spec.static_path_gain, psi[f]);
          if (noisy) v += cdouble(noise_std * normal(gen), noise_std * normal(gen));
          p.csi[f] = cfloat(v);
        }
      }
      d.sequences.push_back(std::move(seq));
    }
  }
  return d;
}

// ---------------------------------------------------------------------------
// sampler

BalancedSampler::BalancedSampler(const std::vector<int>& labels, std::size_t class_count,
                                 std::size_t batch_size, std::uint64_t seed)
    : by_class_(class_count), batch_size_(batch_size), gen_(seed) {
  if (batch_size < 1) throw ValidationError("sampler: batch_size must be >= 1");
  if (class_count < 1) throw ValidationError("sampler: class_count must be >= 1");
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || std::size_t(labels[i]) >= class_count)
      throw ValidationError("sampler: label " + std::to_string(labels[i]) + " out of range");
    by_class_[std::size_t(labels[i])].push_back(i);
  }
  for (std::size_t c = 0; c < class_count; ++c)
    if (by_class_[c].empty())
      throw ValidationError("sampler: class " + std::to_string(c) + " has no windows");
  batches_per_epoch_ = (labels.size() + batch_size - 1) / batch_size;
}

std::vector<std::size_t> BalancedSampler::next_batch() {
  std::vector<std::size_t> batch(batch_size_);
  for (std::size_t& idx : batch) {
    const std::size_t c = std::uniform_int_distribution<std::size_t>(0, by_class_.size() - 1)(gen_);
    const auto& members = by_class_[c];
    idx = members[std::uniform_int_distribution<std::size_t>(0, members.size() - 1)(gen_)];
  }
  return batch;
}

std::vector<std::vector<std::size_t>> BalancedSampler::epoch() {
  std::vector<std::vector<std::size_t>> out;
  out.reserve(batches_per_epoch_);
  for (std::size_t b = 0; b < batches_per_epoch_; ++b) out.push_back(next_batch());
  return out;
}

}  // namespace wiflex
