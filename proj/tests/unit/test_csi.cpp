#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <set>

#include <unistd.h>

#include "doctest.h"
#include "wiflex/binary_io.hpp"
#include "wiflex/csi.hpp"
#include "wiflex/error.hpp"

using namespace wiflex;
namespace fs = std::filesystem;

namespace {

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("wiflex_test_" + std::to_string(::getpid()) + "_" + name);
}

CsiDataset random_dataset(std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::size_t> small(1, 6);
  std::normal_distribution<float> n(0.f, 2.f);
  CsiDataset d;
  d.subcarrier_count = small(gen);
  d.class_count = small(gen);
  d.sample_rate_hz = 100.0f + float(small(gen));
  const std::size_t seqs = small(gen) - 1;
  for (std::size_t s = 0; s < seqs; ++s) {
    CsiSequence seq;
    const std::size_t len = small(gen) * 3;
    for (std::size_t p = 0; p < len; ++p) {
      CsiPacket pk;
      pk.label = int(gen() % d.class_count);
      pk.timestamp = float(p) * 0.01f;
      for (std::size_t f = 0; f < d.subcarrier_count; ++f) pk.csi.emplace_back(n(gen), n(gen));
      seq.push_back(pk);
    }
    d.sequences.push_back(seq);
  }
  return d;
}

// One sequence whose packets carry their index in the first subcarrier.
CsiDataset indexed_dataset(std::vector<std::size_t> lengths, std::vector<std::vector<int>> labels = {}) {
  CsiDataset d;
  d.subcarrier_count = 2;
  d.class_count = 3;
  d.sample_rate_hz = 1000.0f;
  for (std::size_t s = 0; s < lengths.size(); ++s) {
    CsiSequence seq;
    for (std::size_t p = 0; p < lengths[s]; ++p) {
      CsiPacket pk;
      pk.csi = {cfloat(float(p) + 1.0f, float(s)), cfloat(1.0f, 0.0f)};
      pk.label = labels.empty() ? 0 : labels[s][p];
      pk.timestamp = float(p) / 1000.0f;
      seq.push_back(pk);
    }
    d.sequences.push_back(seq);
  }
  return d;
}

std::vector<CsiWindow> dummy_windows(std::size_t n) {
  std::vector<CsiWindow> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i].offset = i;
  return w;
}

}  // namespace

TEST_SUITE("csi") {

TEST_CASE("CSIB round trip is bit-identical") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const CsiDataset d = random_dataset(seed);
    const auto bytes = encode_dataset(d);
    const CsiDataset back = decode_dataset(bytes);
    CHECK(back == d);
    CHECK(encode_dataset(back) == bytes);
  }
  const fs::path p = temp_path("rt.csib");
  const CsiDataset d = random_dataset(99);
  save_dataset(d, p);
  CHECK(load_dataset(p) == d);
  const auto first = io::read_file(p);
  save_dataset(d, p);
  CHECK(io::read_file(p) == first);
  fs::remove(p);
}

TEST_CASE("CSIB header-only file size") {
  CsiDataset d;
  d.subcarrier_count = 52;
  d.class_count = 3;
  d.sample_rate_hz = 100.0f;
  CHECK(encode_dataset(d).size() == 4 + 2 + 2 + 2 + 4 + 4);
  CHECK(kCsibHeaderSize == 18);
  // Per packet: label u8 + timestamp f32 + F·8 bytes; per sequence: u32 count.
  CsiDataset one = indexed_dataset({5});
  CHECK(encode_dataset(one).size() == 18 + 4 + 5 * (1 + 4 + 2 * 8));
}

TEST_CASE("CSIB error cases") {
  auto bytes = encode_dataset(random_dataset(3));
  SUBCASE("bad magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(decode_dataset(bytes), FormatError);
  }
  SUBCASE("bad version") {
    bytes[4] = 9;
    CHECK_THROWS_AS(decode_dataset(bytes), FormatError);
  }
  SUBCASE("truncated payload") {
    auto d = indexed_dataset({4});
    auto b = encode_dataset(d);
    b.resize(b.size() - 3);
    CHECK_THROWS_AS(decode_dataset(b), CorruptionError);
  }
  SUBCASE("label out of range") {
    auto d = indexed_dataset({3});
    auto b = encode_dataset(d);
    b[18 + 4] = 7;  // first packet's label
    CHECK_THROWS_AS(decode_dataset(b), ValidationError);
  }
  SUBCASE("unwritable path") {
    CHECK_THROWS_AS(save_dataset(random_dataset(1), "/nonexistent-dir/x.csib"), IoError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_dataset("/nonexistent-dir/x.csib"), IoError);
  }
}

TEST_CASE("dataset validation") {
  CsiDataset d = indexed_dataset({3});
  CHECK_NOTHROW(d.validate());
  d.sequences[0][1].csi.pop_back();
  CHECK_THROWS_AS(d.validate(), ValidationError);
  d = indexed_dataset({3});
  d.sequences[0][2].timestamp = 0.0f;
  CHECK_THROWS_AS(d.validate(), ValidationError);
  d = indexed_dataset({3});
  d.sequences[0][0].label = 3;
  CHECK_THROWS_AS(d.validate(), ValidationError);
}

TEST_CASE("synthetic generation counts and determinism") {
  SynthSpec spec;
  spec.sequences_per_class = 5;
  spec.packets_per_sequence = 40;
  spec.seed = 7;
  const CsiDataset d = synth_generate(spec);
  CHECK(d.sequences.size() == 15);
  std::map<int, int> per_label;
  for (const auto& seq : d.sequences) {
    per_label[seq.front().label]++;
    for (const auto& p : seq) CHECK(p.label == seq.front().label);
  }
  CHECK(per_label == std::map<int, int>{{0, 5}, {1, 5}, {2, 5}});
  CHECK(synth_generate(spec) == d);
  spec.seed = 8;
  CHECK_FALSE(synth_generate(spec) == d);

  SynthSpec two;
  two.sequences_per_class = 1;
  two.classes = 2;
  two.class_doppler_hz = {4.0, 12.0};
  const CsiDataset saved = decode_dataset(encode_dataset(synth_generate(two)));
  CHECK(saved.packet_count() == 2000);
  CHECK(saved.subcarrier_count == 52);
}

TEST_CASE("synthetic spec validation") {
  SynthSpec s;
  s.class_doppler_hz = {4.0, 4.0, 12.0};
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s.class_doppler_hz = {4.0, 50.0, 12.0};
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s.class_doppler_hz = {4.0, 12.0};
  CHECK_THROWS_AS(s.validate(), ValidationError);
}

TEST_CASE("noise-free synthetic packets follow the tone formula") {
  SynthSpec spec;
  spec.subcarriers = 3;
  spec.classes = 2;
  spec.class_doppler_hz = {5.0, -10.0};
  spec.snr_db = std::numeric_limits<double>::infinity();
  spec.static_path_gain = 0.0;
  spec.sequences_per_class = 1;
  spec.packets_per_sequence = 50;
  const CsiDataset d = synth_generate(spec);
  for (std::size_t s = 0; s < 2; ++s) {
    const auto& seq = d.sequences[s];
    const double fk = spec.class_doppler_hz[std::size_t(seq[0].label)];
    for (std::size_t f = 0; f < 3; ++f) {
      const std::complex<double> c0(seq[0].csi[f]);
      CHECK(std::abs(c0) >= 0.5 - 1e-6);
      CHECK(std::abs(c0) <= 1.5 + 1e-6);
      for (std::size_t n = 1; n < 50; ++n) {
        const std::complex<double> expected =
            c0 * std::polar(1.0, 2 * M_PI * fk * double(n) / spec.sample_rate_hz);
        CHECK(std::abs(std::complex<double>(seq[n].csi[f]) - expected) < 1e-5);
      }
    }
  }
}

TEST_CASE("resample") {
  const CsiDataset d = indexed_dataset({7, 1000});
  CHECK(resample(d, 1) == d);
  const CsiDataset r = resample(d, 3);
  REQUIRE(r.sequences[0].size() == 3);
  CHECK(r.sequences[0][0].csi[0].real() == 1.0f);
  CHECK(r.sequences[0][1].csi[0].real() == 4.0f);
  CHECK(r.sequences[0][2].csi[0].real() == 7.0f);
  const CsiDataset ten = resample(d, 10);
  CHECK(ten.sequences[1].size() == 100);
  CHECK(ten.sample_rate_hz == 100.0f);
  CHECK_THROWS_AS(resample(d, 0), ValidationError);

  for (std::size_t a = 1; a <= 4; ++a)
    for (std::size_t b = 1; b <= 4; ++b) CHECK(resample(d, a * b) == resample(resample(d, a), b));
}

TEST_CASE("window extraction") {
  CHECK(extract_windows(indexed_dataset({351}), 351, 351, false).size() == 1);

  const auto w3 = extract_windows(indexed_dataset({1053}), 351, 351, false);
  REQUIRE(w3.size() == 3);
  CHECK(w3[0].offset == 0);
  CHECK(w3[1].offset == 351);
  CHECK(w3[2].offset == 702);

  const auto padded = extract_windows(indexed_dataset({300}), 369, 369, true);
  REQUIRE(padded.size() == 1);
  CHECK(padded[0].length == 369);
  for (std::size_t f = 0; f < 2; ++f) {
    for (std::size_t t = 0; t < 300; ++t) CHECK(padded[0].at(f, t) != cdouble(0, 0));
    for (std::size_t t = 300; t < 369; ++t) CHECK(padded[0].at(f, t) == cdouble(0, 0));
  }
  CHECK(extract_windows(indexed_dataset({300}), 369, 369, false).empty());

  CHECK_THROWS_AS(extract_windows(indexed_dataset({5}), 0, 1, false), ValidationError);
  CHECK_THROWS_AS(extract_windows(indexed_dataset({5}), 2, 0, false), ValidationError);
}

TEST_CASE("windows never span sequences and follow the labeling rule") {
  const auto d = indexed_dataset({10, 7, 12});
  const auto ws = extract_windows(d, 4, 3, true);
  for (const auto& w : ws) {
    // Imaginary part of subcarrier 0 is the source sequence id.
    for (std::size_t t = 0; t < w.length; ++t) CHECK(w.at(0, t).imag() == double(w.sequence));
    CHECK(w.at(0, 0).real() == double(w.offset) + 1.0);
  }
  CHECK(ws.size() == 3 + 2 + 3);

  const auto tie = indexed_dataset({4}, {{2, 1, 1, 2}});
  CHECK(extract_windows(tie, 4, 4, false)[0].label == 1);
  const auto maj = indexed_dataset({3}, {{2, 0, 2}});
  CHECK(extract_windows(maj, 3, 3, false)[0].label == 2);
}

TEST_CASE("split sizes and partitions") {
  CHECK(split_sizes(500, {3, 1, 1}) == std::vector<std::size_t>{300, 100, 100});
  CHECK(split_sizes(7, {3, 1, 1}) == std::vector<std::size_t>{5, 1, 1});

  auto input = dummy_windows(57);
  SplitSpec spec;
  spec.seed = 3;
  const auto parts = split_windows(input, spec);
  REQUIRE(parts.size() == 3);
  std::multiset<std::size_t> seen;
  for (const auto& part : parts)
    for (const auto& w : part) seen.insert(w.offset);
  CHECK(seen.size() == 57);
  CHECK(std::set<std::size_t>(seen.begin(), seen.end()).size() == 57);

  const auto again = split_windows(input, spec);
  for (std::size_t i = 0; i < 3; ++i) {
    REQUIRE(again[i].size() == parts[i].size());
    for (std::size_t j = 0; j < parts[i].size(); ++j) CHECK(again[i][j].offset == parts[i][j].offset);
  }
  spec.seed = 4;
  const auto other = split_windows(input, spec);
  bool differs = false;
  for (std::size_t j = 0; j < parts[0].size(); ++j) differs = differs || other[0][j].offset != parts[0][j].offset;
  CHECK(differs);

  SplitSpec single{{1.0}, 5};
  const auto whole = split_windows(input, single);
  REQUIRE(whole.size() == 1);
  CHECK(whole[0].size() == 57);

  CHECK_THROWS_AS(split_windows(dummy_windows(2), SplitSpec{}), ValidationError);
  CHECK_THROWS_AS(split_windows(input, SplitSpec{{1.0, -1.0}, 0}), ValidationError);
}

TEST_CASE("balanced sampler") {
  std::vector<int> labels;
  labels.insert(labels.end(), 900, 0);
  labels.insert(labels.end(), 50, 1);
  labels.insert(labels.end(), 50, 2);
  BalancedSampler sampler(labels, 3, 32, 11);
  CHECK(sampler.batches_per_epoch() == 32);  // ceil(1000 / 32)

  std::array<double, 3> counts{};
  std::size_t draws = 0;
  for (const auto& batch : sampler.epoch()) {
    CHECK(batch.size() == 32);
  }
  while (draws < 10'016) {
    for (std::size_t i : sampler.next_batch()) {
      counts[std::size_t(labels[i])] += 1;
      ++draws;
    }
  }
  double chi2 = 0;
  for (double c : counts) {
    CHECK(std::abs(c / double(draws) - 1.0 / 3) < 0.02);
    const double e = double(draws) / 3;
    chi2 += (c - e) * (c - e) / e;
  }
  CHECK(chi2 < 13.816);  // chi-square, 2 dof, p = 0.001

  BalancedSampler same(labels, 3, 32, 11);
  BalancedSampler same2(labels, 3, 32, 11);
  CHECK(same.epoch() == same2.epoch());

  BalancedSampler single(std::vector<int>(10, 0), 1, 4, 1);
  for (const auto& batch : single.epoch())
    for (std::size_t i : batch) CHECK(i < 10);

  CHECK_THROWS_AS(BalancedSampler({0, 0, 2}, 3, 4, 1), ValidationError);
}

}  // TEST_SUITE
