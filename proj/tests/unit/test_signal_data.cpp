#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "bpq/byte_io.hpp"
#include "bpq/errors.hpp"
#include "bpq/signal_data.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bpq;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "bpq_unit";
  fs::create_directories(dir);
  return dir / name;
}

// Mean R-peak to PPG systolic-peak lag in seconds: R-peaks are local maxima
// of the ECG above 3 SD, the systolic peak is the PPG maximum 0.2-0.5 s later.
double detect_lag(const SignalSegment& s) {
  const int n = static_cast<int>(s.ecg.size());
  double total = 0;
  int count = 0;
  for (int i = 1; i + 1 < n; ++i) {
    if (s.ecg[i] < 3.0F || s.ecg[i] < s.ecg[i - 1] || s.ecg[i] < s.ecg[i + 1]) continue;
    const int lo = i + 25, hi = i + 63;
    if (hi >= n) break;
    int best = lo;
    for (int j = lo; j <= hi; ++j)
      if (s.ppg[j] > s.ppg[best]) best = j;
    total += (best - i) / 125.0;
    ++count;
  }
  return count > 0 ? total / count : NAN;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
  const double ma = oracle::mean(a), mb = oracle::mean(b);
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST_CASE("synthetic segments satisfy every invariant") {
  std::vector<SyntheticLatents> lat;
  const auto ds = generate_synthetic(100, 7, &lat);
  REQUIRE(ds.size() == 100);
  CHECK(ds.source_tag == "synthetic");
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.segments[i];
    CHECK_NOTHROW(validate_segment(s));
    CHECK(s.sbp > s.dbp + 10.0F);
    CHECK(lat[i].heart_rate_bpm >= 50.0);
    CHECK(lat[i].heart_rate_bpm <= 110.0);
    CHECK(lat[i].transit_delay_s >= 0.15);
    CHECK(lat[i].transit_delay_s <= 0.35);
    CHECK(lat[i].pulse_amplitude >= 0.8);
    CHECK(lat[i].pulse_amplitude <= 1.2);
    // z-scored channels
    for (const auto* ch : {&s.ecg, &s.ppg}) {
      std::vector<double> v(ch->begin(), ch->end());
      CHECK(std::fabs(oracle::mean(v)) < 1e-4);
      CHECK(oracle::sd(v) == doctest::Approx(1.0).epsilon(1e-4));
    }
  }
}

TEST_CASE("generation is deterministic and seed-sensitive") {
  CHECK(generate_synthetic(20, 7) == generate_synthetic(20, 7));
  CHECK_FALSE(generate_synthetic(20, 7) == generate_synthetic(20, 8));
  // Segment i depends only on (seed, i): prefixes agree.
  const auto a = generate_synthetic(5, 9), b = generate_synthetic(12, 9);
  for (std::size_t i = 0; i < 5; ++i) CHECK(a.segments[i] == b.segments[i]);
  CHECK_THROWS_AS(generate_synthetic(0, 1), EmptyDatasetError);
}

TEST_CASE("transit delay recovered from waveforms tracks SBP") {
  const auto ds = generate_synthetic(1000, 3);
  std::vector<double> lag, sbp;
  for (const auto& s : ds.segments) {
    const double l = detect_lag(s);
    REQUIRE(std::isfinite(l));
    lag.push_back(l);
    sbp.push_back(s.sbp);
  }
  const double r = pearson(lag, sbp);
  CHECK(r <= -0.9);
  // Simple linear regression on the recovered delay alone.
  CHECK(r * r >= 0.85);
}

TEST_CASE("split sizes follow the floor rule and partition the data") {
  const auto ds = generate_synthetic(100, 1);
  const auto s = split(ds, SplitSpec{});
  CHECK(s.train.size() == 80);
  CHECK(s.val.size() == 10);
  CHECK(s.test.size() == 10);
  const auto small = split(generate_synthetic(10, 1), SplitSpec{});
  CHECK(small.train.size() == 8);
  CHECK(small.val.size() == 1);
  CHECK(small.test.size() == 1);

  std::set<float> seen;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (const auto& seg : part->segments) seen.insert(seg.ecg[17] + 1000.0F * seg.sbp);
  CHECK(seen.size() == 100);

  const auto again = split(ds, SplitSpec{});
  CHECK(again.train == s.train);
  CHECK(again.test == s.test);
  SplitSpec other;
  other.seed = 99;
  CHECK_FALSE(split(ds, other).train == s.train);
}

TEST_CASE("split rejects bad fractions and empty input") {
  const auto ds = generate_synthetic(10, 1);
  SplitSpec bad{0.8, 0.1, 0.2, 1};
  CHECK_THROWS_AS(split(ds, bad), ConfigError);
  SplitSpec zero{1.0, 0.0, 0.0, 1};
  CHECK_THROWS_AS(split(ds, zero), ConfigError);
  CHECK_THROWS_AS(split(SegmentDataset{}, SplitSpec{}), EmptyDatasetError);
}

TEST_CASE("container round trip and exact size") {
  const auto ds = generate_synthetic(7, 5);
  const fs::path p = temp_file("rt.bpseg");
  const auto bytes = write_container(ds, p);
  CHECK(bytes == container_size(7));
  CHECK(fs::file_size(p) == 16 + 7 * 10008);
  CHECK(read_container(p) == ds);
  const auto enc = encode_container(ds);
  CHECK(std::memcmp(enc.data(), "BPSEG1", 6) == 0);
  CHECK(enc[6] == 1);
  CHECK(enc[7] == 0);
  CHECK(enc[8] == 7);
  CHECK(decode_container(enc) == ds);
}

TEST_CASE("container parse errors are named") {
  const auto enc = encode_container(generate_synthetic(5, 2));
  auto expect_kind = [](const std::vector<std::uint8_t>& bytes, ParseErrorKind kind) {
    try {
      decode_container(bytes);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.kind() == kind);
    }
  };
  auto magic = enc;
  std::memcpy(magic.data(), "XXXXXX", 6);
  expect_kind(magic, ParseErrorKind::kBadMagic);

  auto version = enc;
  version[6] = 2;
  expect_kind(version, ParseErrorKind::kBadVersion);

  auto truncated = enc;
  truncated.resize(16 + 4 * 10008);  // header says 5
  expect_kind(truncated, ParseErrorKind::kTruncated);

  auto nonfinite = enc;
  const float nan = NAN;
  std::memcpy(nonfinite.data() + 16 + 40, &nan, 4);
  expect_kind(nonfinite, ParseErrorKind::kNonFinite);

  auto labels = enc;
  const float low = 50.0F;  // sbp below dbp
  std::memcpy(labels.data() + 16 + 2 * 1250 * 4, &low, 4);
  expect_kind(labels, ParseErrorKind::kInvalidLabels);

  CHECK_THROWS_AS(read_container(temp_file("does_not_exist.bpseg")), ParseError);
}

TEST_CASE("file fingerprint is content-based") {
  const fs::path a = temp_file("fa.bpseg"), b = temp_file("fb.bpseg");
  write_container(generate_synthetic(3, 1), a);
  write_container(generate_synthetic(3, 1), b);
  CHECK(file_fingerprint(a) == file_fingerprint(b));
  write_container(generate_synthetic(3, 2), b);
  CHECK(file_fingerprint(a) != file_fingerprint(b));
}
