#include "bpq/signal_data.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "bpq/byte_io.hpp"
#include "bpq/errors.hpp"
#include "bpq/random.hpp"

namespace bpq {
namespace {

constexpr char kMagic[] = "BPSEG1";
constexpr std::uint8_t kVersion = 1;

// Waveform shape constants (seconds).
constexpr double kRPeakWidth = 0.012;
constexpr double kSystolicOffset = 0.10;  // systolic peak after pulse onset
constexpr double kSystolicWidth = 0.04;
constexpr double kDicroticOffset = 0.35;
constexpr double kDicroticWidth = 0.06;
constexpr double kDicroticRatio = 0.35;
constexpr double kNoiseSd = 0.05;

void zscore(std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0.0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  for (double& v : x) v = sd > 0.0 ? (v - mean) / sd : 0.0;
}

double gaussian(double t, double center, double width) {
  const double u = (t - center) / width;
  return std::exp(-0.5 * u * u);
}

SignalSegment synthesize(std::uint64_t seed, SyntheticLatents& lat) {
  Rng rng(seed);
  lat.heart_rate_bpm = rng.uniform(50.0, 110.0);
  lat.transit_delay_s = rng.uniform(0.15, 0.35);
  lat.pulse_amplitude = rng.uniform(0.8, 1.2);
  const double period = 60.0 / lat.heart_rate_bpm;
  lat.first_beat_s = rng.uniform(0.0, period);

  SignalSegment seg;
  double sbp = 0.0;
  do {
    sbp = 180.0 - 250.0 * lat.transit_delay_s + 10.0 * (lat.pulse_amplitude - 1.0) + rng.normal(0.0, 2.0);
  } while (sbp < 60.0 || sbp > 250.0);
  double dbp = 0.0;
  do {
    dbp = 0.55 * sbp + 10.0 + rng.normal(0.0, 1.5);
  } while (!(sbp > dbp + 10.0) || dbp < 30.0 || dbp > 150.0);
  seg.sbp = static_cast<float>(sbp);
  seg.dbp = static_cast<float>(dbp);

  // Beats start two periods before the window so pulses that began earlier
  // still contribute their tails.
  std::vector<double> beats;
  for (double t = lat.first_beat_s - 2.0 * period; t < 10.0 + period; t += period) beats.push_back(t);

  std::vector<double> ecg(kSegmentSamples), ppg(kSegmentSamples);
  const double a = lat.pulse_amplitude;
  for (std::size_t n = 0; n < kSegmentSamples; ++n) {
    const double t = static_cast<double>(n) / kSampleRateHz;
    double e = 0.0, p = 0.0;
    for (double tb : beats) {
      // Both pulse shapes are negligible (< 1e-12) outside these windows.
      if (std::abs(t - tb) < 0.1) e += gaussian(t, tb, kRPeakWidth);
      const double onset = tb + lat.transit_delay_s;
      if (t < onset - 0.4 || t > onset + 1.0) continue;
      p += a * (gaussian(t, onset + kSystolicOffset, kSystolicWidth) +
                kDicroticRatio * gaussian(t, onset + kDicroticOffset, kDicroticWidth));
    }
    ecg[n] = e;
    ppg[n] = p;
  }
  for (auto& v : ecg) v += rng.normal(0.0, kNoiseSd);
  for (auto& v : ppg) v += rng.normal(0.0, kNoiseSd);
  zscore(ecg);
  zscore(ppg);
  seg.ecg.assign(ecg.begin(), ecg.end());
  seg.ppg.assign(ppg.begin(), ppg.end());
  return seg;
}

}  // namespace

void validate_segment(const SignalSegment& s) {
  if (s.ecg.size() != kSegmentSamples || s.ppg.size() != kSegmentSamples) {
    throw ShapeError("segment channels must hold " + std::to_string(kSegmentSamples) + " samples");
  }
  for (const auto* ch : {&s.ecg, &s.ppg})
    for (float v : *ch)
      if (!std::isfinite(v)) throw ParseError(ParseErrorKind::kNonFinite, "segment sample is not finite");
  if (!std::isfinite(s.sbp) || !std::isfinite(s.dbp)) {
    throw ParseError(ParseErrorKind::kNonFinite, "label is not finite");
  }
  if (!(s.sbp > s.dbp)) throw ParseError(ParseErrorKind::kInvalidLabels, "sbp must exceed dbp");
  if (s.sbp < 60.0F || s.sbp > 250.0F) throw ParseError(ParseErrorKind::kInvalidLabels, "sbp outside [60, 250]");
  if (s.dbp < 30.0F || s.dbp > 150.0F) throw ParseError(ParseErrorKind::kInvalidLabels, "dbp outside [30, 150]");
}

SegmentDataset generate_synthetic(std::size_t n, std::uint64_t seed, std::vector<SyntheticLatents>* latents) {
  if (n == 0) throw EmptyDatasetError("generate_synthetic: n must be at least 1");
  SegmentDataset ds;
  ds.source_tag = "synthetic";
  ds.segments.reserve(n);
  if (latents != nullptr) latents->assign(n, {});
  for (std::size_t i = 0; i < n; ++i) {
    SyntheticLatents lat;
    ds.segments.push_back(synthesize(mix_seed(seed, i), lat));
    if (latents != nullptr) (*latents)[i] = lat;
  }
  return ds;
}

DatasetSplit split(const SegmentDataset& ds, const SplitSpec& spec) {
  if (ds.empty()) throw EmptyDatasetError("split: dataset is empty");
  if (!(spec.train_fraction > 0) || !(spec.val_fraction > 0) || !(spec.test_fraction > 0)) {
    throw ConfigError("split fractions must be positive");
  }
  const double total = spec.train_fraction + spec.val_fraction + spec.test_fraction;
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1, got " + std::to_string(total));

  const std::size_t n = ds.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(spec.seed);
  for (std::size_t i = n; i-- > 1;) std::swap(order[i], order[rng.index(i + 1)]);

  // A tiny epsilon keeps exact products such as 100 * 0.8 from flooring down.
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.train_fraction + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * spec.val_fraction + 1e-9));

  DatasetSplit out;
  for (auto* part : {&out.train, &out.val, &out.test}) part->source_tag = ds.source_tag;
  for (std::size_t i = 0; i < n; ++i) {
    auto& dst = i < n_train ? out.train : (i < n_train + n_val ? out.val : out.test);
    dst.segments.push_back(ds.segments[order[i]]);
  }
  return out;
}

std::vector<std::uint8_t> encode_container(const SegmentDataset& ds) {
  io::ByteWriter w;
  w.bytes(std::string_view(kMagic, 6));
  w.u8(kVersion);
  w.u8(0);
  w.u64(ds.size());
  for (const auto& s : ds.segments) {
    validate_segment(s);
    for (float v : s.ecg) w.f32(v);
    for (float v : s.ppg) w.f32(v);
    w.f32(s.sbp);
    w.f32(s.dbp);
  }
  return w.take();
}

SegmentDataset decode_container(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 6 || r.bytes(6) != std::string_view(kMagic, 6)) {
    throw ParseError(ParseErrorKind::kBadMagic, "not a BPSEG1 container");
  }
  const std::uint8_t version = r.u8();
  if (version != kVersion) throw ParseError(ParseErrorKind::kBadVersion, "container version " + std::to_string(version));
  r.u8();
  const std::uint64_t count = r.u64();
  constexpr std::uint64_t kRecord = 2 * kSegmentSamples * 4 + 8;
  if (r.remaining() / kRecord < count) {
    throw ParseError(ParseErrorKind::kTruncated, "header declares " + std::to_string(count) + " segments but only " +
                                                     std::to_string(r.remaining() / kRecord) + " are present");
  }
  if (r.remaining() != count * kRecord) throw ParseError(ParseErrorKind::kCorrupt, "trailing bytes after the last segment");
  SegmentDataset ds;
  ds.source_tag = "external";
  ds.segments.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    SignalSegment s;
    s.ecg.resize(kSegmentSamples);
    s.ppg.resize(kSegmentSamples);
    for (auto& v : s.ecg) v = r.f32();
    for (auto& v : s.ppg) v = r.f32();
    s.sbp = r.f32();
    s.dbp = r.f32();
    validate_segment(s);
    ds.segments.push_back(std::move(s));
  }
  return ds;
}

std::uint64_t write_container(const SegmentDataset& ds, const std::filesystem::path& path) {
  const auto bytes = encode_container(ds);
  io::write_file(path, bytes);
  return bytes.size();
}

SegmentDataset read_container(const std::filesystem::path& path) { return decode_container(io::read_file(path)); }

std::uint64_t file_fingerprint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(ParseErrorKind::kIo, "cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ParseError(ParseErrorKind::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ParseError(ParseErrorKind::kIo, "short write to " + path.string());
}

}  // namespace io
}  // namespace bpq
