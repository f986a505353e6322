#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <tuple>
#include <vector>

namespace bpq {

inline constexpr std::size_t kSampleRateHz = 125;
inline constexpr std::size_t kSegmentSamples = 1250;  // 10 s at 125 Hz

// One synchronized ECG/PPG window with its blood-pressure labels in mmHg.
struct SignalSegment {
  std::vector<float> ecg;
  std::vector<float> ppg;
  float sbp = 0.0F;
  float dbp = 0.0F;

  friend bool operator==(const SignalSegment&, const SignalSegment&) = default;
};

// Throws ParseError (kNonFinite / kInvalidLabels) or ShapeError.
void validate_segment(const SignalSegment& segment);

struct SegmentDataset {
  std::vector<SignalSegment> segments;
  std::string source_tag = "synthetic";

  std::size_t size() const { return segments.size(); }
  bool empty() const { return segments.empty(); }

  // Datasets compare by content; the tag is informational.
  friend bool operator==(const SegmentDataset& a, const SegmentDataset& b) { return a.segments == b.segments; }
};

struct SplitSpec {
  double train_fraction = 0.8;
  double val_fraction = 0.1;
  double test_fraction = 0.1;
  std::uint64_t seed = 1234;
};

struct DatasetSplit {
  SegmentDataset train;
  SegmentDataset val;
  SegmentDataset test;
};

// Latent parameters drawn for a synthetic segment. Exposed for tests and
// diagnostics; the labels are a function of these plus label noise.
struct SyntheticLatents {
  double heart_rate_bpm = 0.0;
  double transit_delay_s = 0.0;
  double pulse_amplitude = 0.0;
  double first_beat_s = 0.0;
};

// Synthetic ECG/PPG generator with a known transit-time -> pressure mapping.
// Identical (n, seed) produce bit-identical datasets. `latents`, when
// non-null, receives the per-segment draws.
SegmentDataset generate_synthetic(std::size_t n, std::uint64_t seed,
                                  std::vector<SyntheticLatents>* latents = nullptr);

// Seeded shuffle followed by a contiguous partition. Sizes are
// floor(n * train), floor(n * val) and the remainder.
DatasetSplit split(const SegmentDataset& ds, const SplitSpec& spec);

// Container "BPSEG1". Returns the number of bytes written.
std::uint64_t write_container(const SegmentDataset& ds, const std::filesystem::path& path);
SegmentDataset read_container(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_container(const SegmentDataset& ds);
SegmentDataset decode_container(const std::vector<std::uint8_t>& bytes);

inline constexpr std::uint64_t container_size(std::uint64_t n) {
  return 16 + n * (2 * kSegmentSamples * 4 + 8);
}

// FNV-1a over the raw bytes of a file; used to tie runs to their data.
std::uint64_t file_fingerprint(const std::filesystem::path& path);

}  // namespace bpq
