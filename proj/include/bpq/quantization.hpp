#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "bpq/model.hpp"
#include "bpq/signal_data.hpp"
#include "bpq/tensor.hpp"

namespace bpq {

enum class Symmetry : std::uint8_t { kSymmetric = 0, kAsymmetric = 1 };
enum class Granularity : std::uint8_t { kPerTensor = 0, kPerChannel = 1 };

struct QuantScheme {
  Symmetry symmetry = Symmetry::kSymmetric;
  Granularity granularity = Granularity::kPerChannel;
  std::uint32_t axis = 1;  // channel axis when per-channel
  std::uint32_t bits = 8;

  // Throws ConfigError for bits outside [2, 16], ShapeError for a bad axis.
  void validate() const;
  void validate(const Shape& shape) const;
  std::int32_t qmin() const;
  std::int32_t qmax() const;

  static QuantScheme weight_default() { return {}; }
  static QuantScheme activation_default() { return {Symmetry::kAsymmetric, Granularity::kPerTensor, 0, 8}; }

  friend bool operator==(const QuantScheme&, const QuantScheme&) = default;
};

struct QuantParams {
  double scale = 1.0;
  std::int32_t zero_point = 0;

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

// Range errors for non-finite bounds; ContractError when x_min > x_max.
QuantParams qparams_symmetric(double x_min, double x_max, std::uint32_t bits);
QuantParams qparams_asymmetric(double x_min, double x_max, std::uint32_t bits);
QuantParams qparams(Symmetry symmetry, double x_min, double x_max, std::uint32_t bits);

// Round half away from zero, then clip to the scheme's integer range.
std::int32_t quantize_value(double x, const QuantParams& p, const QuantScheme& scheme);

struct QuantizedTensor {
  Shape shape;
  std::vector<std::int32_t> values;
  QuantScheme scheme;
  std::vector<QuantParams> params;  // one entry, or one per channel

  std::size_t channel_of(std::size_t flat_index) const;
  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

QuantizedTensor quantize(const Tensor& x, std::vector<QuantParams> params, const QuantScheme& scheme);
Tensor dequantize(const QuantizedTensor& q);

// Min-max params for a tensor under a scheme (per channel when requested).
std::vector<QuantParams> minmax_params(const Tensor& x, const QuantScheme& scheme);

// Observers.
inline constexpr double kDefaultMomentum = 0.01;
inline constexpr std::size_t kHistogramBins = 256;

struct MinMaxObserver {
  double x_min = 0.0, x_max = 0.0;
  bool seeded = false;
};

struct MovingAverageObserver {
  double x_min = 0.0, x_max = 0.0;
  double momentum = kDefaultMomentum;
  bool seeded = false;
};

struct HistogramObserver {
  std::size_t num_bins = kHistogramBins;
  double lo = 0.0, hi = 0.0;
  std::vector<double> counts;
  std::uint32_t bits = 8;  // target bit-width for the range search
  bool seeded = false;
};

using ObserverState = std::variant<MinMaxObserver, MovingAverageObserver, HistogramObserver>;

enum class ObserverKind { kMinMax, kMovingAverage, kHistogram };

const char* to_string(ObserverKind kind);
ObserverKind observer_kind_from_string(const std::string& name);
ObserverState make_observer(ObserverKind kind);

// RangeError on non-finite input. Empty input leaves the state unchanged.
ObserverState observe(ObserverState state, std::span<const float> x);
// StateError before the first observation.
std::pair<double, double> observer_range(const ObserverState& state);

// Quantization-error cost the histogram search minimizes for a candidate
// range (exposed for tests).
double histogram_range_cost(const HistogramObserver& h, std::size_t lo_edge, std::size_t hi_edge);

enum class QuantMode : std::uint8_t { kDynamic = 0, kStatic = 1 };

const char* to_string(QuantMode mode);
QuantMode quant_mode_from_string(const std::string& name);

// Activation params per projection slot. Slot 0 (the patch embedding) has
// one entry per signal channel, every other slot a single entry.
struct Calibration {
  std::vector<std::vector<QuantParams>> slots;

  friend bool operator==(const Calibration&, const Calibration&) = default;
};

// Runs float forward passes over `calib`, observing every projection input.
// ConfigError on an empty calibration set.
Calibration calibrate_static(const EncoderModel& model, const SegmentDataset& calib,
                             ObserverKind observer = ObserverKind::kMinMax);

struct QuantizedLayer {
  QuantizedTensor weight;  // [in, out]
  bool has_bias = false;
  std::vector<float> bias;             // dynamic mode, [out]
  std::vector<std::int32_t> bias_int;  // static mode, [groups * out] at scale Δw·Δx
  std::vector<QuantParams> activation;  // static mode only

  friend bool operator==(const QuantizedLayer&, const QuantizedLayer&) = default;
};

struct QuantizedModel {
  QuantMode mode = QuantMode::kDynamic;
  // Float residue: layer norms and embedding tables. Projection weights and
  // biases are empty here and live in `layers`.
  EncoderModel residue;
  std::vector<QuantizedLayer> layers;  // one per projection slot

  const ModelConfig& config() const { return residue.config; }
  friend bool operator==(const QuantizedModel& a, const QuantizedModel& b);
};

// Quantizes every dense projection. ConfigError when static mode lacks a
// calibration or when an int32 accumulator could overflow.
QuantizedModel convert(const EncoderModel& model, QuantMode mode, const QuantScheme& weight_scheme = {},
                       const Calibration* calibration = nullptr);

// Normalized-unit predictions [batch, 2], like forward().
Tensor quantized_forward(const QuantizedModel& qmodel, std::span<const SignalSegment> batch);
Tensor quantized_forward_patches(const QuantizedModel& qmodel, const Tensor& patches);

// Quantized dense layer on its own: y = x W + b with integer accumulation.
// `act` holds one entry, or one per row group of `rows_per_group` rows; an
// empty `act` derives dynamic per-group params from x.
Tensor quantized_linear(const Tensor& x, const QuantizedLayer& layer, std::span<const QuantParams> act,
                        std::size_t rows_per_group);

std::vector<std::uint8_t> encode_quantized(const QuantizedModel& qmodel);
QuantizedModel decode_quantized(const std::vector<std::uint8_t>& bytes);
void save_quantized(const QuantizedModel& qmodel, const std::filesystem::path& path);
QuantizedModel load_quantized(const std::filesystem::path& path);

std::uint64_t model_size_bytes(const EncoderModel& model);
std::uint64_t model_size_bytes(const QuantizedModel& qmodel);
double reduction_factor(std::uint64_t float_bytes, std::uint64_t quant_bytes);

}  // namespace bpq
