#include "bpq/quantization.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "bpq/byte_io.hpp"
#include "bpq/errors.hpp"

namespace bpq {
namespace {

constexpr char kMagic[] = "BPQNT1";
constexpr std::uint8_t kVersion = 1;

void check_finite_range(double x_min, double x_max) {
  if (!std::isfinite(x_min) || !std::isfinite(x_max)) throw RangeError("quantization range is not finite");
  if (x_min > x_max) throw ContractError("quantization range has x_min > x_max");
}

void check_bits(std::uint32_t bits) {
  if (bits < 2 || bits > 16) throw ConfigError("bit-width must lie in [2, 16], got " + std::to_string(bits));
}

// Scales are stored as f32; rounding here keeps in-memory and reloaded
// models identical.
QuantParams to_f32(QuantParams p) {
  p.scale = static_cast<double>(static_cast<float>(p.scale));
  return p;
}

std::pair<double, double> span_range(std::span<const float> x) {
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  for (float v : x) {
    if (!std::isfinite(v)) throw RangeError("observed value is not finite");
    lo = std::min<double>(lo, v);
    hi = std::max<double>(hi, v);
  }
  return {lo, hi};
}

std::size_t bin_of(double x, double lo, double hi, std::size_t bins) {
  if (!(hi > lo)) return 0;
  const double pos = (x - lo) / (hi - lo) * static_cast<double>(bins);
  return std::min(bins - 1, static_cast<std::size_t>(std::max(0.0, std::floor(pos))));
}

struct Observe {
  std::span<const float> x;
  double lo, hi;

  void operator()(MinMaxObserver& s) const {
    if (!s.seeded) {
      s.x_min = lo;
      s.x_max = hi;
      s.seeded = true;
      return;
    }
    s.x_min = std::min(s.x_min, lo);
    s.x_max = std::max(s.x_max, hi);
  }

  void operator()(MovingAverageObserver& s) const {
    if (!s.seeded) {
      s.x_min = lo;
      s.x_max = hi;
      s.seeded = true;
      return;
    }
    s.x_min = (1.0 - s.momentum) * s.x_min + s.momentum * lo;
    s.x_max = (1.0 - s.momentum) * s.x_max + s.momentum * hi;
  }

  void operator()(HistogramObserver& s) const {
    if (s.num_bins == 0) throw ConfigError("histogram needs at least one bin");
    if (!s.seeded) {
      s.lo = lo;
      s.hi = hi;
      s.counts.assign(s.num_bins, 0.0);
      s.seeded = true;
    } else if (lo < s.lo || hi > s.hi) {
      // Extend the range and move old mass by bin centre.
      const double new_lo = std::min(s.lo, lo), new_hi = std::max(s.hi, hi);
      std::vector<double> moved(s.num_bins, 0.0);
      const double w = (s.hi - s.lo) / static_cast<double>(s.num_bins);
      for (std::size_t k = 0; k < s.num_bins; ++k) {
        if (s.counts[k] == 0.0) continue;
        const double centre = s.lo + (static_cast<double>(k) + 0.5) * w;
        moved[bin_of(centre, new_lo, new_hi, s.num_bins)] += s.counts[k];
      }
      s.counts = std::move(moved);
      s.lo = new_lo;
      s.hi = new_hi;
    }
    for (float v : x) s.counts[bin_of(v, s.lo, s.hi, s.num_bins)] += 1.0;
  }
};

std::pair<double, double> histogram_range(const HistogramObserver& h) {
  if (!(h.hi > h.lo)) return {h.lo, h.hi};
  const std::size_t n = h.num_bins;
  std::size_t best_lo = 0, best_hi = n;
  double best = histogram_range_cost(h, 0, n);
  // Widest candidates first; a narrower range must be strictly better.
  for (std::size_t width = n - 1; width >= 1; --width) {
    for (std::size_t i = 0; i + width <= n; ++i) {
      const double c = histogram_range_cost(h, i, i + width);
      if (c < best * (1.0 - 1e-12)) {
        best = c;
        best_lo = i;
        best_hi = i + width;
      }
    }
  }
  const double w = (h.hi - h.lo) / static_cast<double>(n);
  const double lo = h.lo + static_cast<double>(best_lo) * w;
  const double hi = best_hi == n ? h.hi : h.lo + static_cast<double>(best_hi) * w;
  return {lo, hi};
}

std::uint32_t ceil_log2(std::uint64_t k) {
  std::uint32_t b = 0;
  while ((std::uint64_t{1} << b) < k) ++b;
  return b;
}

std::set<std::string> projection_names(const EncoderModel& model) {
  std::set<std::string> names;
  for (std::size_t s = 0; s < projection_count(model.config); ++s) {
    names.insert(model.projection_weight_name(s));
    if (model.projection_bias(s) != nullptr) names.insert(model.projection_bias_name(s));
  }
  return names;
}

Tensor* mutable_param(EncoderModel& m, const std::string& name) {
  for (auto& p : m.parameters())
    if (p.name == name) return p.tensor;
  throw ContractError("no parameter named " + name);
}

// Activation params for a block of rows from the live values.
QuantParams dynamic_params(const float* x, std::size_t count, std::uint32_t bits) {
  const auto [lo, hi] = span_range(std::span(x, count));
  return to_f32(qparams_asymmetric(lo, hi, bits));
}

class QuantExecutor : public FloatExecutor {
 public:
  explicit QuantExecutor(const QuantizedModel& q) : FloatExecutor(q.residue), q_(q) {}

  Tensor project(std::size_t slot, const Tensor& x) {
    const auto& layer = q_.layers.at(slot);
    const std::size_t group_rows = slot == 0 ? q_.config().patches_per_channel() : x.rows();
    std::span<const QuantParams> act;
    if (q_.mode == QuantMode::kStatic) act = layer.activation;
    return quantized_linear(x, layer, act, group_rows);
  }

 private:
  const QuantizedModel& q_;
};

bool same_model(const EncoderModel& a, const EncoderModel& b) {
  if (!(a.config == b.config) || !(a.target_norm == b.target_norm)) return false;
  const auto pa = a.parameters(), pb = b.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (!(*pa[i].tensor == *pb[i].tensor)) return false;
  return true;
}

}  // namespace

void QuantScheme::validate() const { check_bits(bits); }

void QuantScheme::validate(const Shape& shape) const {
  validate();
  if (granularity == Granularity::kPerChannel && axis >= shape.size()) {
    throw ShapeError("per-channel axis " + std::to_string(axis) + " is invalid for shape " + shape_to_string(shape));
  }
}

std::int32_t QuantScheme::qmin() const { return symmetry == Symmetry::kSymmetric ? -(1 << (bits - 1)) : 0; }

std::int32_t QuantScheme::qmax() const {
  return symmetry == Symmetry::kSymmetric ? (1 << (bits - 1)) - 1 : (1 << bits) - 1;
}

QuantParams qparams_symmetric(double x_min, double x_max, std::uint32_t bits) {
  check_bits(bits);
  check_finite_range(x_min, x_max);
  const double m = std::max(std::abs(x_min), std::abs(x_max));
  if (m == 0.0) return {1.0, 0};
  return {m / std::ldexp(1.0, static_cast<int>(bits) - 1), 0};
}

QuantParams qparams_asymmetric(double x_min, double x_max, std::uint32_t bits) {
  check_bits(bits);
  check_finite_range(x_min, x_max);
  const double lo = std::min(x_min, 0.0), hi = std::max(x_max, 0.0);
  if (hi - lo == 0.0) return {1.0, 0};
  const double levels = std::ldexp(1.0, static_cast<int>(bits)) - 1.0;
  const double scale = (hi - lo) / levels;
  const double z = std::floor(-lo / scale + 0.5);
  return {scale, static_cast<std::int32_t>(std::clamp(z, 0.0, levels))};
}

QuantParams qparams(Symmetry symmetry, double x_min, double x_max, std::uint32_t bits) {
  return symmetry == Symmetry::kSymmetric ? qparams_symmetric(x_min, x_max, bits)
                                          : qparams_asymmetric(x_min, x_max, bits);
}

std::int32_t quantize_value(double x, const QuantParams& p, const QuantScheme& scheme) {
  double q = std::round(x / p.scale);
  if (scheme.symmetry == Symmetry::kAsymmetric) q += p.zero_point;
  return static_cast<std::int32_t>(std::clamp(q, static_cast<double>(scheme.qmin()), static_cast<double>(scheme.qmax())));
}

std::size_t QuantizedTensor::channel_of(std::size_t flat_index) const {
  if (scheme.granularity == Granularity::kPerTensor) return 0;
  std::size_t stride = 1;
  for (std::size_t d = scheme.axis + 1; d < shape.size(); ++d) stride *= shape[d];
  return (flat_index / stride) % shape[scheme.axis];
}

QuantizedTensor quantize(const Tensor& x, std::vector<QuantParams> params, const QuantScheme& scheme) {
  scheme.validate(x.shape());
  const std::size_t expected = scheme.granularity == Granularity::kPerTensor ? 1 : x.dim(scheme.axis);
  if (params.size() != expected) {
    throw ShapeError("expected " + std::to_string(expected) + " quantization params, got " +
                     std::to_string(params.size()));
  }
  for (const auto& p : params)
    if (!(p.scale > 0.0) || !std::isfinite(p.scale)) throw RangeError("quantization scale must be positive");
  QuantizedTensor q;
  q.shape = x.shape();
  q.scheme = scheme;
  q.params = std::move(params);
  q.values.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) q.values[i] = quantize_value(x[i], q.params[q.channel_of(i)], scheme);
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  Tensor out(q.shape);
  for (std::size_t i = 0; i < q.values.size(); ++i) {
    const QuantParams& p = q.params[q.channel_of(i)];
    const std::int32_t z = q.scheme.symmetry == Symmetry::kAsymmetric ? p.zero_point : 0;
    out[i] = static_cast<float>(p.scale * static_cast<double>(q.values[i] - z));
  }
  return out;
}

std::vector<QuantParams> minmax_params(const Tensor& x, const QuantScheme& scheme) {
  scheme.validate(x.shape());
  QuantizedTensor layout;
  layout.shape = x.shape();
  layout.scheme = scheme;
  const std::size_t channels = scheme.granularity == Granularity::kPerTensor ? 1 : x.dim(scheme.axis);
  std::vector<double> lo(channels, std::numeric_limits<double>::infinity()), hi(channels, -lo[0]);
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!std::isfinite(x[i])) throw RangeError("tensor holds a non-finite value");
    const std::size_t c = layout.channel_of(i);
    lo[c] = std::min<double>(lo[c], x[i]);
    hi[c] = std::max<double>(hi[c], x[i]);
  }
  std::vector<QuantParams> out;
  for (std::size_t c = 0; c < channels; ++c) {
    if (lo[c] > hi[c]) lo[c] = hi[c] = 0.0;  // empty slice
    out.push_back(qparams(scheme.symmetry, lo[c], hi[c], scheme.bits));
  }
  return out;
}

const char* to_string(ObserverKind kind) {
  switch (kind) {
    case ObserverKind::kMinMax: return "minmax";
    case ObserverKind::kMovingAverage: return "moving_average";
    case ObserverKind::kHistogram: return "histogram";
  }
  return "?";
}

ObserverKind observer_kind_from_string(const std::string& name) {
  if (name == "minmax") return ObserverKind::kMinMax;
  if (name == "moving_average") return ObserverKind::kMovingAverage;
  if (name == "histogram") return ObserverKind::kHistogram;
  throw ConfigError("unknown observer '" + name + "' (minmax, moving_average, histogram)");
}

ObserverState make_observer(ObserverKind kind) {
  switch (kind) {
    case ObserverKind::kMinMax: return MinMaxObserver{};
    case ObserverKind::kMovingAverage: return MovingAverageObserver{};
    case ObserverKind::kHistogram: return HistogramObserver{};
  }
  throw ConfigError("unknown observer kind");
}

ObserverState observe(ObserverState state, std::span<const float> x) {
  if (x.empty()) return state;
  const auto [lo, hi] = span_range(x);
  std::visit(Observe{x, lo, hi}, state);
  return state;
}

std::pair<double, double> observer_range(const ObserverState& state) {
  return std::visit(
      [](const auto& s) -> std::pair<double, double> {
        if (!s.seeded) throw StateError("observer has not seen any data");
        using T = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<T, HistogramObserver>) {
          return histogram_range(s);
        } else {
          return {s.x_min, s.x_max};
        }
      },
      state);
}

double histogram_range_cost(const HistogramObserver& h, std::size_t lo_edge, std::size_t hi_edge) {
  if (lo_edge >= hi_edge || hi_edge > h.num_bins) throw ContractError("bad histogram edge pair");
  const double w = (h.hi - h.lo) / static_cast<double>(h.num_bins);
  const double e_lo = h.lo + static_cast<double>(lo_edge) * w;
  const double e_hi = h.lo + static_cast<double>(hi_edge) * w;
  const double step = (e_hi - e_lo) / (std::ldexp(1.0, static_cast<int>(h.bits)) - 1.0);
  double cost = 0.0;
  for (std::size_t k = 0; k < h.num_bins; ++k) {
    const double m = h.counts[k];
    if (m == 0.0) continue;
    const double c = h.lo + (static_cast<double>(k) + 0.5) * w;
    if (k < lo_edge) {
      cost += m * (e_lo - c) * (e_lo - c);
    } else if (k >= hi_edge) {
      cost += m * (c - e_hi) * (c - e_hi);
    } else {
      cost += m * step * step / 12.0;
    }
  }
  return cost;
}

const char* to_string(QuantMode mode) { return mode == QuantMode::kStatic ? "static" : "dynamic"; }

QuantMode quant_mode_from_string(const std::string& name) {
  if (name == "static") return QuantMode::kStatic;
  if (name == "dynamic") return QuantMode::kDynamic;
  throw ConfigError("quantization mode must be static or dynamic, got '" + name + "'");
}

Calibration calibrate_static(const EncoderModel& model, const SegmentDataset& calib, ObserverKind observer) {
  if (calib.empty()) throw ConfigError("static calibration needs a non-empty calibration set");
  const ModelConfig& cfg = model.config;
  const std::size_t slots = projection_count(cfg);
  const std::size_t patches = cfg.patches_per_channel();
  std::vector<std::vector<ObserverState>> obs(slots);
  obs[0].assign(cfg.num_channels, make_observer(observer));
  for (std::size_t s = 1; s < slots; ++s) obs[s].assign(1, make_observer(observer));

  const AttentionGroups temporal = temporal_groups(cfg), spatial = spatial_groups(cfg);
  FloatExecutor ex(model);
  ex.on_project_input = [&](std::size_t slot, const Tensor& x) {
    if (slot == 0) {
      const std::size_t block = patches * x.cols();
      for (std::size_t c = 0; c < cfg.num_channels; ++c) {
        obs[0][c] = observe(std::move(obs[0][c]), std::span(x.raw() + c * block, block));
      }
    } else {
      obs[slot][0] = observe(std::move(obs[slot][0]), std::span(x.raw(), x.size()));
    }
  };
  for (const auto& seg : calib.segments) {
    const Tensor x = tokenize(seg, cfg).reshaped({cfg.tokens(), cfg.patch_len});
    regress(ex, cfg, encode_tokens(ex, cfg, temporal, spatial, x));
  }
  Calibration out;
  out.slots.resize(slots);
  for (std::size_t s = 0; s < slots; ++s) {
    for (const auto& o : obs[s]) {
      const auto [lo, hi] = observer_range(o);
      out.slots[s].push_back(to_f32(qparams_asymmetric(lo, hi, 8)));
    }
  }
  return out;
}

bool operator==(const QuantizedModel& a, const QuantizedModel& b) {
  return a.mode == b.mode && a.layers == b.layers && same_model(a.residue, b.residue);
}

QuantizedModel convert(const EncoderModel& model, QuantMode mode, const QuantScheme& weight_scheme,
                       const Calibration* calibration) {
  const ModelConfig& cfg = model.config;
  cfg.validate();
  weight_scheme.validate();
  if (weight_scheme.granularity == Granularity::kPerChannel && weight_scheme.axis != 1) {
    throw ConfigError("per-channel weight quantization must run along the output axis (1)");
  }
  const std::size_t slots = projection_count(cfg);
  if (mode == QuantMode::kStatic) {
    if (calibration == nullptr) throw ConfigError("static quantization requires a calibration");
    if (calibration->slots.size() != slots) throw ConfigError("calibration does not match the model");
    for (std::size_t s = 0; s < slots; ++s) {
      const std::size_t want = s == 0 ? cfg.num_channels : 1;
      if (calibration->slots[s].size() != want) throw ConfigError("calibration slot size mismatch");
    }
  }

  QuantizedModel q;
  q.mode = mode;
  q.residue = model;
  for (const auto& name : projection_names(model)) *mutable_param(q.residue, name) = Tensor();

  for (std::size_t s = 0; s < slots; ++s) {
    const Tensor& w = model.projection_weight(s);
    const std::size_t k = w.dim(0), n = w.dim(1);
    const std::uint32_t act_bits = 8;
    if (2 * std::max(weight_scheme.bits, act_bits) + ceil_log2(k) + 1 > 32) {
      throw ConfigError("int32 accumulator could overflow for inner dimension " + std::to_string(k) + " at " +
                        std::to_string(weight_scheme.bits) + " bits");
    }
    QuantizedLayer layer;
    std::vector<QuantParams> params = minmax_params(w, weight_scheme);
    for (auto& p : params) p = to_f32(p);
    layer.weight = quantize(w, std::move(params), weight_scheme);
    const Tensor* bias = model.projection_bias(s);
    layer.has_bias = bias != nullptr;
    if (mode == QuantMode::kStatic) layer.activation = calibration->slots[s];
    if (bias != nullptr) {
      if (mode == QuantMode::kDynamic) {
        layer.bias.assign(bias->raw(), bias->raw() + bias->size());
      } else {
        for (const auto& a : layer.activation) {
          for (std::size_t j = 0; j < n; ++j) {
            const QuantParams& pw = layer.weight.params[layer.weight.channel_of(j)];
            const double v = std::round(static_cast<double>((*bias)[j]) / (pw.scale * a.scale));
            layer.bias_int.push_back(static_cast<std::int32_t>(
                std::clamp(v, static_cast<double>(std::numeric_limits<std::int32_t>::min()),
                           static_cast<double>(std::numeric_limits<std::int32_t>::max()))));
          }
        }
      }
    }
    q.layers.push_back(std::move(layer));
  }
  return q;
}

Tensor quantized_linear(const Tensor& x, const QuantizedLayer& layer, std::span<const QuantParams> act,
                        std::size_t rows_per_group) {
  const QuantizedTensor& w = layer.weight;
  const std::size_t m = x.rows(), k = x.cols(), n = w.shape.at(1);
  if (w.shape.at(0) != k) throw ShapeError("quantized_linear: input width does not match the weight");
  if (rows_per_group == 0 || m % rows_per_group != 0) throw ShapeError("quantized_linear: bad row grouping");
  const std::size_t groups = m / rows_per_group;
  if (!act.empty() && act.size() != groups) throw ShapeError("quantized_linear: activation params per group mismatch");

  // Weight integers with their zero point removed.
  std::vector<std::int32_t> wq(w.values.size());
  for (std::size_t i = 0; i < wq.size(); ++i) {
    const std::int32_t z = w.scheme.symmetry == Symmetry::kAsymmetric ? w.params[w.channel_of(i)].zero_point : 0;
    wq[i] = w.values[i] - z;
  }
  const QuantScheme act_scheme = QuantScheme::activation_default();

  Tensor y({m, n});
  std::vector<std::int32_t> xq(k), acc(n);
  for (std::size_t g = 0; g < groups; ++g) {
    const float* xg = x.raw() + g * rows_per_group * k;
    const QuantParams pa = act.empty() ? dynamic_params(xg, rows_per_group * k, act_scheme.bits) : act[g];
    for (std::size_t r = 0; r < rows_per_group; ++r) {
      const std::size_t i = g * rows_per_group + r;
      for (std::size_t p = 0; p < k; ++p) xq[p] = quantize_value(xg[r * k + p], pa, act_scheme) - pa.zero_point;
      std::fill(acc.begin(), acc.end(), 0);
      for (std::size_t p = 0; p < k; ++p) {
        const std::int32_t xv = xq[p];
        const std::int32_t* wrow = wq.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) acc[j] += xv * wrow[j];
      }
      for (std::size_t j = 0; j < n; ++j) {
        const double scale = pa.scale * w.params[w.channel_of(j)].scale;
        double v;
        if (!layer.has_bias) {
          v = scale * acc[j];
        } else if (!layer.bias_int.empty()) {
          v = scale * (static_cast<double>(acc[j]) + layer.bias_int[g * n + j]);
        } else {
          v = scale * acc[j] + layer.bias.at(j);
        }
        y[i * n + j] = static_cast<float>(v);
      }
    }
  }
  return y;
}

Tensor quantized_forward_patches(const QuantizedModel& qmodel, const Tensor& patches) {
  const ModelConfig& cfg = qmodel.config();
  if (patches.size() != std::size_t{cfg.tokens()} * cfg.patch_len) throw ShapeError("forward: patch count mismatch");
  const AttentionGroups temporal = temporal_groups(cfg), spatial = spatial_groups(cfg);
  QuantExecutor ex(qmodel);
  Tensor tokens = encode_tokens(ex, cfg, temporal, spatial, patches.reshaped({cfg.tokens(), cfg.patch_len}));
  return regress(ex, cfg, tokens);
}

Tensor quantized_forward(const QuantizedModel& qmodel, std::span<const SignalSegment> batch) {
  const ModelConfig& cfg = qmodel.config();
  if (batch.empty()) throw EmptyDatasetError("forward: empty batch");
  Tensor out({batch.size(), cfg.head_outputs});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Tensor pred = quantized_forward_patches(qmodel, tokenize(batch[i], cfg));
    std::copy(pred.raw(), pred.raw() + cfg.head_outputs, out.raw() + i * cfg.head_outputs);
  }
  return out;
}

std::vector<std::uint8_t> encode_quantized(const QuantizedModel& q) {
  const ModelConfig& cfg = q.config();
  io::ByteWriter w;
  w.bytes(std::string_view(kMagic, 6));
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(q.mode));
  write_header_block(w, cfg, q.residue.target_norm);
  w.u32(static_cast<std::uint32_t>(q.layers.size()));
  for (const auto& layer : q.layers) {
    const auto& t = layer.weight;
    w.u8(static_cast<std::uint8_t>(t.scheme.symmetry));
    w.u8(static_cast<std::uint8_t>(t.scheme.granularity));
    w.u8(static_cast<std::uint8_t>(t.scheme.axis));
    w.u8(static_cast<std::uint8_t>(t.scheme.bits));
    w.u32(static_cast<std::uint32_t>(t.shape.at(0)));
    w.u32(static_cast<std::uint32_t>(t.shape.at(1)));
    w.u32(static_cast<std::uint32_t>(t.params.size()));
    for (const auto& p : t.params) w.f32(static_cast<float>(p.scale));
    if (t.scheme.symmetry == Symmetry::kAsymmetric)
      for (const auto& p : t.params) w.i32(p.zero_point);
    if (t.scheme.bits <= 8) {
      // Asymmetric payloads are offset by 2^(b-1) so every scheme packs as signed.
      const std::int32_t off = t.scheme.symmetry == Symmetry::kAsymmetric ? (1 << (t.scheme.bits - 1)) : 0;
      for (std::int32_t v : t.values) w.u8(static_cast<std::uint8_t>(static_cast<std::int8_t>(v - off)));
    } else {
      const std::int32_t off = t.scheme.symmetry == Symmetry::kAsymmetric ? (1 << (t.scheme.bits - 1)) : 0;
      for (std::int32_t v : t.values) {
        const auto u = static_cast<std::uint16_t>(static_cast<std::int16_t>(v - off));
        w.u8(static_cast<std::uint8_t>(u & 0xff));
        w.u8(static_cast<std::uint8_t>(u >> 8));
      }
    }
    w.u8(layer.has_bias ? 1 : 0);
    if (layer.has_bias) {
      if (q.mode == QuantMode::kDynamic) {
        for (float b : layer.bias) w.f32(b);
      } else {
        for (std::int32_t b : layer.bias_int) w.i32(b);
      }
    }
  }
  const auto names = projection_names(q.residue);
  for (const auto& p : q.residue.parameters()) {
    if (names.count(p.name) > 0) continue;
    w.u64(p.tensor->size());
    for (float v : p.tensor->data()) w.f32(v);
  }
  if (q.mode == QuantMode::kStatic) {
    for (const auto& layer : q.layers) {
      w.u32(static_cast<std::uint32_t>(layer.activation.size()));
      for (const auto& a : layer.activation) {
        w.f32(static_cast<float>(a.scale));
        w.i32(a.zero_point);
      }
    }
  }
  return w.take();
}

QuantizedModel decode_quantized(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 6 || r.bytes(6) != std::string_view(kMagic, 6)) {
    throw ParseError(ParseErrorKind::kBadMagic, "not a BPQNT1 quantized model");
  }
  const std::uint8_t version = r.u8();
  if (version != kVersion) throw ParseError(ParseErrorKind::kBadVersion, "quantized model version " + std::to_string(version));
  const std::uint8_t mode = r.u8();
  if (mode > 1) throw ParseError(ParseErrorKind::kCorrupt, "unknown quantization mode byte");
  QuantizedModel q;
  q.mode = static_cast<QuantMode>(mode);
  ModelConfig cfg;
  TargetNormalization norm;
  read_header_block(r, cfg, norm);
  q.residue = make_model(cfg);
  q.residue.target_norm = norm;
  const auto names = projection_names(q.residue);

  const std::uint32_t count = r.u32();
  if (count != projection_count(cfg)) throw ParseError(ParseErrorKind::kCorrupt, "layer count does not match the config");
  for (std::uint32_t s = 0; s < count; ++s) {
    QuantizedLayer layer;
    auto& t = layer.weight;
    const std::uint8_t sym = r.u8(), gran = r.u8(), axis = r.u8(), bits = r.u8();
    if (sym > 1 || gran > 1 || bits < 2 || bits > 16) throw ParseError(ParseErrorKind::kCorrupt, "bad scheme descriptor");
    t.scheme = {static_cast<Symmetry>(sym), static_cast<Granularity>(gran), axis, bits};
    const std::uint32_t rows = r.u32(), cols = r.u32();
    const Tensor& ref = q.residue.projection_weight(s);
    if (rows != ref.dim(0) || cols != ref.dim(1) || (gran == 1 && axis != 1)) {
      throw ParseError(ParseErrorKind::kCorrupt, "layer shape does not match the config");
    }
    t.shape = {rows, cols};
    const std::uint32_t n_params = r.u32();
    if (n_params != (gran == 1 ? cols : 1u)) throw ParseError(ParseErrorKind::kCorrupt, "bad per-channel param count");
    t.params.resize(n_params);
    for (auto& p : t.params) {
      p.scale = r.f32();
      if (!(p.scale > 0.0) || !std::isfinite(p.scale)) throw ParseError(ParseErrorKind::kCorrupt, "bad scale");
    }
    if (t.scheme.symmetry == Symmetry::kAsymmetric)
      for (auto& p : t.params) p.zero_point = r.i32();
    const std::int32_t off = t.scheme.symmetry == Symmetry::kAsymmetric ? (1 << (bits - 1)) : 0;
    t.values.resize(std::size_t{rows} * cols);
    if (r.remaining() < t.values.size() * (bits <= 8 ? 1 : 2)) throw ParseError(ParseErrorKind::kTruncated, "payload truncated");
    for (auto& v : t.values) {
      if (bits <= 8) {
        v = static_cast<std::int8_t>(r.u8()) + off;
      } else {
        const std::uint16_t lo = r.u8(), hi = r.u8();
        v = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo | (hi << 8))) + off;
      }
      if (v < t.scheme.qmin() || v > t.scheme.qmax()) throw ParseError(ParseErrorKind::kCorrupt, "payload out of range");
    }
    const std::uint8_t has_bias = r.u8();
    if (has_bias > 1 || (has_bias == 1) != (q.residue.projection_bias(s) != nullptr)) {
      throw ParseError(ParseErrorKind::kCorrupt, "bias flag does not match the layer");
    }
    layer.has_bias = has_bias == 1;
    if (layer.has_bias) {
      if (q.mode == QuantMode::kDynamic) {
        layer.bias.resize(cols);
        for (auto& b : layer.bias) b = r.f32();
      } else {
        layer.bias_int.resize(std::size_t{cols} * (s == 0 ? cfg.num_channels : 1));
        for (auto& b : layer.bias_int) b = r.i32();
      }
    }
    q.layers.push_back(std::move(layer));
  }
  for (auto& p : q.residue.parameters()) {
    if (names.count(p.name) > 0) {
      *p.tensor = Tensor();
      continue;
    }
    const std::uint64_t len = r.u64();
    if (len != p.tensor->size()) throw ParseError(ParseErrorKind::kCorrupt, "tensor " + p.name + " has the wrong length");
    for (auto& v : p.tensor->data()) {
      v = r.f32();
      if (!std::isfinite(v)) throw ParseError(ParseErrorKind::kNonFinite, "tensor " + p.name + " holds a non-finite value");
    }
  }
  if (q.mode == QuantMode::kStatic) {
    for (std::size_t s = 0; s < q.layers.size(); ++s) {
      const std::uint32_t n = r.u32();
      if (n != (s == 0 ? cfg.num_channels : 1u)) throw ParseError(ParseErrorKind::kCorrupt, "bad activation record count");
      for (std::uint32_t i = 0; i < n; ++i) {
        QuantParams a;
        a.scale = r.f32();
        a.zero_point = r.i32();
        if (!(a.scale > 0.0) || !std::isfinite(a.scale)) throw ParseError(ParseErrorKind::kCorrupt, "bad activation scale");
        q.layers[s].activation.push_back(a);
      }
    }
  }
  if (r.remaining() != 0) throw ParseError(ParseErrorKind::kCorrupt, "trailing bytes after the quantized model");
  return q;
}

void save_quantized(const QuantizedModel& qmodel, const std::filesystem::path& path) {
  io::write_file(path, encode_quantized(qmodel));
}

QuantizedModel load_quantized(const std::filesystem::path& path) { return decode_quantized(io::read_file(path)); }

std::uint64_t model_size_bytes(const EncoderModel& model) { return encode_model(model).size(); }
std::uint64_t model_size_bytes(const QuantizedModel& qmodel) { return encode_quantized(qmodel).size(); }

double reduction_factor(std::uint64_t float_bytes, std::uint64_t quant_bytes) {
  if (quant_bytes == 0) throw ContractError("reduction factor of an empty model");
  return static_cast<double>(float_bytes) / static_cast<double>(quant_bytes);
}

}  // namespace bpq
