#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bpq/autograd.hpp"
#include "bpq/byte_io.hpp"
#include "bpq/signal_data.hpp"
#include "bpq/tensor.hpp"

namespace bpq {

enum class SizeTag : std::uint32_t { kTiny = 0, kSmall = 1, kMedium = 2, kLarge = 3 };

const char* to_string(SizeTag tag);
SizeTag size_tag_from_string(const std::string& name);

struct ModelConfig {
  std::uint32_t num_channels = 2;
  std::uint32_t seq_len = kSegmentSamples;
  std::uint32_t patch_len = 25;
  std::uint32_t embed_dim = 64;
  std::uint32_t num_block_pairs = 2;
  std::uint32_t num_heads = 4;
  std::uint32_t mlp_ratio = 4;
  std::uint32_t head_outputs = 2;
  SizeTag size_tag = SizeTag::kTiny;

  // Runnable default: 50 patches of 0.2 s per channel.
  static ModelConfig tiny();
  // Larger presets approximate the published encoder sizes (3.58M, 39.95M
  // and 85.15M parameters); they are not needed for desk-scale runs.
  static ModelConfig small();
  static ModelConfig medium();
  static ModelConfig large();
  static ModelConfig preset(SizeTag tag);

  void validate() const;  // throws ConfigError
  std::uint32_t patches_per_channel() const { return seq_len / patch_len; }
  std::uint32_t tokens() const { return num_channels * patches_per_channel(); }
  std::uint32_t hidden_dim() const { return embed_dim * mlp_ratio; }
  std::uint32_t sub_blocks() const { return 2 * num_block_pairs; }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Per-target affine map between mmHg and the normalized units the model
// regresses. Identity until training fits it on the training split.
struct TargetNormalization {
  double sbp_mean = 0.0;
  double sbp_sd = 1.0;
  double dbp_mean = 0.0;
  double dbp_sd = 1.0;

  friend bool operator==(const TargetNormalization&, const TargetNormalization&) = default;
};

// Pre-layernorm attention + feed-forward sub-block. Even-indexed sub-blocks
// attend over patch positions within a channel (temporal), odd-indexed ones
// over channels at one patch position (spatial).
template <std::floating_point Real>
struct AttentionSubBlock {
  BasicTensor<Real> ln1_gain, ln1_bias;
  BasicTensor<Real> wq, wk, wv;  // [D, D], no bias
  BasicTensor<Real> wo, bo;      // [D, D], [D]
  BasicTensor<Real> ln2_gain, ln2_bias;
  BasicTensor<Real> w1, b1;  // [D, H], [H]
  BasicTensor<Real> w2, b2;  // [H, D], [D]
};

// Dense projections in execution order. Slot 0 is the patch embedding, the
// last slot is the regression head; in between each sub-block contributes
// q, k, v, o, fc1, fc2.
enum class ProjectionKind { kPatchEmbed, kQuery, kKey, kValue, kOutput, kFeedForward1, kFeedForward2, kHead };

struct ProjectionSlot {
  std::size_t index = 0;
  ProjectionKind kind = ProjectionKind::kPatchEmbed;
  std::size_t sub_block = 0;  // meaningful for attention/feed-forward kinds
};

std::size_t projection_count(const ModelConfig& cfg);
ProjectionSlot projection_slot(const ModelConfig& cfg, std::size_t index);
std::size_t projection_index(const ModelConfig& cfg, std::size_t sub_block, ProjectionKind kind);

template <std::floating_point Real>
struct NamedTensor {
  std::string name;
  BasicTensor<Real>* tensor;
};

template <std::floating_point Real>
struct NamedConstTensor {
  std::string name;
  const BasicTensor<Real>* tensor;
};

template <std::floating_point Real>
struct BasicEncoderModel {
  ModelConfig config;
  TargetNormalization target_norm;

  BasicTensor<Real> patch_weight;  // [patch_len, D]; the input-embedding layer
  BasicTensor<Real> patch_bias;    // [D]
  BasicTensor<Real> pos_embedding;      // [P, D]
  BasicTensor<Real> channel_embedding;  // [C, D]
  std::vector<AttentionSubBlock<Real>> blocks;
  BasicTensor<Real> head_weight;  // [D, head_outputs]
  BasicTensor<Real> head_bias;    // [head_outputs]

  // Canonical parameter order; also the serialization order.
  std::vector<NamedTensor<Real>> parameters();
  std::vector<NamedConstTensor<Real>> parameters() const;

  const BasicTensor<Real>& projection_weight(std::size_t slot) const;
  // nullptr for the bias-free q/k/v projections.
  const BasicTensor<Real>* projection_bias(std::size_t slot) const;
  std::string projection_weight_name(std::size_t slot) const;
  std::string projection_bias_name(std::size_t slot) const;

  template <std::floating_point To>
  BasicEncoderModel<To> cast() const;
};

using EncoderModel = BasicEncoderModel<float>;
using EncoderModel64 = BasicEncoderModel<double>;

// Shapes of every parameter, in canonical order, from the config alone.
std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& cfg);
std::uint64_t count_params(const ModelConfig& cfg);

// Zero-filled model with every tensor allocated.
EncoderModel make_model(const ModelConfig& cfg);

// Xavier-uniform projections and embedding tables, zero biases, unit gains.
EncoderModel init_xavier(const ModelConfig& cfg, std::uint64_t seed);

// Raw patches [C, P, patch_len]; patch p of channel c holds samples
// [p * patch_len, (p + 1) * patch_len).
Tensor tokenize(const SignalSegment& segment, const ModelConfig& cfg);
// Inverse of tokenize: channel-major concatenation of the patches.
std::vector<std::vector<float>> untokenize(const Tensor& patches);

// Row index of token (c, p) in the [C * P, D] token matrix is c * P + p.
AttentionGroups temporal_groups(const ModelConfig& cfg);
AttentionGroups spatial_groups(const ModelConfig& cfg);

// Token grid [C, P, D]: patch projection plus positional and channel
// embeddings.
Tensor embed(const Tensor& patches, const EncoderModel& model);

// Intermediate activations recorded by a traced forward pass.
struct ForwardTrace {
  std::vector<Tensor> attention_outputs;  // per sub-block, pre-residual (after the output projection)
  std::vector<Tensor> attention_mixes;    // per sub-block, before the output projection
  Tensor tokens;                          // after the last sub-block
  Tensor pooled;
};

// Predictions [batch, 2] in normalized target units (SBP, DBP).
Tensor forward(const EncoderModel& model, std::span<const SignalSegment> batch);
Tensor forward_patches(const EncoderModel& model, const Tensor& patches, ForwardTrace* trace = nullptr);

// Runs only the attention half of one sub-block on a token matrix [C * P, D]
// and returns its pre-residual output.
Tensor attention_sublayer(const EncoderModel& model, std::size_t sub_block, const Tensor& tokens);

void save_model(const EncoderModel& model, const std::filesystem::path& path);
EncoderModel load_model(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_model(const EncoderModel& model);
EncoderModel decode_model(const std::vector<std::uint8_t>& bytes);

// Fixed-width header block shared by the float and quantized model formats.
void write_header_block(io::ByteWriter& w, const ModelConfig& cfg, const TargetNormalization& norm);
void read_header_block(io::ByteReader& r, ModelConfig& cfg, TargetNormalization& norm);

// Plain float inference. `on_project_input`, when set, sees the input of
// every dense projection before it is applied (used for calibration).
class FloatExecutor {
 public:
  using Value = Tensor;

  explicit FloatExecutor(const EncoderModel& model);

  Tensor input(Tensor v) const { return v; }
  Tensor project(std::size_t slot, const Tensor& x);
  Tensor token_hook(Tensor x) const { return x; }
  Tensor add_embeddings(const Tensor& x) const;
  Tensor layer_norm(std::size_t sub, int which, const Tensor& x) const;
  Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionGroups& groups) const;
  Tensor add(const Tensor& a, const Tensor& b) const { return bpq::add(a, b); }
  Tensor gelu(const Tensor& x) const { return bpq::gelu(x); }
  Tensor mean_rows(const Tensor& x) const { return bpq::mean_rows(x); }
  Tensor materialize(const Tensor& v) const { return v; }

  std::function<void(std::size_t, const Tensor&)> on_project_input;

 protected:
  const EncoderModel& model_;
  std::vector<std::uint32_t> pos_index_, chan_index_;
};

// Encoder body shared by the float, autograd, calibration and quantized
// paths. `Exec` supplies the value type and the primitive ops; see
// TapeExecutor below for the reference implementation.
template <class Exec>
typename Exec::Value encode_tokens(Exec& ex, const ModelConfig& cfg, const AttentionGroups& temporal,
                                   const AttentionGroups& spatial, typename Exec::Value patches,
                                   ForwardTrace* trace = nullptr) {
  auto x = ex.project(0, patches);
  x = ex.token_hook(x);
  x = ex.add_embeddings(x);
  for (std::size_t sub = 0; sub < cfg.sub_blocks(); ++sub) {
    const bool is_temporal = sub % 2 == 0;
    auto h = ex.layer_norm(sub, 0, x);
    auto q = ex.project(projection_index(cfg, sub, ProjectionKind::kQuery), h);
    auto k = ex.project(projection_index(cfg, sub, ProjectionKind::kKey), h);
    auto v = ex.project(projection_index(cfg, sub, ProjectionKind::kValue), h);
    auto mixed = ex.attention(q, k, v, is_temporal ? temporal : spatial);
    auto o = ex.project(projection_index(cfg, sub, ProjectionKind::kOutput), mixed);
    if (trace != nullptr) {
      trace->attention_mixes.push_back(ex.materialize(mixed));
      trace->attention_outputs.push_back(ex.materialize(o));
    }
    x = ex.add(x, o);
    h = ex.layer_norm(sub, 1, x);
    auto f = ex.project(projection_index(cfg, sub, ProjectionKind::kFeedForward1), h);
    f = ex.gelu(f);
    f = ex.project(projection_index(cfg, sub, ProjectionKind::kFeedForward2), f);
    x = ex.add(x, f);
  }
  if (trace != nullptr) trace->tokens = ex.materialize(x);
  return x;
}

template <class Exec>
typename Exec::Value regress(Exec& ex, const ModelConfig& cfg, typename Exec::Value tokens,
                             ForwardTrace* trace = nullptr) {
  auto pooled = ex.mean_rows(tokens);
  if (trace != nullptr) trace->pooled = ex.materialize(pooled);
  return ex.project(projection_count(cfg) - 1, pooled);
}

// Executor that records every op on a gradient tape. Parameters are
// registered once; `trainable` decides which ones receive gradients.
template <std::floating_point Real>
class TapeExecutor {
 public:
  using Value = Var<Real>;

  TapeExecutor(Tape<Real>& tape, const BasicEncoderModel<Real>& model,
               const std::function<bool(const std::string&)>& trainable)
      : tape_(tape), model_(model) {
    for (const auto& p : model.parameters()) params_.push_back(tape.parameter(*p.tensor, trainable(p.name)));
    const auto& cfg = model.config;
    const std::uint32_t patches = cfg.patches_per_channel();
    for (std::uint32_t r = 0; r < cfg.tokens(); ++r) {
      pos_index_.push_back(r % patches);
      chan_index_.push_back(r / patches);
    }
  }

  // Parameter handles in canonical order.
  const std::vector<Var<Real>>& params() const { return params_; }

  Value input(BasicTensor<Real> v) { return tape_.constant(std::move(v)); }

  Value project(std::size_t slot, Value x) {
    const auto [w, b] = projection_params(slot);
    return ag::linear(x, w, b);
  }

  std::function<Value(Value)> hook;
  Value token_hook(Value x) { return hook ? hook(x) : x; }

  Value add_embeddings(Value x) {
    x = ag::add_rows(x, params_[2], pos_index_);
    return ag::add_rows(x, params_[3], chan_index_);
  }

  Value layer_norm(std::size_t sub, int which, Value x) {
    const std::size_t base = 4 + sub * kPerBlock + (which == 0 ? 0 : 7);
    return ag::layer_norm(x, params_[base], params_[base + 1]);
  }

  Value attention(Value q, Value k, Value v, const AttentionGroups& groups) {
    return ag::grouped_attention(q, k, v, groups, model_.config.num_heads);
  }
  Value add(Value a, Value b) { return ag::add(a, b); }
  Value gelu(Value x) { return ag::gelu(x); }
  Value mean_rows(Value x) { return ag::mean_rows(x); }
  Tensor materialize(Value v) const { return v.value().template cast<float>(); }

  static constexpr std::size_t kPerBlock = 13;

 private:
  std::pair<Var<Real>, std::optional<Var<Real>>> projection_params(std::size_t slot) const;

  Tape<Real>& tape_;
  const BasicEncoderModel<Real>& model_;
  std::vector<Var<Real>> params_;
  std::vector<std::uint32_t> pos_index_, chan_index_;
};

template <std::floating_point Real>
std::pair<Var<Real>, std::optional<Var<Real>>> TapeExecutor<Real>::projection_params(std::size_t slot) const {
  const auto s = projection_slot(model_.config, slot);
  const std::size_t head_base = 4 + model_.config.sub_blocks() * kPerBlock;
  switch (s.kind) {
    case ProjectionKind::kPatchEmbed: return {params_[0], params_[1]};
    case ProjectionKind::kHead: return {params_[head_base], params_[head_base + 1]};
    default: break;
  }
  // Sub-block layout: ln1_gain ln1_bias wq wk wv wo bo ln2_gain ln2_bias w1 b1 w2 b2
  const std::size_t base = 4 + s.sub_block * kPerBlock;
  switch (s.kind) {
    case ProjectionKind::kQuery: return {params_[base + 2], std::nullopt};
    case ProjectionKind::kKey: return {params_[base + 3], std::nullopt};
    case ProjectionKind::kValue: return {params_[base + 4], std::nullopt};
    case ProjectionKind::kOutput: return {params_[base + 5], params_[base + 6]};
    case ProjectionKind::kFeedForward1: return {params_[base + 9], params_[base + 10]};
    case ProjectionKind::kFeedForward2: return {params_[base + 11], params_[base + 12]};
    default: break;
  }
  throw ContractError("unknown projection slot");
}

// Builds the per-sample graph and returns the [1, head_outputs] prediction.
template <std::floating_point Real>
Var<Real> forward_on_tape(TapeExecutor<Real>& ex, const ModelConfig& cfg, const AttentionGroups& temporal,
                          const AttentionGroups& spatial, const BasicTensor<Real>& patches) {
  auto x = ex.input(patches.reshaped({cfg.tokens(), cfg.patch_len}));
  auto tokens = encode_tokens(ex, cfg, temporal, spatial, x);
  return regress(ex, cfg, tokens);
}

}  // namespace bpq
