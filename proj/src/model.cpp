#include "bpq/model.hpp"

#include <cmath>

#include "bpq/byte_io.hpp"
#include "bpq/random.hpp"

namespace bpq {
namespace {

constexpr char kModelMagic[] = "BPMDL1";
constexpr std::uint8_t kModelVersion = 1;

}  // namespace

const char* to_string(SizeTag tag) {
  switch (tag) {
    case SizeTag::kTiny: return "tiny";
    case SizeTag::kSmall: return "small";
    case SizeTag::kMedium: return "medium";
    case SizeTag::kLarge: return "large";
  }
  return "unknown";
}

SizeTag size_tag_from_string(const std::string& name) {
  if (name == "tiny") return SizeTag::kTiny;
  if (name == "small") return SizeTag::kSmall;
  if (name == "medium") return SizeTag::kMedium;
  if (name == "large") return SizeTag::kLarge;
  throw ConfigError("unknown model size '" + name + "' (expected tiny|small|medium|large)");
}

ModelConfig ModelConfig::tiny() { return ModelConfig{}; }

ModelConfig ModelConfig::small() {
  ModelConfig c;
  c.embed_dim = 272;
  c.num_heads = 8;
  c.size_tag = SizeTag::kSmall;
  return c;
}

ModelConfig ModelConfig::medium() {
  ModelConfig c;
  c.embed_dim = 576;
  c.num_block_pairs = 5;
  c.num_heads = 8;
  c.size_tag = SizeTag::kMedium;
  return c;
}

ModelConfig ModelConfig::large() {
  ModelConfig c;
  c.embed_dim = 768;
  c.num_block_pairs = 6;
  c.num_heads = 12;
  c.size_tag = SizeTag::kLarge;
  return c;
}

ModelConfig ModelConfig::preset(SizeTag tag) {
  switch (tag) {
    case SizeTag::kTiny: return tiny();
    case SizeTag::kSmall: return small();
    case SizeTag::kMedium: return medium();
    case SizeTag::kLarge: return large();
  }
  throw ConfigError("unknown size tag");
}

void ModelConfig::validate() const {
  if (num_channels != 2) throw ConfigError("num_channels must be 2 (ECG, PPG)");
  if (head_outputs != 2) throw ConfigError("head_outputs must be 2 (SBP, DBP)");
  if (patch_len == 0 || seq_len == 0 || seq_len % patch_len != 0) {
    throw ConfigError("seq_len " + std::to_string(seq_len) + " is not a multiple of patch_len " +
                      std::to_string(patch_len));
  }
  if (embed_dim == 0 || num_heads == 0 || embed_dim % num_heads != 0) {
    throw ConfigError("embed_dim must be a positive multiple of num_heads");
  }
  if (num_block_pairs < 1) throw ConfigError("num_block_pairs must be at least 1");
  if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be at least 1");
}

std::size_t projection_count(const ModelConfig& cfg) { return 2 + 6 * std::size_t{cfg.sub_blocks()}; }

ProjectionSlot projection_slot(const ModelConfig& cfg, std::size_t index) {
  const std::size_t count = projection_count(cfg);
  if (index >= count) throw ContractError("projection slot out of range");
  if (index == 0) return {0, ProjectionKind::kPatchEmbed, 0};
  if (index == count - 1) return {index, ProjectionKind::kHead, 0};
  static constexpr ProjectionKind kOrder[] = {ProjectionKind::kQuery,  ProjectionKind::kKey,
                                              ProjectionKind::kValue,  ProjectionKind::kOutput,
                                              ProjectionKind::kFeedForward1, ProjectionKind::kFeedForward2};
  return {index, kOrder[(index - 1) % 6], (index - 1) / 6};
}

std::size_t projection_index(const ModelConfig& cfg, std::size_t sub_block, ProjectionKind kind) {
  switch (kind) {
    case ProjectionKind::kPatchEmbed: return 0;
    case ProjectionKind::kHead: return projection_count(cfg) - 1;
    case ProjectionKind::kQuery: return 1 + sub_block * 6;
    case ProjectionKind::kKey: return 2 + sub_block * 6;
    case ProjectionKind::kValue: return 3 + sub_block * 6;
    case ProjectionKind::kOutput: return 4 + sub_block * 6;
    case ProjectionKind::kFeedForward1: return 5 + sub_block * 6;
    case ProjectionKind::kFeedForward2: return 6 + sub_block * 6;
  }
  throw ContractError("unknown projection kind");
}

namespace {

std::string block_prefix(std::size_t sub) {
  return "blocks." + std::to_string(sub) + (sub % 2 == 0 ? ".temporal." : ".spatial.");
}

template <typename Model, typename Out>
void collect_parameters(Model& m, Out& out) {
  out.push_back({"patch_embed.weight", &m.patch_weight});
  out.push_back({"patch_embed.bias", &m.patch_bias});
  out.push_back({"pos_embedding", &m.pos_embedding});
  out.push_back({"channel_embedding", &m.channel_embedding});
  for (std::size_t i = 0; i < m.blocks.size(); ++i) {
    auto& b = m.blocks[i];
    const std::string p = block_prefix(i);
    out.push_back({p + "ln1.gain", &b.ln1_gain});
    out.push_back({p + "ln1.bias", &b.ln1_bias});
    out.push_back({p + "attn.wq", &b.wq});
    out.push_back({p + "attn.wk", &b.wk});
    out.push_back({p + "attn.wv", &b.wv});
    out.push_back({p + "attn.wo", &b.wo});
    out.push_back({p + "attn.bo", &b.bo});
    out.push_back({p + "ln2.gain", &b.ln2_gain});
    out.push_back({p + "ln2.bias", &b.ln2_bias});
    out.push_back({p + "ffn.w1", &b.w1});
    out.push_back({p + "ffn.b1", &b.b1});
    out.push_back({p + "ffn.w2", &b.w2});
    out.push_back({p + "ffn.b2", &b.b2});
  }
  out.push_back({"head.weight", &m.head_weight});
  out.push_back({"head.bias", &m.head_bias});
}

}  // namespace

template <std::floating_point Real>
std::vector<NamedTensor<Real>> BasicEncoderModel<Real>::parameters() {
  std::vector<NamedTensor<Real>> out;
  collect_parameters(*this, out);
  return out;
}

template <std::floating_point Real>
std::vector<NamedConstTensor<Real>> BasicEncoderModel<Real>::parameters() const {
  std::vector<NamedConstTensor<Real>> out;
  collect_parameters(*this, out);
  return out;
}

template <std::floating_point Real>
const BasicTensor<Real>& BasicEncoderModel<Real>::projection_weight(std::size_t slot) const {
  const auto s = projection_slot(config, slot);
  switch (s.kind) {
    case ProjectionKind::kPatchEmbed: return patch_weight;
    case ProjectionKind::kHead: return head_weight;
    case ProjectionKind::kQuery: return blocks[s.sub_block].wq;
    case ProjectionKind::kKey: return blocks[s.sub_block].wk;
    case ProjectionKind::kValue: return blocks[s.sub_block].wv;
    case ProjectionKind::kOutput: return blocks[s.sub_block].wo;
    case ProjectionKind::kFeedForward1: return blocks[s.sub_block].w1;
    case ProjectionKind::kFeedForward2: return blocks[s.sub_block].w2;
  }
  throw ContractError("unknown projection kind");
}

template <std::floating_point Real>
const BasicTensor<Real>* BasicEncoderModel<Real>::projection_bias(std::size_t slot) const {
  const auto s = projection_slot(config, slot);
  switch (s.kind) {
    case ProjectionKind::kPatchEmbed: return &patch_bias;
    case ProjectionKind::kHead: return &head_bias;
    case ProjectionKind::kOutput: return &blocks[s.sub_block].bo;
    case ProjectionKind::kFeedForward1: return &blocks[s.sub_block].b1;
    case ProjectionKind::kFeedForward2: return &blocks[s.sub_block].b2;
    default: return nullptr;
  }
}

template <std::floating_point Real>
std::string BasicEncoderModel<Real>::projection_weight_name(std::size_t slot) const {
  const auto s = projection_slot(config, slot);
  const std::string p = block_prefix(s.sub_block);
  switch (s.kind) {
    case ProjectionKind::kPatchEmbed: return "patch_embed.weight";
    case ProjectionKind::kHead: return "head.weight";
    case ProjectionKind::kQuery: return p + "attn.wq";
    case ProjectionKind::kKey: return p + "attn.wk";
    case ProjectionKind::kValue: return p + "attn.wv";
    case ProjectionKind::kOutput: return p + "attn.wo";
    case ProjectionKind::kFeedForward1: return p + "ffn.w1";
    case ProjectionKind::kFeedForward2: return p + "ffn.w2";
  }
  throw ContractError("unknown projection kind");
}

template <std::floating_point Real>
std::string BasicEncoderModel<Real>::projection_bias_name(std::size_t slot) const {
  const auto s = projection_slot(config, slot);
  const std::string p = block_prefix(s.sub_block);
  switch (s.kind) {
    case ProjectionKind::kPatchEmbed: return "patch_embed.bias";
    case ProjectionKind::kHead: return "head.bias";
    case ProjectionKind::kOutput: return p + "attn.bo";
    case ProjectionKind::kFeedForward1: return p + "ffn.b1";
    case ProjectionKind::kFeedForward2: return p + "ffn.b2";
    default: return {};
  }
}

template <std::floating_point Real>
template <std::floating_point To>
BasicEncoderModel<To> BasicEncoderModel<Real>::cast() const {
  BasicEncoderModel<To> out;
  out.config = config;
  out.target_norm = target_norm;
  out.blocks.resize(blocks.size());
  auto dst = out.parameters();
  auto src = parameters();
  for (std::size_t i = 0; i < src.size(); ++i) *dst[i].tensor = src[i].tensor->template cast<To>();
  return out;
}

template struct BasicEncoderModel<float>;
template struct BasicEncoderModel<double>;
template BasicEncoderModel<double> BasicEncoderModel<float>::cast<double>() const;
template BasicEncoderModel<float> BasicEncoderModel<double>::cast<float>() const;
template BasicEncoderModel<float> BasicEncoderModel<float>::cast<float>() const;

std::vector<std::pair<std::string, Shape>> parameter_shapes(const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t d = cfg.embed_dim, h = cfg.hidden_dim();
  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("patch_embed.weight", Shape{cfg.patch_len, d});
  out.emplace_back("patch_embed.bias", Shape{d});
  out.emplace_back("pos_embedding", Shape{cfg.patches_per_channel(), d});
  out.emplace_back("channel_embedding", Shape{cfg.num_channels, d});
  for (std::size_t i = 0; i < cfg.sub_blocks(); ++i) {
    const std::string p = block_prefix(i);
    out.emplace_back(p + "ln1.gain", Shape{d});
    out.emplace_back(p + "ln1.bias", Shape{d});
    out.emplace_back(p + "attn.wq", Shape{d, d});
    out.emplace_back(p + "attn.wk", Shape{d, d});
    out.emplace_back(p + "attn.wv", Shape{d, d});
    out.emplace_back(p + "attn.wo", Shape{d, d});
    out.emplace_back(p + "attn.bo", Shape{d});
    out.emplace_back(p + "ln2.gain", Shape{d});
    out.emplace_back(p + "ln2.bias", Shape{d});
    out.emplace_back(p + "ffn.w1", Shape{d, h});
    out.emplace_back(p + "ffn.b1", Shape{h});
    out.emplace_back(p + "ffn.w2", Shape{h, d});
    out.emplace_back(p + "ffn.b2", Shape{d});
  }
  out.emplace_back("head.weight", Shape{d, cfg.head_outputs});
  out.emplace_back("head.bias", Shape{cfg.head_outputs});
  return out;
}

std::uint64_t count_params(const ModelConfig& cfg) {
  cfg.validate();
  const std::uint64_t d = cfg.embed_dim, h = cfg.hidden_dim();
  const std::uint64_t per_sub_block = 4 * d      // two layernorms
                                      + 4 * d * d + d  // q, k, v, o (+ output bias)
                                      + d * h + h + h * d + d;
  return cfg.sub_blocks() * per_sub_block + cfg.patch_len * d + d + std::uint64_t{cfg.patches_per_channel()} * d +
         std::uint64_t{cfg.num_channels} * d + d * cfg.head_outputs + cfg.head_outputs;
}

EncoderModel make_model(const ModelConfig& cfg) {
  EncoderModel m;
  m.config = cfg;
  m.blocks.resize(cfg.sub_blocks());
  auto shapes = parameter_shapes(cfg);
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) *params[i].tensor = Tensor(shapes[i].second);
  return m;
}

EncoderModel init_xavier(const ModelConfig& cfg, std::uint64_t seed) {
  EncoderModel m = make_model(cfg);
  auto params = m.parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& t = *params[i].tensor;
    const std::string& name = params[i].name;
    const bool is_gain = name.ends_with(".gain");
    if (t.rank() == 1) {
      t.fill(is_gain ? 1.0F : 0.0F);
      continue;
    }
    const double fan_in = static_cast<double>(t.dim(0)), fan_out = static_cast<double>(t.dim(1));
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    Rng rng(mix_seed(seed, i));
    for (auto& v : t.data()) v = static_cast<float>(rng.uniform(-bound, bound));
  }
  return m;
}

Tensor tokenize(const SignalSegment& segment, const ModelConfig& cfg) {
  cfg.validate();
  const std::size_t p_count = cfg.patches_per_channel(), len = cfg.patch_len;
  if (segment.ecg.size() != cfg.seq_len || segment.ppg.size() != cfg.seq_len) {
    throw ShapeError("segment length does not match seq_len " + std::to_string(cfg.seq_len));
  }
  Tensor out({cfg.num_channels, p_count, len});
  const std::vector<float>* channels[] = {&segment.ecg, &segment.ppg};
  for (std::size_t c = 0; c < 2; ++c)
    std::copy(channels[c]->begin(), channels[c]->end(), out.raw() + c * p_count * len);
  return out;
}

std::vector<std::vector<float>> untokenize(const Tensor& patches) {
  if (patches.rank() != 3) throw ShapeError("untokenize expects [C, P, patch_len]");
  const std::size_t per_channel = patches.dim(1) * patches.dim(2);
  std::vector<std::vector<float>> out(patches.dim(0));
  for (std::size_t c = 0; c < out.size(); ++c)
    out[c].assign(patches.raw() + c * per_channel, patches.raw() + (c + 1) * per_channel);
  return out;
}

AttentionGroups temporal_groups(const ModelConfig& cfg) {
  AttentionGroups g;
  const std::uint32_t p_count = cfg.patches_per_channel();
  for (std::uint32_t c = 0; c < cfg.num_channels; ++c) {
    auto& members = g.members.emplace_back();
    for (std::uint32_t p = 0; p < p_count; ++p) members.push_back(c * p_count + p);
  }
  return g;
}

AttentionGroups spatial_groups(const ModelConfig& cfg) {
  AttentionGroups g;
  const std::uint32_t p_count = cfg.patches_per_channel();
  for (std::uint32_t p = 0; p < p_count; ++p) {
    auto& members = g.members.emplace_back();
    for (std::uint32_t c = 0; c < cfg.num_channels; ++c) members.push_back(c * p_count + p);
  }
  return g;
}

FloatExecutor::FloatExecutor(const EncoderModel& model) : model_(model) {
  const std::uint32_t p_count = model.config.patches_per_channel();
  for (std::uint32_t r = 0; r < model.config.tokens(); ++r) {
    pos_index_.push_back(r % p_count);
    chan_index_.push_back(r / p_count);
  }
}

Tensor FloatExecutor::project(std::size_t slot, const Tensor& x) {
  if (on_project_input) on_project_input(slot, x);
  return bpq::linear(x, model_.projection_weight(slot), model_.projection_bias(slot));
}

Tensor FloatExecutor::add_embeddings(const Tensor& x) const {
  return bpq::add_rows(bpq::add_rows(x, model_.pos_embedding, pos_index_), model_.channel_embedding, chan_index_);
}

Tensor FloatExecutor::layer_norm(std::size_t sub, int which, const Tensor& x) const {
  const auto& b = model_.blocks.at(sub);
  return which == 0 ? bpq::layer_norm(x, b.ln1_gain, b.ln1_bias) : bpq::layer_norm(x, b.ln2_gain, b.ln2_bias);
}

Tensor FloatExecutor::attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionGroups& groups) const {
  return bpq::grouped_attention(q, k, v, groups, model_.config.num_heads);
}

Tensor embed(const Tensor& patches, const EncoderModel& model) {
  const auto& cfg = model.config;
  if (patches.rank() != 3 || patches.dim(0) != cfg.num_channels || patches.dim(1) != cfg.patches_per_channel() ||
      patches.dim(2) != cfg.patch_len) {
    throw ShapeError("embed: patches " + shape_to_string(patches.shape()) + " do not match the model config");
  }
  FloatExecutor ex(model);
  Tensor x = ex.project(0, patches.reshaped({cfg.tokens(), cfg.patch_len}));
  return ex.add_embeddings(x).reshaped({cfg.num_channels, cfg.patches_per_channel(), cfg.embed_dim});
}

Tensor forward_patches(const EncoderModel& model, const Tensor& patches, ForwardTrace* trace) {
  const auto& cfg = model.config;
  if (patches.size() != std::size_t{cfg.tokens()} * cfg.patch_len) throw ShapeError("forward: patch count mismatch");
  const AttentionGroups temporal = temporal_groups(cfg), spatial = spatial_groups(cfg);
  FloatExecutor ex(model);
  Tensor tokens = encode_tokens(ex, cfg, temporal, spatial, patches.reshaped({cfg.tokens(), cfg.patch_len}), trace);
  return regress(ex, cfg, tokens, trace);
}

Tensor forward(const EncoderModel& model, std::span<const SignalSegment> batch) {
  const auto& cfg = model.config;
  if (batch.empty()) throw EmptyDatasetError("forward: empty batch");
  Tensor out({batch.size(), cfg.head_outputs});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    Tensor pred = forward_patches(model, tokenize(batch[i], cfg));
    std::copy(pred.raw(), pred.raw() + cfg.head_outputs, out.raw() + i * cfg.head_outputs);
  }
  return out;
}

Tensor attention_sublayer(const EncoderModel& model, std::size_t sub_block, const Tensor& tokens) {
  const auto& cfg = model.config;
  if (sub_block >= cfg.sub_blocks()) throw ContractError("sub_block out of range");
  const Tensor x = tokens.reshaped({cfg.tokens(), cfg.embed_dim});
  FloatExecutor ex(model);
  const Tensor h = ex.layer_norm(sub_block, 0, x);
  const Tensor q = ex.project(projection_index(cfg, sub_block, ProjectionKind::kQuery), h);
  const Tensor k = ex.project(projection_index(cfg, sub_block, ProjectionKind::kKey), h);
  const Tensor v = ex.project(projection_index(cfg, sub_block, ProjectionKind::kValue), h);
  const AttentionGroups groups = sub_block % 2 == 0 ? temporal_groups(cfg) : spatial_groups(cfg);
  return ex.project(projection_index(cfg, sub_block, ProjectionKind::kOutput), ex.attention(q, k, v, groups));
}

void write_header_block(io::ByteWriter& w, const ModelConfig& cfg, const TargetNormalization& norm) {
  w.u32(cfg.num_channels);
  w.u32(cfg.seq_len);
  w.u32(cfg.patch_len);
  w.u32(cfg.embed_dim);
  w.u32(cfg.num_block_pairs);
  w.u32(cfg.num_heads);
  w.u32(cfg.mlp_ratio);
  w.u32(cfg.head_outputs);
  w.u32(static_cast<std::uint32_t>(cfg.size_tag));
  w.f64(norm.sbp_mean);
  w.f64(norm.sbp_sd);
  w.f64(norm.dbp_mean);
  w.f64(norm.dbp_sd);
}

void read_header_block(io::ByteReader& r, ModelConfig& cfg, TargetNormalization& norm) {
  cfg.num_channels = r.u32();
  cfg.seq_len = r.u32();
  cfg.patch_len = r.u32();
  cfg.embed_dim = r.u32();
  cfg.num_block_pairs = r.u32();
  cfg.num_heads = r.u32();
  cfg.mlp_ratio = r.u32();
  cfg.head_outputs = r.u32();
  const std::uint32_t tag = r.u32();
  if (tag > 3) throw ParseError(ParseErrorKind::kCorrupt, "unknown size tag " + std::to_string(tag));
  cfg.size_tag = static_cast<SizeTag>(tag);
  norm.sbp_mean = r.f64();
  norm.sbp_sd = r.f64();
  norm.dbp_mean = r.f64();
  norm.dbp_sd = r.f64();
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ParseError(ParseErrorKind::kCorrupt, std::string("invalid model config: ") + e.what());
  }
}

std::vector<std::uint8_t> encode_model(const EncoderModel& model) {
  io::ByteWriter w;
  w.bytes(std::string_view(kModelMagic, 6));
  w.u8(kModelVersion);
  w.u8(0);
  write_header_block(w, model.config, model.target_norm);
  for (const auto& p : model.parameters()) {
    w.u64(p.tensor->size());
    for (float v : p.tensor->data()) w.f32(v);
  }
  return w.take();
}

EncoderModel decode_model(const std::vector<std::uint8_t>& bytes) {
  io::ByteReader r(bytes);
  if (bytes.size() < 6 || r.bytes(6) != std::string_view(kModelMagic, 6)) {
    throw ParseError(ParseErrorKind::kBadMagic, "not a BPMDL1 model file");
  }
  const std::uint8_t version = r.u8();
  if (version != kModelVersion) throw ParseError(ParseErrorKind::kBadVersion, "model version " + std::to_string(version));
  r.u8();
  ModelConfig cfg;
  TargetNormalization norm;
  read_header_block(r, cfg, norm);
  EncoderModel m = make_model(cfg);
  m.target_norm = norm;
  for (const auto& p : m.parameters()) {
    const std::uint64_t len = r.u64();
    if (len != p.tensor->size()) {
      throw ParseError(ParseErrorKind::kCorrupt, p.name + ": expected " + std::to_string(p.tensor->size()) +
                                                     " elements, header says " + std::to_string(len));
    }
    for (auto& v : p.tensor->data()) v = r.f32();
  }
  if (r.remaining() != 0) throw ParseError(ParseErrorKind::kCorrupt, "trailing bytes after the last tensor");
  return m;
}

void save_model(const EncoderModel& model, const std::filesystem::path& path) {
  io::write_file(path, encode_model(model));
}

EncoderModel load_model(const std::filesystem::path& path) { return decode_model(io::read_file(path)); }

}  // namespace bpq
