#include <cmath>
#include <filesystem>

#include "bpq/errors.hpp"
#include "bpq/model.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace bpq;

namespace {

// Closed form written out independently of parameter_shapes().
std::uint64_t hand_count(const ModelConfig& c) {
  const std::uint64_t d = c.embed_dim, h = c.embed_dim * c.mlp_ratio, p = c.seq_len / c.patch_len;
  const std::uint64_t embed = c.patch_len * d + d + p * d + c.num_channels * d;
  const std::uint64_t sub = 2 * d + 3 * d * d + d * d + d + 2 * d + d * h + h + h * d + d;
  return embed + 2 * c.num_block_pairs * sub + d * c.head_outputs + c.head_outputs;
}

ModelConfig micro() {
  ModelConfig c = ModelConfig::tiny();
  c.embed_dim = 16;
  c.num_heads = 2;
  c.num_block_pairs = 1;
  c.mlp_ratio = 2;
  return c;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = ModelConfig::tiny();
  CHECK_NOTHROW(c.validate());
  CHECK(c.patches_per_channel() == 50);
  CHECK(c.tokens() == 100);
  c.patch_len = 125;
  CHECK(c.patches_per_channel() == 10);
  c.patch_len = 24;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.num_heads = 5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = ModelConfig::tiny();
  c.num_block_pairs = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(size_tag_from_string("huge"), ConfigError);
}

TEST_CASE("parameter count: closed form, hand computation and serialized size") {
  CHECK(count_params(ModelConfig::tiny()) == 204290);
  for (SizeTag tag : {SizeTag::kTiny, SizeTag::kSmall, SizeTag::kMedium, SizeTag::kLarge}) {
    const ModelConfig c = ModelConfig::preset(tag);
    CHECK(count_params(c) == hand_count(c));
    std::uint64_t total = 0;
    for (const auto& [name, shape] : parameter_shapes(c)) total += shape_volume(shape);
    CHECK(total == count_params(c));
  }
  const EncoderModel m = make_model(ModelConfig::tiny());
  std::uint64_t elements = 0;
  for (const auto& p : m.parameters()) elements += p.tensor->size();
  CHECK(elements == 204290);
  CHECK(m.parameters().size() == 58);
  // The published sizes are met to within 5%.
  CHECK(std::fabs(static_cast<double>(count_params(ModelConfig::small())) / 3.58e6 - 1) < 0.05);
  CHECK(std::fabs(static_cast<double>(count_params(ModelConfig::medium())) / 39.95e6 - 1) < 0.05);
  CHECK(std::fabs(static_cast<double>(count_params(ModelConfig::large())) / 85.15e6 - 1) < 0.05);
}

TEST_CASE("tokenize layout and untokenize identity") {
  const auto seg = generate_synthetic(1, 4).segments[0];
  const Tensor p = tokenize(seg, ModelConfig::tiny());
  CHECK(p.shape() == Shape{2, 50, 25});
  CHECK(p[0] == seg.ecg[0]);
  CHECK(p[3 * 25 + 7] == seg.ecg[3 * 25 + 7]);
  CHECK(p[50 * 25 + 49 * 25 + 24] == seg.ppg[1249]);
  const auto back = untokenize(p);
  CHECK(back[0] == seg.ecg);
  CHECK(back[1] == seg.ppg);
  ModelConfig bad = ModelConfig::tiny();
  bad.patch_len = 24;
  CHECK_THROWS_AS(tokenize(seg, bad), ConfigError);
}

TEST_CASE("attention groups: temporal per channel, spatial per position") {
  const ModelConfig c = ModelConfig::tiny();
  const auto t = temporal_groups(c), s = spatial_groups(c);
  REQUIRE(t.members.size() == 2);
  REQUIRE(s.members.size() == 50);
  for (std::size_t ch = 0; ch < 2; ++ch)
    for (auto r : t.members[ch]) CHECK(r / 50 == ch);
  for (std::size_t p = 0; p < 50; ++p) {
    REQUIRE(s.members[p].size() == 2);
    for (auto r : s.members[p]) CHECK(r % 50 == p);
  }
}

TEST_CASE("xavier init: bounds, variance, zero biases, determinism") {
  const ModelConfig c = ModelConfig::tiny();
  const EncoderModel m = init_xavier(c, 3);
  CHECK(init_xavier(c, 3).parameters().size() == m.parameters().size());
  const auto a = encode_model(m), b = encode_model(init_xavier(c, 3));
  CHECK(a == b);
  CHECK_FALSE(a == encode_model(init_xavier(c, 4)));
  for (std::size_t slot = 0; slot < projection_count(c); ++slot) {
    const Tensor& w = m.projection_weight(slot);
    const double fan = static_cast<double>(w.dim(0) + w.dim(1));
    const double bound = std::sqrt(6.0 / fan);
    std::vector<double> v;
    for (float x : w.data()) {
      CHECK(std::fabs(x) <= bound);
      v.push_back(x);
    }
    if (w.size() >= 4096) CHECK(oracle::sd(v) * oracle::sd(v) == doctest::Approx(2.0 / fan).epsilon(0.1));
    if (const Tensor* bias = m.projection_bias(slot))
      for (float x : bias->data()) CHECK(x == 0.0F);
  }
  for (const auto& blk : m.blocks)
    for (float g : blk.ln1_gain.data()) CHECK(g == 1.0F);
}

TEST_CASE("embedding is affine in the patch values") {
  const EncoderModel m = init_xavier(micro(), 5);
  const auto seg = generate_synthetic(1, 4).segments[0];
  const Tensor x = tokenize(seg, m.config);
  const Tensor zero(x.shape());
  Tensor scaled = x;
  for (auto& v : scaled.storage()) v *= 3.0F;
  const Tensor e0 = embed(zero, m), e1 = embed(x, m), e3 = embed(scaled, m);
  CHECK(e1.shape() == Shape{2, 50, 16});
  for (std::size_t i = 0; i < e1.size(); ++i) CHECK(e3[i] - e0[i] == doctest::Approx(3.0 * (e1[i] - e0[i])).epsilon(1e-4));
  const EncoderModel z = make_model(m.config);
  const Tensor ez = embed(zero, z);
  for (float v : ez.data()) CHECK(v == 0.0F);
}

TEST_CASE("forward: shape, determinism, batch permutation equivariance") {
  const EncoderModel m = init_xavier(micro(), 6);
  auto ds = generate_synthetic(4, 5);
  const Tensor y = forward(m, ds.segments);
  CHECK(y.shape() == Shape{4, 2});
  CHECK(forward(m, ds.segments) == y);
  std::swap(ds.segments[0], ds.segments[3]);
  const Tensor z = forward(m, ds.segments);
  CHECK(z.at(0, 0) == y.at(3, 0));
  CHECK(z.at(3, 1) == y.at(0, 1));
  CHECK(z.at(1, 0) == y.at(1, 0));
}

TEST_CASE("float and double paths agree") {
  const EncoderModel m = init_xavier(micro(), 7);
  const auto seg = generate_synthetic(1, 6).segments[0];
  const Tensor patches = tokenize(seg, m.config);
  const Tensor yf = forward_patches(m, patches);
  const EncoderModel64 m64 = m.cast<double>();
  Tape<double> tape;
  TapeExecutor<double> ex(tape, m64, [](const std::string&) { return false; });
  const auto y64 = forward_on_tape(ex, m.config, temporal_groups(m.config), spatial_groups(m.config),
                                   patches.cast<double>());
  for (std::size_t i = 0; i < 2; ++i) CHECK(yf[i] == doctest::Approx(y64.value()[i]).epsilon(1e-4));
}

TEST_CASE("attention isolation probes") {
  const EncoderModel m = init_xavier(micro(), 8);
  const ModelConfig& c = m.config;
  const auto seg = generate_synthetic(1, 9).segments[0];
  const Tensor base = embed(tokenize(seg, c), m).reshaped({c.tokens(), c.embed_dim});
  const Tensor t0 = attention_sublayer(m, 0, base);
  const Tensor s0 = attention_sublayer(m, 1, base);

  // Temporal: perturb channel 1 tokens only.
  Tensor pert = base;
  for (std::size_t r = 50; r < 100; ++r)
    for (std::size_t d = 0; d < c.embed_dim; ++d) pert.at(r, d) += 0.5F * static_cast<float>(d % 3) - 0.3F;
  const Tensor t1 = attention_sublayer(m, 0, pert);
  for (std::size_t r = 0; r < 50; ++r)
    for (std::size_t d = 0; d < c.embed_dim; ++d) CHECK(t1.at(r, d) == t0.at(r, d));
  bool moved = false;
  for (std::size_t r = 50; r < 100; ++r) moved = moved || t1.at(r, 0) != t0.at(r, 0);
  CHECK(moved);

  // Spatial: perturb position 7 in both channels.
  Tensor pos = base;
  for (std::size_t d = 0; d < c.embed_dim; ++d) {
    pos.at(7, d) += 1.0F;
    pos.at(57, d) -= 1.0F;
  }
  const Tensor s1 = attention_sublayer(m, 1, pos);
  for (std::size_t r = 0; r < 100; ++r) {
    if (r % 50 == 7) continue;
    for (std::size_t d = 0; d < c.embed_dim; ++d) CHECK(s1.at(r, d) == s0.at(r, d));
  }
}

TEST_CASE("model serialization round trip and corruption") {
  EncoderModel m = init_xavier(micro(), 9);
  m.target_norm = {120, 14, 76, 8};
  const auto bytes = encode_model(m);
  const EncoderModel back = decode_model(bytes);
  CHECK(back.config == m.config);
  CHECK(back.target_norm == m.target_norm);
  CHECK(encode_model(back) == bytes);
  const auto ds = generate_synthetic(2, 1);
  CHECK(forward(back, ds.segments) == forward(m, ds.segments));

  const auto dir = std::filesystem::temp_directory_path() / "bpq_unit";
  std::filesystem::create_directories(dir);
  save_model(m, dir / "m.bpm");
  CHECK(encode_model(load_model(dir / "m.bpm")) == bytes);

  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  CHECK_THROWS_AS(decode_model(truncated), ParseError);
  auto magic = bytes;
  magic[1] = 'Z';
  CHECK_THROWS_AS(decode_model(magic), ParseError);
  auto trailing = bytes;
  trailing.push_back(1);
  CHECK_THROWS_AS(decode_model(trailing), ParseError);
}

TEST_CASE("projection slots enumerate embed, six per sub-block, head") {
  const ModelConfig c = ModelConfig::tiny();
  CHECK(projection_count(c) == 26);
  CHECK(projection_slot(c, 0).kind == ProjectionKind::kPatchEmbed);
  CHECK(projection_slot(c, 25).kind == ProjectionKind::kHead);
  CHECK(projection_index(c, 2, ProjectionKind::kKey) == 1 + 2 * 6 + 1);
  const auto s = projection_slot(c, 1 + 3 * 6 + 5);
  CHECK(s.kind == ProjectionKind::kFeedForward2);
  CHECK(s.sub_block == 3);
}
