// Acceptance run: one PASS/FAIL line per criterion.
//
//   bpq_acceptance            all criteria
//   bpq_acceptance 1 2 11     selected criteria
//
// Exit status is non-zero when any selected criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "bpq/metrics.hpp"
#include "bpq/quantization.hpp"
#include "bpq/training.hpp"
#include "gradcheck.hpp"
#include "json.hpp"
#include "oracles.hpp"

using namespace bpq;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

fs::path scratch_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "bpq_acceptance";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// ---- 1 ----------------------------------------------------------------------

Outcome quant_formula_oracle() {
  std::mt19937_64 gen(1);
  std::uniform_real_distribution<double> u(-4.0, 4.0);
  std::vector<std::pair<double, double>> ranges = {{-1.0, 0.5}, {-0.5, 1.0}, {0.2, 1.0}, {-5.0, -1.0}, {-1e-3, 4e-3}};
  for (int i = 0; i < 15; ++i) {
    double a = u(gen), b = u(gen);
    ranges.emplace_back(std::min(a, b), std::max(a, b));
  }
  constexpr int kGrid = 100000;
  std::size_t formula_mismatch = 0, level_fail = 0, grid_fail = 0, sym_z = 0, asym_out = 0, checked = 0;
  double worst = 0.0;
  for (std::uint32_t bits : {4U, 8U}) {
    for (auto [lo, hi] : ranges) {
      for (Symmetry sy : {Symmetry::kSymmetric, Symmetry::kAsymmetric}) {
        const QuantScheme scheme{sy, Granularity::kPerTensor, 0, bits};
        const QuantParams p = qparams(sy, lo, hi, bits);
        const oracle::Params o = sy == Symmetry::kSymmetric ? oracle::symmetric(lo, hi, static_cast<int>(bits))
                                                            : oracle::asymmetric(lo, hi, static_cast<int>(bits));
        formula_mismatch += p.scale != o.scale || p.zero_point != o.zero;
        if (sy == Symmetry::kSymmetric) sym_z += p.zero_point != 0;
        // Every integer level survives a dequantize/quantize round trip.
        for (std::int32_t q = scheme.qmin(); q <= scheme.qmax(); ++q) {
          const double x = p.scale * (q - p.zero_point);
          level_fail += quantize_value(x, p, scheme) != q;
        }
        // Dense grid spanning the observed range and beyond it. "In range"
        // means inside the interval covered by the integer lattice.
        const double rep_lo = p.scale * (scheme.qmin() - p.zero_point);
        const double rep_hi = p.scale * (scheme.qmax() - p.zero_point);
        const double span = hi - lo;
        for (int i = 0; i <= kGrid; ++i) {
          const double x = lo - 0.25 * span + 1.5 * span * i / kGrid;
          const std::int32_t q = quantize_value(x, p, scheme);
          if (sy == Symmetry::kAsymmetric) asym_out += q < 0 || q > static_cast<std::int32_t>((1U << bits) - 1);
          if (x < rep_lo || x > rep_hi) continue;
          const double err = std::fabs(x - p.scale * (q - p.zero_point));
          worst = std::max(worst, err / p.scale);
          grid_fail += err > p.scale / 2 * (1 + 1e-12);
          ++checked;
        }
      }
    }
  }
  return {formula_mismatch == 0 && level_fail == 0 && grid_fail == 0 && sym_z == 0 && asym_out == 0,
          fmt("%zu in-range grid points, worst error %.6f step; formula mismatches %zu, level failures %zu, "
              "grid failures %zu, symmetric z!=0 %zu, asymmetric out of range %zu",
              checked, worst, formula_mismatch, level_fail, grid_fail, sym_z, asym_out)};
}

// ---- 2 ----------------------------------------------------------------------

Outcome worked_qparams() {
  const QuantParams s = qparams_symmetric(-1.0, 0.5, 8);
  const QuantParams a = qparams_asymmetric(-0.5, 1.0, 8);
  const bool pass = s.scale == 0.0078125 && s.zero_point == 0 && a.scale == 1.5 / 255 && a.zero_point == 85;
  return {pass, fmt("symmetric scale %.10g z %d; asymmetric scale %.10g z %d", s.scale, s.zero_point, a.scale,
                    a.zero_point)};
}

// ---- 3 ----------------------------------------------------------------------

Outcome per_channel_dominance() {
  std::size_t total = 0, dominated = 0;
  double sse_t = 0, sse_c = 0;
  std::mt19937_64 gen(3);
  for (int m = 0; m < 100; ++m) {
    const std::size_t rows = 16 + gen() % 113, cols = 16 + gen() % 113;
    const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor w({rows, cols});
    for (auto& v : w.storage()) v = static_cast<float>(u(gen));
    const QuantScheme pt{Symmetry::kSymmetric, Granularity::kPerTensor, 1, 8};
    const QuantScheme pc{Symmetry::kSymmetric, Granularity::kPerChannel, 1, 8};
    const Tensor dt = dequantize(quantize(w, minmax_params(w, pt), pt));
    const Tensor dc = dequantize(quantize(w, minmax_params(w, pc), pc));
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double et = std::fabs(static_cast<double>(w[i]) - dt[i]);
      const double ec = std::fabs(static_cast<double>(w[i]) - dc[i]);
      dominated += ec <= et;
      sse_t += et * et;
      sse_c += ec * ec;
      ++total;
    }
  }
  const double frac = static_cast<double>(dominated) / static_cast<double>(total);
  return {dominated == total, fmt("%.2f%% of %zu elements have per-channel error <= per-tensor error; "
                                  "aggregate squared error per-channel/per-tensor = %.3f",
                                  100 * frac, total, sse_c / sse_t)};
}

// ---- 4 ----------------------------------------------------------------------

Outcome model_gradcheck() {
  const ModelConfig cfg = ModelConfig::tiny();
  EncoderModel64 model = init_xavier(cfg, 4).cast<double>();
  Rng rng(44);
  for (auto& p : model.parameters()) {
    const bool gain = p.name.ends_with(".gain");
    const bool bias = p.name.ends_with(".bias");
    if (!gain && !bias) continue;
    for (auto& v : p.tensor->storage()) v = (gain ? 1.0 : 0.0) + rng.normal(0.0, 0.1);
  }
  const auto seg = generate_synthetic(1, 4).segments[0];
  const Tensor64 patches = tokenize(seg, cfg).cast<double>();
  const Tensor64 target({1, 2}, std::vector<double>{0.3, -0.7});
  const AttentionGroups temporal = temporal_groups(cfg), spatial = spatial_groups(cfg);
  const auto loss_of = [&](bool trainable, std::vector<Tensor64>* grads) {
    Tape<double> tape;
    TapeExecutor<double> ex(tape, model, [&](const std::string&) { return trainable; });
    const auto pred = forward_on_tape(ex, cfg, temporal, spatial, patches);
    const auto l = ag::squared_error(pred, target, 2.0);
    const double value = l.value()[0];
    if (grads != nullptr) {
      tape.backward(l);
      for (const auto& v : ex.params()) grads->push_back(*tape.grad(v));
    }
    return value;
  };
  std::vector<Tensor64> grads;
  loss_of(true, &grads);

  std::size_t tensors_ok = 0, coords = 0;
  double worst_rate = 1.0;
  std::string worst_name;
  auto params = model.parameters();
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor64& p = *params[t].tensor;
    std::vector<std::size_t> idx;
    if (p.size() <= 100) {
      for (std::size_t i = 0; i < p.size(); ++i) idx.push_back(i);
    } else {
      for (int i = 0; i < 100; ++i) idx.push_back(rng.index(p.size()));
    }
    std::size_t ok = 0;
    for (std::size_t i : idx) {
      const double saved = p[i];
      p[i] = saved + 1e-5;
      const double up = loss_of(false, nullptr);
      p[i] = saved - 1e-5;
      const double down = loss_of(false, nullptr);
      p[i] = saved;
      ok += gradcheck::relative_error(grads[t][i], (up - down) / 2e-5) < 1e-4;
    }
    coords += idx.size();
    const double rate = static_cast<double>(ok) / static_cast<double>(idx.size());
    tensors_ok += rate >= 0.99;
    if (rate < worst_rate) {
      worst_rate = rate;
      worst_name = params[t].name;
    }
  }
  return {tensors_ok == params.size(),
          fmt("%zu/%zu tensors with >=99%% agreement over %zu coordinates; lowest rate %.2f (%s)", tensors_ok,
              params.size(), coords, worst_rate, worst_name.c_str())};
}

// ---- 5 ----------------------------------------------------------------------

Outcome isolation_probes() {
  const ModelConfig cfg = ModelConfig::tiny();
  const EncoderModel model = init_xavier(cfg, 5);
  const std::size_t P = cfg.patches_per_channel(), D = cfg.embed_dim;
  const auto ds = generate_synthetic(10, 5);
  Rng rng(55);
  std::size_t leaks = 0, inert = 0, probes = 0;
  for (const auto& seg : ds.segments) {
    // Temporal: perturb the raw input of one channel; the first temporal
    // attention output of the other channel must not move.
    const Tensor patches = tokenize(seg, cfg);
    ForwardTrace base, pert;
    forward_patches(model, patches, &base);
    const std::size_t ch = rng.index(2);
    Tensor moved = patches;
    for (std::size_t i = ch * P * cfg.patch_len; i < (ch + 1) * P * cfg.patch_len; ++i)
      moved[i] += static_cast<float>(rng.normal());
    forward_patches(model, moved, &pert);
    const Tensor& a0 = base.attention_outputs[0];
    const Tensor& a1 = pert.attention_outputs[0];
    bool changed = false;
    for (std::size_t r = 0; r < cfg.tokens(); ++r)
      for (std::size_t d = 0; d < D; ++d) {
        if (r / P == ch)
          changed = changed || a0.at(r, d) != a1.at(r, d);
        else
          leaks += a0.at(r, d) != a1.at(r, d);
      }
    inert += !changed;
    ++probes;

    // Spatial: perturb one patch position in both channels at the input of
    // the first spatial sub-block.
    const Tensor tokens = embed(patches, model).reshaped({cfg.tokens(), D});
    const std::size_t pos = rng.index(P);
    Tensor shifted = tokens;
    for (std::size_t c = 0; c < cfg.num_channels; ++c)
      for (std::size_t d = 0; d < D; ++d) shifted.at(c * P + pos, d) += static_cast<float>(rng.normal());
    const Tensor s0 = attention_sublayer(model, 1, tokens);
    const Tensor s1 = attention_sublayer(model, 1, shifted);
    changed = false;
    for (std::size_t r = 0; r < cfg.tokens(); ++r)
      for (std::size_t d = 0; d < D; ++d) {
        if (r % P == pos)
          changed = changed || s0.at(r, d) != s1.at(r, d);
        else
          leaks += s0.at(r, d) != s1.at(r, d);
      }
    inert += !changed;
    ++probes;
  }
  return {leaks == 0 && inert == 0,
          fmt("%zu probes; %zu non-zero deltas at isolated coordinates; %zu probes with no effect on their own group",
              probes, leaks, inert)};
}

// ---- 6 ----------------------------------------------------------------------

Outcome frozen_identity() {
  const ModelConfig cfg = ModelConfig::tiny();
  const auto parts = split(generate_synthetic(200, 6), SplitSpec{});
  TrainOptions o;
  o.epochs = 5;
  o.seed = 6;
  o.backbone = BackboneMode::kFrozen;
  const EncoderModel init = initial_model(cfg, o);
  const auto trained = train(init, parts.train, parts.val, o).model;
  const auto trainable = trainable_set(init, BackboneMode::kFrozen);
  std::size_t backbone = 0, identical = 0, edge_moved = 0;
  const auto before = init.parameters();
  const auto after = trained.parameters();
  for (std::size_t i = 0; i < before.size(); ++i) {
    const bool same = std::memcmp(before[i].tensor->raw(), after[i].tensor->raw(),
                                  before[i].tensor->size() * sizeof(float)) == 0;
    if (trainable.count(before[i].name) != 0) {
      edge_moved += !same;
      continue;
    }
    ++backbone;
    identical += same;
  }
  return {identical == backbone && edge_moved == trainable.size(),
          fmt("%zu/%zu backbone tensors byte-identical after 5 epochs; %zu/%zu trainable tensors updated", identical,
              backbone, edge_moved, trainable.size())};
}

// ---- 7 (shared with 9, 10) --------------------------------------------------

struct Learnability {
  DatasetSplit parts;
  EncoderModel model;
  EvalReport report;
};

const Learnability& learned() {
  static std::optional<Learnability> cache;
  if (cache) return *cache;
  Learnability l;
  l.parts = split(generate_synthetic(2000, 7), SplitSpec{});
  PretextOptions po;
  po.seed = 7;
  const fs::path pre_path = scratch_dir() / "learnability_pretext.bpm";
  save_model(pretrain_pretext(ModelConfig::tiny(), po).model, pre_path);
  TrainOptions o;
  o.epochs = 60;
  o.seed = 1;
  o.pretrained = pre_path;
  l.model = train(initial_model(ModelConfig::tiny(), o), l.parts.train, l.parts.val, o, [](const EpochRecord& e) {
               if (e.epoch % 10 == 0)
                 std::printf("      epoch %u: val loss %.4f, MAE %.2f / %.2f mmHg\n", e.epoch, e.val_loss,
                             e.val_mae_sbp, e.val_mae_dbp);
               std::fflush(stdout);
             }).model;
  l.report = evaluate(l.model, l.parts.test, l.model.target_norm);
  cache = std::move(l);
  return *cache;
}

Outcome end_to_end() {
  const auto& l = learned();
  return {l.report.sbp.r2 >= 0.9 && l.report.dbp.r2 >= 0.9,
          fmt("pretext-initialized, test R2 SBP %.4f, DBP %.4f (MAE %.2f / %.2f mmHg, %llu segments)", l.report.sbp.r2, l.report.dbp.r2,
              l.report.sbp.mae, l.report.dbp.mae, static_cast<unsigned long long>(l.report.segment_count))};
}

// ---- 8 ----------------------------------------------------------------------

constexpr std::size_t kTransferSegments = 600;
constexpr std::uint32_t kTransferEpochs = 8;

Outcome transfer_ordering() {
  const ModelConfig cfg = ModelConfig::tiny();
  PretextOptions po;
  po.seed = 8;
  const auto pre = pretrain_pretext(cfg, po);
  const fs::path pre_path = scratch_dir() / "pretext.bpm";
  save_model(pre.model, pre_path);
  const auto parts = split(generate_synthetic(kTransferSegments, 8), SplitSpec{});

  int pre_wins = 0, unfrozen_wins = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto run = [&](bool pretrained, BackboneMode mode) {
      TrainOptions o;
      o.epochs = kTransferEpochs;
      o.seed = seed;
      o.backbone = mode;
      if (pretrained) o.pretrained = pre_path;
      const auto h = train(initial_model(cfg, o), parts.train, parts.val, o).history;
      return h.epochs.back().val_mae_sbp + h.epochs.back().val_mae_dbp;
    };
    const double scratch = run(false, BackboneMode::kUnfrozen);
    const double unfrozen = run(true, BackboneMode::kUnfrozen);
    const double frozen = run(true, BackboneMode::kFrozen);
    pre_wins += unfrozen <= scratch;
    unfrozen_wins += unfrozen <= frozen;
    std::printf("      seed %llu: val MAE (SBP+DBP) scratch %.3f, pretrained unfrozen %.3f, pretrained frozen %.3f\n",
                static_cast<unsigned long long>(seed), scratch, unfrozen, frozen);
    std::fflush(stdout);
  }
  return {pre_wins >= 8 && unfrozen_wins >= 8,
          fmt("pretrained <= scratch on %d/10 pairs, unfrozen <= frozen on %d/10 pairs", pre_wins, unfrozen_wins)};
}

// ---- 9 ----------------------------------------------------------------------

Outcome quantized_gap() {
  const auto& l = learned();
  const auto& norm = l.model.target_norm;
  const EvalReport dyn = evaluate(convert(l.model, QuantMode::kDynamic), l.parts.test, norm);
  const double dyn_sbp = l.report.sbp.r2 - dyn.sbp.r2, dyn_dbp = l.report.dbp.r2 - dyn.dbp.r2;
  int static_worse = 0;
  double static_mean = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    // Each seed draws its own 64-segment calibration subset.
    std::vector<std::size_t> order(l.parts.train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(mix_seed(seed, 0xca1bULL));
    for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
    SegmentDataset calib;
    for (std::size_t i = 0; i < 64; ++i) calib.segments.push_back(l.parts.train.segments[order[i]]);
    const Calibration cal = calibrate_static(l.model, calib, ObserverKind::kMinMax);
    const EvalReport st = evaluate(convert(l.model, QuantMode::kStatic, {}, &cal), l.parts.test, norm);
    const double deg = (l.report.sbp.r2 - st.sbp.r2) + (l.report.dbp.r2 - st.dbp.r2);
    static_mean += deg / 10;
    static_worse += deg >= dyn_sbp + dyn_dbp;
  }
  return {dyn_sbp <= 0.01 && dyn_dbp <= 0.01 && static_worse >= 7,
          fmt("dynamic R2 drop SBP %.5f, DBP %.5f; static (MinMax) drop >= dynamic on %d/10 calibration seeds "
              "(mean summed static drop %.5f)",
              dyn_sbp, dyn_dbp, static_worse, static_mean)};
}

// ---- 10 ---------------------------------------------------------------------

Outcome compression() {
  const ModelConfig cfg = ModelConfig::tiny();
  const EncoderModel model = init_xavier(cfg, 10);
  const auto calib = generate_synthetic(8, 10);
  const Calibration cal = calibrate_static(model, calib);
  const QuantizedModel dyn = convert(model, QuantMode::kDynamic);
  const QuantizedModel st = convert(model, QuantMode::kStatic, {}, &cal);
  const std::uint64_t fb = encode_model(model).size();
  const std::uint64_t db = encode_quantized(dyn).size(), sb = encode_quantized(st).size();
  const bool exact = fb == model_size_bytes(model) && db == model_size_bytes(dyn) && sb == model_size_bytes(st);
  const double rd = reduction_factor(fb, db), rs = reduction_factor(fb, sb);
  return {exact && rd >= 3.5 && rs >= 3.5,
          fmt("float %llu B, dynamic %llu B (RF %.3f), static %llu B (RF %.3f); byte accounting %s",
              static_cast<unsigned long long>(fb), static_cast<unsigned long long>(db), rd,
              static_cast<unsigned long long>(sb), rs, exact ? "exact" : "MISMATCH")};
}

// ---- 11 ---------------------------------------------------------------------

bool close(double a, double b) { return std::fabs(a - b) <= 1e-6 * std::max(1.0, std::fabs(b)); }

std::vector<double> with_counts(std::initializer_list<std::pair<int, double>> spec) {
  std::vector<double> e;
  int sign = 1;
  for (auto [count, value] : spec)
    for (int i = 0; i < count; ++i, sign = -sign) e.push_back(sign * value);
  return e;
}

Outcome metrics_oracle() {
  std::mt19937_64 gen(11);
  std::size_t mismatches = 0;
  for (int v = 0; v < 1000; ++v) {
    const std::size_t n = 2 + gen() % 300;
    std::normal_distribution<double> target(110, 15), noise(static_cast<double>(gen() % 11) - 5,
                                                            0.5 + static_cast<double>(gen() % 200) / 10);
    std::vector<double> y(n), p(n), e(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[i] = target(gen);
      p[i] = y[i] - noise(gen);
      e[i] = y[i] - p[i];
    }
    const TargetMetrics m = target_metrics(y, p);
    mismatches += !close(m.mae, oracle::mae(e)) || !close(m.sd, oracle::sd(e)) || !close(m.r2, oracle::r2(y, p)) ||
                  !close(m.bias, oracle::mean(e)) || static_cast<char>(m.bhs) != oracle::bhs(e) ||
                  m.aami_pass != oracle::aami(e);
  }
  std::size_t boundary_fail = 0;
  boundary_fail += bhs_grade(with_counts({{60, 5.0}, {25, 10.0}, {10, 15.0}, {5, 30.0}})) != BhsGrade::kA;
  boundary_fail += bhs_grade(with_counts({{50, 5.0}, {25, 10.0}, {15, 15.0}, {10, 30.0}})) != BhsGrade::kB;
  boundary_fail += bhs_grade(with_counts({{40, 5.0}, {25, 10.0}, {20, 15.0}, {15, 30.0}})) != BhsGrade::kC;
  boundary_fail += bhs_grade(with_counts({{39, 5.0}, {26, 10.0}, {20, 15.0}, {15, 30.0}})) != BhsGrade::kD;
  boundary_fail += bhs_grade(with_counts({{40, 5.0}, {24, 10.0}, {21, 15.0}, {15, 30.0}})) != BhsGrade::kD;
  boundary_fail += bhs_grade(with_counts({{40, 5.0}, {25, 10.0}, {19, 15.0}, {16, 30.0}})) != BhsGrade::kD;
  boundary_fail += !aami_check(5.0, 7.9);
  boundary_fail += !aami_check(-5.0, 0.0);
  boundary_fail += aami_check(0.0, 8.0);
  boundary_fail += aami_check(5.0001, 1.0);
  const std::vector<double> bias5(50, 5.0);
  boundary_fail += !aami_check(bias5);
  return {mismatches == 0 && boundary_fail == 0,
          fmt("%zu/1000 random vectors disagree with the oracle; %zu boundary cases wrong", mismatches, boundary_fail)};
}

// ---- 12 ---------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

Outcome cli_determinism() {
  const std::vector<std::string> steps = {
      "gen-data --n 200 --seed 12 --out d.bpseg",
      "train --data d.bpseg --epochs 3 --seed 12 --out m.bpm",
      "quantize --model m.bpm --mode dynamic --out qd.bpq",
      "quantize --model m.bpm --mode static --observer histogram --calib d.bpseg --calib-count 32 --out qs.bpq",
      "eval --model m.bpm --data d.bpseg --split test --out rf.json",
      "eval --model qs.bpq --data d.bpseg --split test --out rs.json",
  };
  const std::vector<std::string> artifacts = {"d.bpseg", "m.bpm",   "m.bpm.history.jsonl", "qd.bpq", "qs.bpq",
                                              "rf.json", "rf.md",   "rs.json",             "rs.md"};
  for (const char* run : {"run_a", "run_b"}) {
    const fs::path dir = scratch_dir() / run;
    fs::create_directories(dir);
    for (const auto& s : steps) {
      const std::string cmd =
          "cd '" + dir.string() + "' && BPQ_THREADS=1 '" BPQ_CLI_PATH "' " + s + " > /dev/null 2>> cli.log";
      if (std::system(cmd.c_str()) != 0) return {false, "command failed: bpq " + s};
    }
  }
  std::size_t identical = 0;
  std::string differing;
  for (const auto& a : artifacts) {
    const auto x = slurp(scratch_dir() / "run_a" / a), y = slurp(scratch_dir() / "run_b" / a);
    if (!x.empty() && x == y)
      ++identical;
    else
      differing += " " + a;
  }
  // Manifests differ only by wall-clock duration.
  std::size_t manifests = 0;
  for (const auto& a : {"d.bpseg", "m.bpm", "qd.bpq", "qs.bpq", "rf.json", "rs.json"}) {
    auto x = nlohmann::json::parse(slurp(scratch_dir() / "run_a" / (std::string(a) + ".manifest.json")));
    auto y = nlohmann::json::parse(slurp(scratch_dir() / "run_b" / (std::string(a) + ".manifest.json")));
    x.erase("duration_s");
    y.erase("duration_s");
    if (x == y)
      ++manifests;
    else
      differing += std::string(" ") + a + ".manifest.json";
  }
  return {identical == artifacts.size() && manifests == 6,
          fmt("%zu/%zu outputs byte-identical, %zu/6 manifests identical apart from duration%s%s", identical,
              artifacts.size(), manifests, differing.empty() ? "" : "; differing:", differing.c_str())};
}

struct Criterion {
  int id;
  const char* name;
  double limit_s;  // 0 when the runtime is not bounded separately
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  const std::vector<Criterion> all = {
      {1, "quantization formula oracle", 10, quant_formula_oracle},
      {2, "worked qparam values", 0, worked_qparams},
      {3, "per-channel dominance", 5, per_channel_dominance},
      {4, "gradient check", 120, model_gradcheck},
      {5, "attention isolation probes", 30, isolation_probes},
      {6, "frozen-backbone bit-identity", 120, frozen_identity},
      {7, "end-to-end learnability", 1200, end_to_end},
      {8, "transfer ordering", 7200, transfer_ordering},
      {9, "quantized-accuracy gap", 600, quantized_gap},
      {10, "compression factor", 1, compression},
      {11, "clinical metrics oracle", 5, metrics_oracle},
      {12, "CLI determinism", 1200, cli_determinism},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  int failures = 0;
  for (const auto& c : all) {
    if (!selected.empty() && selected.count(c.id) == 0) continue;
    // Shared training is charged to criterion 7, not to its consumers.
    if (c.id == 9) learned();
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = c.limit_s == 0 || secs <= c.limit_s;
    const bool pass = o.pass && in_time;
    failures += !pass;
    std::printf("%s  [%2d] %s: %s (%.1f s%s)\n", pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(), secs,
                in_time ? "" : ", over time limit");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
