#include "bpq/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "bpq/errors.hpp"
#include "bpq/random.hpp"
#include "json.hpp"

namespace bpq {
namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// Flat view over the tensors an optimizer updates.
struct ParamBlock {
  std::vector<Tensor*> tensors;
  std::vector<std::size_t> offsets;
  std::size_t total = 0;

  void add(Tensor* t) {
    tensors.push_back(t);
    offsets.push_back(total);
    total += t->size();
  }
};

class Adam {
 public:
  Adam(const ParamBlock& block, double lr) : block_(block), lr_(lr), m_(block.total), v_(block.total) {}

  void step(const std::vector<float>& grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < block_.tensors.size(); ++k) {
      float* p = block_.tensors[k]->raw();
      const std::size_t off = block_.offsets[k];
      for (std::size_t i = 0; i < block_.tensors[k]->size(); ++i) {
        const double g = grad[off + i];
        double& m = m_[off + i];
        double& v = v_[off + i];
        m = kBeta1 * m + (1.0 - kBeta1) * g;
        v = kBeta2 * v + (1.0 - kBeta2) * g * g;
        const double update = lr_ * (m / c1) / (std::sqrt(v / c2) + kAdamEps);
        p[i] = static_cast<float>(static_cast<double>(p[i]) - update);
      }
    }
  }

 private:
  const ParamBlock& block_;
  double lr_;
  std::vector<double> m_, v_;
  std::uint64_t t_ = 0;
};

// Runs fn(j, out) for each batch position j, writing per-sample gradients
// into separate buffers, then sums them in position order so the total does
// not depend on the thread count. Returns the summed per-sample losses.
template <class Fn>
double batch_gradient(std::size_t count, std::size_t total, std::uint32_t threads, std::vector<float>& buffers,
                      std::vector<float>& sum, Fn&& fn) {
  buffers.assign(count * total, 0.0F);
  std::vector<double> losses(count, 0.0);
  const std::size_t workers = std::min<std::size_t>(std::max<std::uint32_t>(threads, 1), count);
  auto work = [&](std::size_t w) {
    for (std::size_t j = w; j < count; j += workers) losses[j] = fn(j, buffers.data() + j * total);
  };
  if (workers <= 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&, w] {
        try {
          work(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }
  sum.assign(total, 0.0F);
  double loss_sum = 0.0;
  for (std::size_t j = 0; j < count; ++j) {
    const float* g = buffers.data() + j * total;
    for (std::size_t i = 0; i < total; ++i) sum[i] += g[i];
    loss_sum += losses[j];
  }
  return loss_sum;
}

void shuffle(std::vector<std::size_t>& order, std::uint64_t seed) {
  Rng rng(seed);
  for (std::size_t i = order.size(); i-- > 1;) std::swap(order[i], order[rng.index(i + 1)]);
}

// Copies the gradients of the listed tape handles into a flat buffer.
void gather_grads(const Tape<float>& tape, const std::vector<Var<float>>& handles, const ParamBlock& block,
                  float* out) {
  for (std::size_t k = 0; k < handles.size(); ++k) {
    if (const Tensor* g = tape.grad(handles[k])) std::copy(g->raw(), g->raw() + g->size(), out + block.offsets[k]);
  }
}

std::vector<Tensor> tokenize_all(const SegmentDataset& ds, const ModelConfig& cfg) {
  std::vector<Tensor> out;
  out.reserve(ds.size());
  for (const auto& s : ds.segments) out.push_back(tokenize(s, cfg).reshaped({cfg.tokens(), cfg.patch_len}));
  return out;
}

void check_stats(double mean, double sd) {
  if (!std::isfinite(mean) || !std::isfinite(sd)) throw ConfigError("target normalization is not finite");
  if (!(sd > 0.0)) throw ConfigError("target normalization SD must be positive");
}

}  // namespace

const char* to_string(BackboneMode mode) { return mode == BackboneMode::kFrozen ? "frozen" : "unfrozen"; }

BackboneMode backbone_mode_from_string(const std::string& name) {
  if (name == "frozen") return BackboneMode::kFrozen;
  if (name == "unfrozen") return BackboneMode::kUnfrozen;
  throw ConfigError("backbone mode must be frozen or unfrozen, got '" + name + "'");
}

void TrainOptions::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
}

std::set<std::string> trainable_set(const EncoderModel& model, BackboneMode mode) {
  std::set<std::string> out;
  for (const auto& p : model.parameters()) {
    const bool edge = p.name == "patch_embed.weight" || p.name == "patch_embed.bias" || p.name == "head.weight" ||
                      p.name == "head.bias";
    if (mode == BackboneMode::kUnfrozen || edge) out.insert(p.name);
  }
  return out;
}

double loss(const Tensor& predictions, const Tensor& targets) {
  if (predictions.shape() != targets.shape()) {
    throw ShapeError("loss shape mismatch " + shape_to_string(predictions.shape()) + " vs " +
                     shape_to_string(targets.shape()));
  }
  if (predictions.size() == 0) throw ShapeError("loss of an empty batch");
  double s = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = static_cast<double>(predictions[i]) - targets[i];
    s += d * d;
  }
  return s / static_cast<double>(predictions.size());
}

TargetNormalization fit_normalization(const SegmentDataset& ds) {
  if (ds.empty()) throw EmptyDatasetError("cannot fit normalization on an empty dataset");
  const double n = static_cast<double>(ds.size());
  double ms = 0, md = 0;
  for (const auto& s : ds.segments) {
    ms += s.sbp;
    md += s.dbp;
  }
  ms /= n;
  md /= n;
  double vs = 0, vd = 0;
  for (const auto& s : ds.segments) {
    vs += (s.sbp - ms) * (s.sbp - ms);
    vd += (s.dbp - md) * (s.dbp - md);
  }
  TargetNormalization norm;
  norm.sbp_mean = ms;
  norm.dbp_mean = md;
  // A constant target keeps unit scale instead of dividing by zero.
  norm.sbp_sd = vs > 0 ? std::sqrt(vs / n) : 1.0;
  norm.dbp_sd = vd > 0 ? std::sqrt(vd / n) : 1.0;
  return norm;
}

Tensor normalize_targets(const SegmentDataset& ds, const TargetNormalization& norm) {
  check_stats(norm.sbp_mean, norm.sbp_sd);
  check_stats(norm.dbp_mean, norm.dbp_sd);
  Tensor out({ds.size(), 2});
  for (std::size_t i = 0; i < ds.size(); ++i) {
    out[2 * i] = static_cast<float>((ds.segments[i].sbp - norm.sbp_mean) / norm.sbp_sd);
    out[2 * i + 1] = static_cast<float>((ds.segments[i].dbp - norm.dbp_mean) / norm.dbp_sd);
  }
  return out;
}

Tensor denormalize(const Tensor& predictions, const TargetNormalization& norm) {
  check_stats(norm.sbp_mean, norm.sbp_sd);
  check_stats(norm.dbp_mean, norm.dbp_sd);
  if (predictions.rank() != 2 || predictions.cols() != 2) {
    throw ShapeError("denormalize expects [n, 2], got " + shape_to_string(predictions.shape()));
  }
  Tensor out(predictions.shape());
  for (std::size_t i = 0; i < predictions.rows(); ++i) {
    out[2 * i] = static_cast<float>(predictions[2 * i] * norm.sbp_sd + norm.sbp_mean);
    out[2 * i + 1] = static_cast<float>(predictions[2 * i + 1] * norm.dbp_sd + norm.dbp_mean);
  }
  return out;
}

SignalSegment roll_segment(const SignalSegment& segment, std::size_t shift) {
  SignalSegment out = segment;
  for (auto* ch : {&out.ecg, &out.ppg}) {
    if (ch->empty()) continue;
    std::rotate(ch->begin(), ch->begin() + static_cast<std::ptrdiff_t>(shift % ch->size()), ch->end());
  }
  return out;
}

EncoderModel initial_model(const ModelConfig& cfg, const TrainOptions& opts) {
  cfg.validate();
  EncoderModel fresh = init_xavier(cfg, opts.seed);
  if (!opts.pretrained) return fresh;
  EncoderModel model = load_model(*opts.pretrained);
  if (!(model.config == cfg)) throw ConfigError("pretrained checkpoint was built for a different model config");
  model.head_weight = fresh.head_weight;
  model.head_bias = fresh.head_bias;
  return model;
}

EpochRecord evaluate_epoch(const EncoderModel& model, const SegmentDataset& ds) {
  if (ds.empty()) throw EmptyDatasetError("validation set is empty");
  constexpr std::size_t kChunk = 64;
  Tensor pred({ds.size(), 2});
  for (std::size_t i = 0; i < ds.size(); i += kChunk) {
    const std::size_t n = std::min(kChunk, ds.size() - i);
    const Tensor p = forward(model, std::span(ds.segments).subspan(i, n));
    std::copy(p.raw(), p.raw() + p.size(), pred.raw() + 2 * i);
  }
  EpochRecord rec;
  rec.val_loss = loss(pred, normalize_targets(ds, model.target_norm));
  const Tensor mmhg = denormalize(pred, model.target_norm);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    rec.val_mae_sbp += std::abs(static_cast<double>(mmhg[2 * i]) - ds.segments[i].sbp);
    rec.val_mae_dbp += std::abs(static_cast<double>(mmhg[2 * i + 1]) - ds.segments[i].dbp);
  }
  rec.val_mae_sbp /= static_cast<double>(ds.size());
  rec.val_mae_dbp /= static_cast<double>(ds.size());
  return rec;
}

TrainResult train(EncoderModel model, const SegmentDataset& train_ds, const SegmentDataset& val_ds,
                  const TrainOptions& opts, const EpochCallback& on_epoch) {
  opts.validate();
  if (train_ds.empty()) throw EmptyDatasetError("training set is empty");
  if (val_ds.empty()) throw EmptyDatasetError("validation set is empty");
  const ModelConfig cfg = model.config;
  cfg.validate();

  model.target_norm = fit_normalization(train_ds);
  const Tensor targets = normalize_targets(train_ds, model.target_norm);
  const std::vector<Tensor> patches = opts.shift_augment ? std::vector<Tensor>{} : tokenize_all(train_ds, cfg);
  const AttentionGroups temporal = temporal_groups(cfg), spatial = spatial_groups(cfg);

  const std::set<std::string> names = trainable_set(model, opts.backbone);
  const auto is_trainable = [&names](const std::string& n) { return names.count(n) > 0; };
  std::vector<std::size_t> param_ids;
  ParamBlock block;
  {
    auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      if (!is_trainable(params[i].name)) continue;
      param_ids.push_back(i);
      block.add(params[i].tensor);
    }
  }
  Adam adam(block, opts.learning_rate);

  TrainResult result;
  std::vector<std::size_t> order(train_ds.size());
  std::vector<float> buffers, grad;
  for (std::uint32_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, mix_seed(opts.seed, 0x5eed0000ULL + epoch));
    double epoch_sse = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t count = std::min<std::size_t>(opts.batch_size, order.size() - start);
      const auto denom = static_cast<float>(2 * count);
      const double batch_loss = batch_gradient(count, block.total, opts.threads, buffers, grad, [&](std::size_t j, float* out) {
        const std::size_t s = order[start + j];
        Tensor rolled;
        if (opts.shift_augment) {
          Rng rng(mix_seed(mix_seed(opts.seed, 0xa0a0ULL + epoch), s));
          rolled = tokenize(roll_segment(train_ds.segments[s], rng.index(kSegmentSamples)), cfg)
                       .reshaped({cfg.tokens(), cfg.patch_len});
        }
        Tape<float> tape;
        TapeExecutor<float> ex(tape, model, is_trainable);
        const Var<float> pred = forward_on_tape(ex, cfg, temporal, spatial, opts.shift_augment ? rolled : patches[s]);
        const Tensor target({1, 2}, {targets[2 * s], targets[2 * s + 1]});
        const Var<float> l = ag::squared_error(pred, target, denom);
        tape.backward(l);
        std::vector<Var<float>> handles;
        for (std::size_t id : param_ids) handles.push_back(ex.params()[id]);
        gather_grads(tape, handles, block, out);
        return static_cast<double>(l.value()[0]);
      });
      if (!std::isfinite(batch_loss)) {
        throw DivergenceError("training loss became non-finite in epoch " + std::to_string(epoch + 1));
      }
      for (float g : grad) {
        if (!std::isfinite(g)) throw DivergenceError("gradient became non-finite in epoch " + std::to_string(epoch + 1));
      }
      adam.step(grad);
      epoch_sse += batch_loss * static_cast<double>(count);
    }
    EpochRecord rec = evaluate_epoch(model, val_ds);
    rec.epoch = epoch + 1;
    rec.train_loss = epoch_sse / static_cast<double>(train_ds.size());
    if (!std::isfinite(rec.val_loss)) throw DivergenceError("validation loss became non-finite");
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  result.model = std::move(model);
  return result;
}

void write_history_jsonl(const TrainHistory& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ParseError(ParseErrorKind::kIo, "cannot write " + path.string());
  for (const auto& r : history.epochs) {
    nlohmann::ordered_json j;
    j["epoch"] = r.epoch;
    j["train_loss"] = r.train_loss;
    j["val_loss"] = r.val_loss;
    j["val_mae_sbp"] = r.val_mae_sbp;
    j["val_mae_dbp"] = r.val_mae_dbp;
    out << j.dump() << '\n';
  }
  if (!out) throw ParseError(ParseErrorKind::kIo, "short write to " + path.string());
}

TrainHistory read_history_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(ParseErrorKind::kIo, "cannot open " + path.string());
  TrainHistory h;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      EpochRecord r;
      r.epoch = j.at("epoch").get<std::uint32_t>();
      r.train_loss = j.at("train_loss").get<double>();
      r.val_loss = j.at("val_loss").get<double>();
      r.val_mae_sbp = j.at("val_mae_sbp").get<double>();
      r.val_mae_dbp = j.at("val_mae_dbp").get<double>();
      h.epochs.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(ParseErrorKind::kCorrupt, std::string("bad history line: ") + e.what());
    }
  }
  return h;
}

void PretextOptions::validate() const {
  if (!(mask_fraction > 0.0 && mask_fraction < 1.0)) throw ConfigError("mask fraction must lie in (0, 1)");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (num_signals < 1) throw ConfigError("pretext needs at least one signal");
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (!(learning_rate > 0.0)) throw ConfigError("learning rate must be positive");
  if (min_components < 1 || min_components > max_components) throw ConfigError("bad sinusoid component range");
  if (!(min_freq_hz > 0.0 && min_freq_hz < max_freq_hz)) throw ConfigError("bad frequency range");
  if (!(noise_level >= 0.0)) throw ConfigError("noise level must be non-negative");
}

namespace {

struct Component {
  double freq, phase, amp;
};

// Pink noise by the Kellet filter bank over white Gaussian input.
std::vector<double> pink_noise(Rng& rng, std::size_t n) {
  double b0 = 0, b1 = 0, b2 = 0, b3 = 0, b4 = 0, b5 = 0, b6 = 0;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = rng.normal();
    b0 = 0.99886 * b0 + w * 0.0555179;
    b1 = 0.99332 * b1 + w * 0.0750759;
    b2 = 0.96900 * b2 + w * 0.1538520;
    b3 = 0.86650 * b3 + w * 0.3104856;
    b4 = 0.55000 * b4 + w * 0.5329522;
    b5 = -0.7616 * b5 - w * 0.0168980;
    out[i] = b0 + b1 + b2 + b3 + b4 + b5 + b6 + w * 0.5362;
    b6 = w * 0.115926;
  }
  return out;
}

void standardize(std::vector<double>& x) {
  const double n = static_cast<double>(x.size());
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
  double var = 0;
  for (double v : x) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / n);
  for (double& v : x) v = sd > 0 ? (v - mean) / sd : 0.0;
}

std::vector<float> to_float(const std::vector<double>& x) { return {x.begin(), x.end()}; }

}  // namespace

SegmentDataset generate_pretext_signals(const PretextOptions& opts) {
  opts.validate();
  SegmentDataset ds;
  ds.source_tag = "pretext";
  ds.segments.reserve(opts.num_signals);
  for (std::uint32_t s = 0; s < opts.num_signals; ++s) {
    Rng rng(mix_seed(opts.seed, s));
    const auto k = static_cast<std::uint32_t>(opts.min_components +
                                              rng.index(opts.max_components - opts.min_components + 1));
    std::vector<Component> comps(k);
    for (auto& c : comps) {
      c.freq = rng.uniform(opts.min_freq_hz, opts.max_freq_hz);
      c.phase = rng.uniform(0.0, 2.0 * M_PI);
      c.amp = rng.uniform(0.2, 1.0);
    }
    const double lag = rng.uniform(0.05, 0.4);
    std::vector<double> a(kSegmentSamples), b(kSegmentSamples);
    for (std::size_t i = 0; i < kSegmentSamples; ++i) {
      const double t = static_cast<double>(i) / kSampleRateHz;
      for (std::size_t j = 0; j < comps.size(); ++j) {
        const auto& c = comps[j];
        a[i] += c.amp * std::sin(2.0 * M_PI * c.freq * t + c.phase);
        // Every other component carries over to the second channel, delayed.
        if (j % 2 == 0) b[i] += c.amp * std::sin(2.0 * M_PI * c.freq * (t - lag) + c.phase);
      }
    }
    // Give the second channel a private component so it is not a pure copy.
    const double f2 = rng.uniform(opts.min_freq_hz, opts.max_freq_hz), p2 = rng.uniform(0.0, 2.0 * M_PI);
    for (std::size_t i = 0; i < kSegmentSamples; ++i) {
      b[i] += 0.5 * std::sin(2.0 * M_PI * f2 * static_cast<double>(i) / kSampleRateHz + p2);
    }
    standardize(a);
    standardize(b);
    for (auto* ch : {&a, &b}) {
      auto noise = pink_noise(rng, kSegmentSamples);
      standardize(noise);
      for (std::size_t i = 0; i < kSegmentSamples; ++i) (*ch)[i] += opts.noise_level * noise[i];
      standardize(*ch);
    }
    SignalSegment seg;
    seg.ecg = to_float(a);
    seg.ppg = to_float(b);
    ds.segments.push_back(std::move(seg));
  }
  return ds;
}

PretextResult pretrain_pretext(const ModelConfig& cfg, const PretextOptions& opts,
                               const std::function<void(std::uint32_t, double)>& on_epoch) {
  opts.validate();
  cfg.validate();
  const SegmentDataset signals = generate_pretext_signals(opts);
  const std::vector<Tensor> patches = tokenize_all(signals, cfg);
  const AttentionGroups temporal = temporal_groups(cfg), spatial = spatial_groups(cfg);
  const std::size_t tokens = cfg.tokens();
  const auto masked_count = static_cast<std::size_t>(
      std::clamp<double>(std::round(opts.mask_fraction * static_cast<double>(tokens)), 1.0,
                         static_cast<double>(tokens - 1)));

  PretextResult result;
  result.model = init_xavier(cfg, opts.seed);
  EncoderModel& model = result.model;

  // Learned mask embedding and linear reconstruction head.
  Rng init_rng(mix_seed(opts.seed, 0xa11ceULL));
  Tensor mask_vec({1, cfg.embed_dim});
  for (auto& v : mask_vec.data()) v = static_cast<float>(init_rng.normal(0.0, 0.02));
  Tensor recon_w({cfg.embed_dim, cfg.patch_len});
  const double bound = std::sqrt(6.0 / (cfg.embed_dim + cfg.patch_len));
  for (auto& v : recon_w.data()) v = static_cast<float>(init_rng.uniform(-bound, bound));
  Tensor recon_b({cfg.patch_len});

  const auto params = model.parameters();
  const auto head_base = params.size() - 2;
  ParamBlock block;
  std::vector<std::size_t> param_ids;
  for (std::size_t i = 0; i < head_base; ++i) {
    param_ids.push_back(i);
    block.add(params[i].tensor);
  }
  block.add(&mask_vec);
  block.add(&recon_w);
  block.add(&recon_b);
  Adam adam(block, opts.learning_rate);

  const auto train_all = [](const std::string&) { return true; };
  std::vector<std::size_t> order(patches.size());
  std::vector<float> buffers, grad;
  for (std::uint32_t epoch = 0; epoch < opts.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle(order, mix_seed(opts.seed, 0x5eed0000ULL + epoch));
    double epoch_mse = 0.0;
    for (std::size_t start = 0; start < order.size(); start += opts.batch_size) {
      const std::size_t count = std::min<std::size_t>(opts.batch_size, order.size() - start);
      const auto denom = static_cast<float>(count * masked_count * cfg.patch_len);
      const double batch_loss = batch_gradient(count, block.total, opts.threads, buffers, grad, [&](std::size_t j, float* out) {
        const std::size_t s = order[start + j];
        std::vector<std::uint32_t> rows(tokens);
        std::iota(rows.begin(), rows.end(), 0u);
        Rng rng(mix_seed(mix_seed(opts.seed, epoch + 1), s));
        for (std::size_t i = 0; i < masked_count; ++i) std::swap(rows[i], rows[i + rng.index(tokens - i)]);
        rows.resize(masked_count);
        std::sort(rows.begin(), rows.end());

        Tape<float> tape;
        TapeExecutor<float> ex(tape, model, train_all);
        const Var<float> mv = tape.parameter(mask_vec, true);
        const Var<float> rw = tape.parameter(recon_w, true);
        const Var<float> rb = tape.parameter(recon_b, true);
        ex.hook = [&](Var<float> x) { return ag::replace_rows(x, mv, rows); };
        const Var<float> x = ex.input(patches[s]);
        const Var<float> enc = encode_tokens(ex, cfg, temporal, spatial, x);
        const Var<float> recon = ag::linear(enc, rw, std::optional<Var<float>>(rb));
        const Var<float> l = ag::squared_error(recon, patches[s], denom, rows);
        tape.backward(l);
        std::vector<Var<float>> handles;
        for (std::size_t id : param_ids) handles.push_back(ex.params()[id]);
        handles.push_back(mv);
        handles.push_back(rw);
        handles.push_back(rb);
        gather_grads(tape, handles, block, out);
        return static_cast<double>(l.value()[0]);
      });
      if (!std::isfinite(batch_loss)) {
        throw DivergenceError("pretext loss became non-finite in epoch " + std::to_string(epoch + 1));
      }
      adam.step(grad);
      epoch_mse += batch_loss * static_cast<double>(count);
    }
    epoch_mse /= static_cast<double>(patches.size());
    result.epoch_losses.push_back(epoch_mse);
    if (on_epoch) on_epoch(epoch + 1, epoch_mse);
  }
  return result;
}

}  // namespace bpq
