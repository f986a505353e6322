// bpq: data generation, training, quantization and evaluation from the shell.
//
// Exit codes: 0 success, 2 usage/configuration, 3 data, 4 numeric.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bpq/errors.hpp"
#include "bpq/metrics.hpp"
#include "bpq/model.hpp"
#include "bpq/quantization.hpp"
#include "bpq/signal_data.hpp"
#include "bpq/training.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

enum ExitCode : int { kOk = 0, kUsage = 2, kData = 3, kNumeric = 4 };

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint32_t env_threads() {
  const char* raw = std::getenv("BPQ_THREADS");
  if (!raw || !*raw) return 1;
  char* end = nullptr;
  const long v = std::strtol(raw, &end, 10);
  if (*end != '\0' || v < 1 || v > 256) throw bpq::ConfigError(std::string("BPQ_THREADS must be 1..256, got '") + raw + "'");
  return static_cast<std::uint32_t>(v);
}

fs::path manifest_path(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }
fs::path history_path(const fs::path& out) { return fs::path(out.string() + ".history.jsonl"); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw bpq::ParseError(bpq::ParseErrorKind::kIo, "cannot write " + path.string());
  f << text;
  if (!f) throw bpq::ParseError(bpq::ParseErrorKind::kIo, "short write to " + path.string());
}

// Manifest of an earlier run, or null when the file has none.
ordered_json read_manifest(const fs::path& artifact) {
  const fs::path p = manifest_path(artifact);
  if (!fs::exists(p)) return nullptr;
  std::ifstream f(p);
  try {
    return ordered_json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw bpq::ParseError(bpq::ParseErrorKind::kCorrupt, p.string() + ": " + e.what());
  }
}

// Everything a model inherits from the run that produced it.
struct Lineage {
  std::string data_hash;
  std::uint64_t split_seed = bpq::SplitSpec{}.seed;
  std::string method = "scratch";
  std::string backbone = "unfrozen";
  std::uint32_t epochs = 0;

  ordered_json to_json() const {
    return {{"data_hash", data_hash}, {"split_seed", split_seed}, {"method", method}, {"backbone", backbone},
            {"epochs", epochs}};
  }
  static Lineage from_manifest(const ordered_json& m) {
    Lineage l;
    if (m.is_null() || !m.contains("lineage")) return l;
    const auto& j = m["lineage"];
    l.data_hash = j.value("data_hash", "");
    l.split_seed = j.value("split_seed", l.split_seed);
    l.method = j.value("method", l.method);
    l.backbone = j.value("backbone", l.backbone);
    l.epochs = j.value("epochs", 0U);
    return l;
  }
};

class Run {
 public:
  Run(std::string command, const CLI::App& sub) : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {
    for (const CLI::Option* opt : sub.get_options()) {
      if (opt->get_name() == "--help") continue;
      const auto res = opt->results();
      const std::string key = opt->get_name();
      if (res.empty())
        flags_[key] = nullptr;
      else if (res.size() == 1)
        flags_[key] = res.front();
      else
        flags_[key] = res;
    }
  }

  void seed(const std::string& name, std::uint64_t v) { seeds_[name] = v; }
  void input(const fs::path& p) { inputs_.push_back({{"path", p.string()}, {"fnv1a64", hex64(bpq::file_fingerprint(p))}}); }
  void output(const fs::path& p) { outputs_.push_back({{"path", p.string()}, {"fnv1a64", hex64(bpq::file_fingerprint(p))}}); }
  void lineage(const Lineage& l) { lineage_ = l.to_json(); }
  void note(const std::string& key, ordered_json v) { extra_[key] = std::move(v); }

  void write(const fs::path& primary) const {
    ordered_json m;
    m["command"] = command_;
    m["flags"] = flags_;
    m["seeds"] = seeds_;
    m["threads"] = env_threads();
    m["inputs"] = inputs_;
    m["outputs"] = outputs_;
    if (!lineage_.is_null()) m["lineage"] = lineage_;
    for (const auto& [k, v] : extra_.items()) m[k] = v;
    m["tool_version"] = kToolVersion;
    m["duration_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    write_text(manifest_path(primary), m.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::chrono::steady_clock::time_point start_;
  ordered_json flags_ = ordered_json::object();
  ordered_json seeds_ = ordered_json::object();
  ordered_json inputs_ = ordered_json::array();
  ordered_json outputs_ = ordered_json::array();
  ordered_json lineage_;
  ordered_json extra_ = ordered_json::object();
};

bpq::ModelConfig config_from_flag(const std::string& name) {
  return bpq::ModelConfig::preset(bpq::size_tag_from_string(name));
}

bpq::DatasetSplit load_split(const fs::path& data, std::uint64_t split_seed) {
  bpq::SplitSpec spec;
  spec.seed = split_seed;
  return bpq::split(bpq::read_container(data), spec);
}

const bpq::SegmentDataset& pick(const bpq::DatasetSplit& s, const std::string& name, const bpq::SegmentDataset& all) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  return all;
}

enum class ModelKind { kFloat, kQuantized };

ModelKind sniff(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw bpq::ParseError(bpq::ParseErrorKind::kIo, "cannot open " + path.string());
  char magic[6] = {};
  f.read(magic, 6);
  const std::string m(magic, static_cast<std::size_t>(f.gcount()));
  if (m == "BPMDL1") return ModelKind::kFloat;
  if (m == "BPQNT1") return ModelKind::kQuantized;
  throw bpq::ParseError(bpq::ParseErrorKind::kBadMagic, path.string() + " is neither a float nor a quantized model");
}

// Float or quantized model evaluated behind one interface.
struct AnyModel {
  ModelKind kind = ModelKind::kFloat;
  bpq::EncoderModel fmodel;
  bpq::QuantizedModel qmodel;

  static AnyModel load(const fs::path& path) {
    AnyModel m;
    m.kind = sniff(path);
    if (m.kind == ModelKind::kFloat)
      m.fmodel = bpq::load_model(path);
    else
      m.qmodel = bpq::load_quantized(path);
    return m;
  }
  const bpq::ModelConfig& config() const { return kind == ModelKind::kFloat ? fmodel.config : qmodel.config(); }
  const bpq::TargetNormalization& norm() const {
    return kind == ModelKind::kFloat ? fmodel.target_norm : qmodel.residue.target_norm;
  }
  std::string tag() const {
    return kind == ModelKind::kFloat ? "float" : std::string("int8-") + bpq::to_string(qmodel.mode);
  }
  bpq::EvalReport evaluate(const bpq::SegmentDataset& ds, const bpq::ReportContext& ctx) const {
    return kind == ModelKind::kFloat ? bpq::evaluate(fmodel, ds, norm(), ctx) : bpq::evaluate(qmodel, ds, norm(), ctx);
  }
};

bpq::ReportContext context_for(const AnyModel& m, const Lineage& l, const std::string& dataset_tag) {
  bpq::ReportContext ctx;
  ctx.dataset_tag = dataset_tag;
  ctx.model_tag = m.tag();
  ctx.method = l.method;
  ctx.backbone = l.backbone;
  ctx.epochs = l.epochs;
  ctx.size = bpq::to_string(m.config().size_tag);
  return ctx;
}

fs::path with_extension(const fs::path& p, const std::string& ext) {
  fs::path out = p;
  out.replace_extension(ext);
  return out;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::uint64_t n = 0;
  std::uint64_t seed = 0;
  fs::path out;
};

int cmd_gen_data(const GenDataArgs& a, const CLI::App& sub) {
  if (a.n == 0) throw bpq::ConfigError("--n must be at least 1");
  Run run("gen-data", sub);
  run.seed("seed", a.seed);
  const auto ds = bpq::generate_synthetic(a.n, a.seed);
  const auto bytes = bpq::write_container(ds, a.out);
  run.output(a.out);
  run.write(a.out);
  std::cout << "wrote " << a.n << " segments (" << bytes << " bytes) to " << a.out.string() << "\n";
  return kOk;
}

struct PretrainArgs {
  std::string config = "tiny";
  std::uint32_t epochs = bpq::PretextOptions{}.epochs;
  double mask = bpq::PretextOptions{}.mask_fraction;
  std::uint64_t seed = 0;
  std::uint32_t signals = bpq::PretextOptions{}.num_signals;
  std::uint32_t batch = bpq::PretextOptions{}.batch_size;
  double lr = bpq::PretextOptions{}.learning_rate;
  fs::path out;
};

int cmd_pretrain(const PretrainArgs& a, const CLI::App& sub) {
  bpq::PretextOptions o;
  o.epochs = a.epochs;
  o.mask_fraction = a.mask;
  o.seed = a.seed;
  o.num_signals = a.signals;
  o.batch_size = a.batch;
  o.learning_rate = a.lr;
  o.threads = env_threads();
  o.validate();
  const auto cfg = config_from_flag(a.config);
  Run run("pretrain", sub);
  run.seed("seed", a.seed);

  std::string history;
  const auto result = bpq::pretrain_pretext(cfg, o, [&](std::uint32_t epoch, double mse) {
    ordered_json line = {{"epoch", epoch}, {"recon_mse", mse}};
    history += line.dump() + "\n";
    std::cerr << "pretrain epoch " << epoch << " masked mse " << mse << "\n";
  });
  bpq::save_model(result.model, a.out);
  write_text(history_path(a.out), history);
  run.output(a.out);
  run.output(history_path(a.out));
  run.write(a.out);
  return kOk;
}

struct TrainArgs {
  fs::path data;
  std::string config = "tiny";
  std::string init = "scratch";
  std::string backbone = "unfrozen";
  std::uint32_t epochs = 60;
  double lr = 3e-4;
  std::uint32_t batch = 32;
  std::uint64_t seed = 0;
  std::uint64_t split_seed = bpq::SplitSpec{}.seed;
  bool no_augment = false;
  fs::path out;
};

int cmd_train(const TrainArgs& a, const CLI::App& sub) {
  bpq::TrainOptions o;
  o.epochs = a.epochs;
  o.learning_rate = a.lr;
  o.batch_size = a.batch;
  o.seed = a.seed;
  o.backbone = bpq::backbone_mode_from_string(a.backbone);
  o.threads = env_threads();
  o.shift_augment = !a.no_augment;
  Lineage lineage;
  if (a.init.rfind("pretrained:", 0) == 0) {
    o.pretrained = a.init.substr(std::string("pretrained:").size());
    if (o.pretrained->empty()) throw bpq::ConfigError("--init pretrained:PATH needs a path");
    lineage.method = "pretrained";
  } else if (a.init != "scratch") {
    throw bpq::ConfigError("--init must be scratch or pretrained:PATH, got '" + a.init + "'");
  }
  o.validate();
  const auto cfg = config_from_flag(a.config);

  Run run("train", sub);
  run.seed("seed", a.seed);
  run.seed("split_seed", a.split_seed);
  run.input(a.data);
  if (o.pretrained) run.input(*o.pretrained);

  const auto parts = load_split(a.data, a.split_seed);
  auto model = bpq::initial_model(cfg, o);
  const auto result = bpq::train(std::move(model), parts.train, parts.val, o, [](const bpq::EpochRecord& r) {
    std::cerr << "epoch " << r.epoch << " train " << r.train_loss << " val " << r.val_loss << " mae sbp "
              << r.val_mae_sbp << " dbp " << r.val_mae_dbp << "\n";
  });
  bpq::save_model(result.model, a.out);
  bpq::write_history_jsonl(result.history, history_path(a.out));

  lineage.data_hash = hex64(bpq::file_fingerprint(a.data));
  lineage.split_seed = a.split_seed;
  lineage.backbone = a.backbone;
  lineage.epochs = a.epochs;
  run.lineage(lineage);
  run.output(a.out);
  run.output(history_path(a.out));
  run.write(a.out);
  return kOk;
}

struct EvalArgs {
  fs::path model;
  fs::path data;
  std::string split = "test";
  std::optional<std::uint64_t> split_seed;
  fs::path out;
};

int cmd_eval(const EvalArgs& a, const CLI::App& sub) {
  Run run("eval", sub);
  run.input(a.model);
  run.input(a.data);
  const auto model = AnyModel::load(a.model);
  const Lineage lineage = Lineage::from_manifest(read_manifest(a.model));
  const std::uint64_t split_seed = a.split_seed.value_or(lineage.split_seed);
  run.seed("split_seed", split_seed);

  const auto all = bpq::read_container(a.data);
  bpq::SplitSpec spec;
  spec.seed = split_seed;
  const auto parts = bpq::split(all, spec);
  const auto report = model.evaluate(pick(parts, a.split, all), context_for(model, lineage, all.source_tag));

  const fs::path md = with_extension(a.out, ".md");
  write_text(a.out, bpq::report_to_json(report));
  write_text(md, bpq::report_to_markdown({report}));
  run.output(a.out);
  run.output(md);
  run.write(a.out);
  std::cout << bpq::report_to_markdown({report});
  return kOk;
}

struct QuantizeArgs {
  fs::path model;
  std::string mode = "dynamic";
  std::string observer = "minmax";
  std::optional<fs::path> calib;
  std::uint64_t calib_count = 256;
  std::optional<std::uint64_t> split_seed;
  std::string granularity = "per-channel";
  std::uint32_t bits = 8;
  fs::path out;
};

int cmd_quantize(const QuantizeArgs& a, const CLI::App& sub) {
  const auto mode = bpq::quant_mode_from_string(a.mode);
  const auto observer = bpq::observer_kind_from_string(a.observer == "moving_avg" ? "moving_average" : a.observer);
  bpq::QuantScheme scheme = bpq::QuantScheme::weight_default();
  scheme.bits = a.bits;
  if (a.granularity == "per-tensor")
    scheme.granularity = bpq::Granularity::kPerTensor;
  else if (a.granularity != "per-channel")
    throw bpq::ConfigError("--granularity must be per-channel or per-tensor");
  scheme.validate();
  if (mode == bpq::QuantMode::kStatic && !a.calib) throw bpq::ConfigError("--mode static requires --calib DATA");
  if (mode == bpq::QuantMode::kDynamic && a.calib)
    std::cerr << "warning: --calib is ignored in dynamic mode\n";

  Run run("quantize", sub);
  run.input(a.model);
  if (sniff(a.model) != ModelKind::kFloat) throw bpq::ConfigError(a.model.string() + " is already quantized");
  const auto model = bpq::load_model(a.model);
  const Lineage lineage = Lineage::from_manifest(read_manifest(a.model));

  bpq::QuantizedModel q;
  if (mode == bpq::QuantMode::kStatic) {
    run.input(*a.calib);
    const std::uint64_t split_seed = a.split_seed.value_or(lineage.split_seed);
    run.seed("split_seed", split_seed);
    auto calib = load_split(*a.calib, split_seed).train;
    if (calib.size() > a.calib_count) calib.segments.resize(a.calib_count);
    const auto cal = bpq::calibrate_static(model, calib, observer);
    q = bpq::convert(model, mode, scheme, &cal);
  } else {
    q = bpq::convert(model, mode, scheme);
  }
  bpq::save_quantized(q, a.out);

  const auto float_bytes = fs::file_size(a.model);
  const auto quant_bytes = fs::file_size(a.out);
  run.lineage(lineage);
  run.note("float_bytes", float_bytes);
  run.note("quantized_bytes", quant_bytes);
  run.note("reduction_factor", bpq::reduction_factor(float_bytes, quant_bytes));
  run.output(a.out);
  run.write(a.out);
  std::cout << "float " << float_bytes << " B, quantized " << quant_bytes << " B, RF "
            << bpq::reduction_factor(float_bytes, quant_bytes) << "\n";
  return kOk;
}

struct CompareArgs {
  std::vector<fs::path> models;
  fs::path data;
  std::string split = "test";
  std::optional<std::uint64_t> split_seed;
  fs::path out;
};

std::string signed_fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%+.4f", v);
  return buf;
}

int cmd_compare(const CompareArgs& a, const CLI::App& sub) {
  Run run("compare", sub);
  run.input(a.data);
  const std::string data_hash = hex64(bpq::file_fingerprint(a.data));
  const auto all = bpq::read_container(a.data);

  std::vector<bpq::EvalReport> reports;
  std::optional<std::uint64_t> shared_split;
  for (const auto& path : a.models) {
    run.input(path);
    const auto model = AnyModel::load(path);
    const auto manifest = read_manifest(path);
    const Lineage lineage = Lineage::from_manifest(manifest);
    if (lineage.data_hash.empty()) {
      std::cerr << "warning: " << path.string() << " has no lineage; dataset identity not checked\n";
    } else if (lineage.data_hash != data_hash) {
      throw bpq::DatasetMismatchError(path.string() + " was trained on data " + lineage.data_hash + ", but " +
                                      a.data.string() + " hashes to " + data_hash);
    }
    const std::uint64_t seed = a.split_seed.value_or(lineage.split_seed);
    if (shared_split && *shared_split != seed)
      throw bpq::DatasetMismatchError("models were trained with different split seeds");
    shared_split = seed;
    bpq::SplitSpec spec;
    spec.seed = seed;
    const auto parts = bpq::split(all, spec);
    reports.push_back(model.evaluate(pick(parts, a.split, all), context_for(model, lineage, all.source_tag)));
  }

  // Table with R² deltas against the first (baseline) model.
  std::string md = bpq::report_markdown_header();
  md.pop_back();
  const std::size_t sep = md.rfind('\n');
  std::string header = md.substr(0, sep) + " ΔDBP R² | ΔSBP R² |\n";
  std::string rule = md.substr(sep + 1) + "---|---|\n";
  std::string body;
  ordered_json rows = ordered_json::array();
  for (const auto& r : reports) {
    std::string row = bpq::report_markdown_row(r);
    row.pop_back();
    const double dd = r.dbp.r2 - reports.front().dbp.r2;
    const double ds = r.sbp.r2 - reports.front().sbp.r2;
    body += row + " " + signed_fixed(dd) + " | " + signed_fixed(ds) + " |\n";
    auto j = ordered_json::parse(bpq::report_to_json(r));
    j["delta_r2"] = {{"sbp", ds}, {"dbp", dd}};
    rows.push_back(j);
  }
  const std::string table = header + rule + body;
  const fs::path json_out = with_extension(a.out, ".json");
  write_text(a.out, table);
  write_text(json_out, ordered_json({{"schema", "bpq.compare/1"}, {"baseline", a.models.front().string()},
                                     {"reports", rows}})
                           .dump(2) +
                           "\n");
  run.seed("split_seed", *shared_split);
  run.output(a.out);
  run.output(json_out);
  run.write(a.out);
  std::cout << table;
  return kOk;
}

int exit_code_for(const std::exception_ptr& e) {
  try {
    std::rethrow_exception(e);
  } catch (const bpq::ConfigError& x) {
    std::cerr << "config error: " << x.what() << "\n";
    return kUsage;
  } catch (const bpq::DatasetMismatchError& x) {
    std::cerr << "DatasetMismatchError: " << x.what() << "\n";
    return kData;
  } catch (const bpq::ParseError& x) {
    std::cerr << "data error: " << x.what() << "\n";
    return kData;
  } catch (const bpq::EmptyDatasetError& x) {
    std::cerr << "data error: " << x.what() << "\n";
    return kData;
  } catch (const bpq::ShapeError& x) {
    std::cerr << "data error: " << x.what() << "\n";
    return kData;
  } catch (const bpq::DivergenceError& x) {
    std::cerr << "numeric error: " << x.what() << "\n";
    return kNumeric;
  } catch (const bpq::MetricError& x) {
    std::cerr << "numeric error: " << x.what() << "\n";
    return kNumeric;
  } catch (const bpq::RangeError& x) {
    std::cerr << "numeric error: " << x.what() << "\n";
    return kNumeric;
  } catch (const bpq::Error& x) {
    std::cerr << "error: " << x.what() << "\n";
    return kUsage;
  } catch (const fs::filesystem_error& x) {
    std::cerr << "data error: " << x.what() << "\n";
    return kData;
  } catch (const std::exception& x) {
    std::cerr << "error: " << x.what() << "\n";
    return kNumeric;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Cuffless blood-pressure transformer: training, INT8 quantization and clinical evaluation"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a synthetic ECG/PPG container");
  gen_cmd->add_option("--n", gen.n, "Number of 10 s segments")->required();
  gen_cmd->add_option("--seed", gen.seed, "Generator seed")->required();
  gen_cmd->add_option("--out", gen.out, "Output container (.bpseg)")->required();

  PretrainArgs pre;
  auto* pre_cmd = app.add_subcommand("pretrain", "Masked-patch pretext pre-training on synthetic sinusoid mixtures");
  pre_cmd->add_option("--config", pre.config, "Model preset: tiny, small, medium, large")->capture_default_str();
  pre_cmd->add_option("--epochs", pre.epochs)->capture_default_str();
  pre_cmd->add_option("--mask", pre.mask, "Fraction of patches masked, in (0, 1)")->capture_default_str();
  pre_cmd->add_option("--seed", pre.seed)->capture_default_str();
  pre_cmd->add_option("--signals", pre.signals, "Number of pretext signals")->capture_default_str();
  pre_cmd->add_option("--batch", pre.batch)->capture_default_str();
  pre_cmd->add_option("--lr", pre.lr)->capture_default_str();
  pre_cmd->add_option("--out", pre.out, "Output checkpoint")->required();

  TrainArgs tr;
  auto* tr_cmd = app.add_subcommand("train", "Train or fine-tune the encoder on a container");
  tr_cmd->add_option("--data", tr.data, "Input container")->required();
  tr_cmd->add_option("--config", tr.config, "Model preset")->capture_default_str();
  tr_cmd->add_option("--init", tr.init, "scratch or pretrained:PATH")->capture_default_str();
  tr_cmd->add_option("--backbone", tr.backbone, "frozen or unfrozen")->capture_default_str();
  tr_cmd->add_option("--epochs", tr.epochs)->capture_default_str();
  tr_cmd->add_option("--lr", tr.lr)->capture_default_str();
  tr_cmd->add_option("--batch", tr.batch)->capture_default_str();
  tr_cmd->add_option("--seed", tr.seed)->capture_default_str();
  tr_cmd->add_option("--split-seed", tr.split_seed)->capture_default_str();
  tr_cmd->add_flag("--no-augment", tr.no_augment, "Disable random circular time shifts");
  tr_cmd->add_option("--out", tr.out, "Output model")->required();

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "Evaluate a float or quantized model");
  ev_cmd->add_option("--model", ev.model)->required();
  ev_cmd->add_option("--data", ev.data)->required();
  ev_cmd->add_option("--split", ev.split)->check(CLI::IsMember({"train", "val", "test", "all"}))->capture_default_str();
  ev_cmd->add_option("--split-seed", ev.split_seed, "Defaults to the seed the model was trained with");
  ev_cmd->add_option("--out", ev.out, "Report JSON; a .md table is written next to it")->required();

  QuantizeArgs qa;
  auto* q_cmd = app.add_subcommand("quantize", "Post-training INT8 quantization");
  q_cmd->add_option("--model", qa.model)->required();
  q_cmd->add_option("--mode", qa.mode)->check(CLI::IsMember({"dynamic", "static"}))->capture_default_str();
  q_cmd->add_option("--observer", qa.observer)
      ->check(CLI::IsMember({"minmax", "moving_avg", "moving_average", "histogram"}))
      ->capture_default_str();
  q_cmd->add_option("--calib", qa.calib, "Calibration container (static mode; its training split is used)");
  q_cmd->add_option("--calib-count", qa.calib_count, "Calibration segments")->capture_default_str();
  q_cmd->add_option("--split-seed", qa.split_seed);
  q_cmd->add_option("--granularity", qa.granularity)
      ->check(CLI::IsMember({"per-channel", "per-tensor"}))
      ->capture_default_str();
  q_cmd->add_option("--bits", qa.bits, "Weight bits")->capture_default_str();
  q_cmd->add_option("--out", qa.out)->required();

  CompareArgs cmp;
  auto* c_cmd = app.add_subcommand("compare", "Side-by-side report of several models on one dataset");
  c_cmd->add_option("--models", cmp.models, "Comma-separated model files; the first is the baseline")
      ->required()
      ->delimiter(',');
  c_cmd->add_option("--data", cmp.data)->required();
  c_cmd->add_option("--split", cmp.split)->check(CLI::IsMember({"train", "val", "test", "all"}))->capture_default_str();
  c_cmd->add_option("--split-seed", cmp.split_seed);
  c_cmd->add_option("--out", cmp.out, "Markdown table; a .json file is written next to it")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen, *gen_cmd);
    if (*pre_cmd) return cmd_pretrain(pre, *pre_cmd);
    if (*tr_cmd) return cmd_train(tr, *tr_cmd);
    if (*ev_cmd) return cmd_eval(ev, *ev_cmd);
    if (*q_cmd) return cmd_quantize(qa, *q_cmd);
    if (*c_cmd) return cmd_compare(cmp, *c_cmd);
  } catch (...) {
    return exit_code_for(std::current_exception());
  }
  return kUsage;
}
