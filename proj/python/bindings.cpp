#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <fstream>

#include "bpq/errors.hpp"
#include "bpq/metrics.hpp"
#include "bpq/quantization.hpp"
#include "bpq/training.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using namespace bpq;

namespace {

using F32 = py::array_t<float, py::array::c_style | py::array::forcecast>;
using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::dict dataset_to_dict(const SegmentDataset& ds) {
  const std::size_t n = ds.size();
  F32 ecg({n, kSegmentSamples}), ppg({n, kSegmentSamples});
  F32 sbp(n), dbp(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = ds.segments[i];
    std::memcpy(ecg.mutable_data(i, 0), s.ecg.data(), kSegmentSamples * sizeof(float));
    std::memcpy(ppg.mutable_data(i, 0), s.ppg.data(), kSegmentSamples * sizeof(float));
    sbp.mutable_at(i) = s.sbp;
    dbp.mutable_at(i) = s.dbp;
  }
  py::dict d;
  d["ecg"] = ecg;
  d["ppg"] = ppg;
  d["sbp"] = sbp;
  d["dbp"] = dbp;
  d["source_tag"] = ds.source_tag;
  return d;
}

SegmentDataset arrays_to_dataset(const F32& ecg, const F32& ppg, const std::vector<float>& sbp,
                                 const std::vector<float>& dbp) {
  if (ecg.ndim() != 2 || ppg.ndim() != 2 || ecg.shape(1) != static_cast<py::ssize_t>(kSegmentSamples) ||
      ppg.shape(0) != ecg.shape(0) || ppg.shape(1) != ecg.shape(1)) {
    throw ShapeError("ecg and ppg must both be [n, 1250]");
  }
  const auto n = static_cast<std::size_t>(ecg.shape(0));
  if (!sbp.empty() && (sbp.size() != n || dbp.size() != n)) throw ShapeError("one sbp and dbp label per segment");
  SegmentDataset ds;
  for (std::size_t i = 0; i < n; ++i) {
    SignalSegment s;
    s.ecg.assign(ecg.data(i, 0), ecg.data(i, 0) + kSegmentSamples);
    s.ppg.assign(ppg.data(i, 0), ppg.data(i, 0) + kSegmentSamples);
    if (!sbp.empty()) {
      s.sbp = sbp[i];
      s.dbp = dbp[i];
    }
    ds.segments.push_back(std::move(s));
  }
  return ds;
}

bool is_quantized(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  char magic[6] = {};
  if (!f.read(magic, 6)) throw ParseError(ParseErrorKind::kIo, "cannot read " + path.string());
  if (std::memcmp(magic, "BPQNT1", 6) == 0) return true;
  if (std::memcmp(magic, "BPMDL1", 6) == 0) return false;
  throw ParseError(ParseErrorKind::kBadMagic, path.string() + " is not a bpq model");
}

SegmentDataset select_split(const fs::path& data, const std::string& which, std::uint64_t split_seed) {
  SegmentDataset ds = read_container(data);
  if (which == "all") return ds;
  SplitSpec spec;
  spec.seed = split_seed;
  auto parts = split(ds, spec);
  if (which == "train") return parts.train;
  if (which == "val") return parts.val;
  if (which == "test") return parts.test;
  throw ConfigError("split must be train, val, test or all");
}

std::vector<double> as_vector(const F64& a) { return {a.data(), a.data() + a.size()}; }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "C++ core of the bpq blood-pressure and quantization toolkit";

  // Translators run newest first, so the base class goes in before its subclasses.
  py::register_exception<Error>(m, "BpqError", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<EmptyDatasetError>(m, "EmptyDatasetError", PyExc_ValueError);
  py::register_exception<MetricError>(m, "MetricError", PyExc_ValueError);
  py::register_exception<DivergenceError>(m, "DivergenceError", PyExc_ArithmeticError);

  m.attr("BHS_GRADES") = py::make_tuple("A", "B", "C", "D");

  m.def(
      "generate_synthetic",
      [](std::uint64_t n, std::uint64_t seed) { return dataset_to_dict(generate_synthetic(n, seed)); },
      py::arg("n"), py::arg("seed"),
      "Synthetic ECG/PPG segments whose labels follow the pulse transit delay.");
  m.def(
      "read_container", [](const fs::path& path) { return dataset_to_dict(read_container(path)); }, py::arg("path"));
  m.def(
      "write_container",
      [](const fs::path& path, const F32& ecg, const F32& ppg, const std::vector<float>& sbp,
         const std::vector<float>& dbp) { return write_container(arrays_to_dataset(ecg, ppg, sbp, dbp), path); },
      py::arg("path"), py::arg("ecg"), py::arg("ppg"), py::arg("sbp"), py::arg("dbp"),
      "Writes a .bpseg container and returns its size in bytes.");

  m.def(
      "qparams_symmetric",
      [](double lo, double hi, std::uint32_t bits) {
        const auto p = qparams_symmetric(lo, hi, bits);
        return py::make_tuple(p.scale, p.zero_point);
      },
      py::arg("x_min"), py::arg("x_max"), py::arg("bits") = 8);
  m.def(
      "qparams_asymmetric",
      [](double lo, double hi, std::uint32_t bits) {
        const auto p = qparams_asymmetric(lo, hi, bits);
        return py::make_tuple(p.scale, p.zero_point);
      },
      py::arg("x_min"), py::arg("x_max"), py::arg("bits") = 8);
  m.def(
      "quantize_value",
      [](double x, double scale, std::int32_t zero, std::uint32_t bits, bool symmetric) {
        QuantScheme s{symmetric ? Symmetry::kSymmetric : Symmetry::kAsymmetric, Granularity::kPerTensor, 0, bits};
        s.validate();
        return quantize_value(x, {scale, zero}, s);
      },
      py::arg("x"), py::arg("scale"), py::arg("zero_point") = 0, py::arg("bits") = 8, py::arg("symmetric") = true);

  m.def(
      "mae", [](const F64& e) { return mae(as_vector(e)); }, py::arg("errors"));
  m.def(
      "sd", [](const F64& e) { return sd(as_vector(e)); }, py::arg("errors"));
  m.def(
      "r2", [](const F64& y, const F64& p) { return r2(as_vector(y), as_vector(p)); }, py::arg("targets"),
      py::arg("predictions"));
  m.def(
      "bhs_grade", [](const F64& e) { return to_string(bhs_grade(as_vector(e))); }, py::arg("errors"));
  m.def(
      "aami_check", [](const F64& e) { return aami_check(as_vector(e)); }, py::arg("errors"));

  m.def(
      "count_params", [](const std::string& size) { return count_params(ModelConfig::preset(size_tag_from_string(size))); },
      py::arg("size") = "tiny");

  m.def(
      "train",
      [](const fs::path& data, const fs::path& out, std::uint32_t epochs, double lr, std::uint32_t batch,
         std::uint64_t seed, const std::string& backbone, std::optional<fs::path> pretrained,
         std::uint64_t split_seed, bool augment, std::uint32_t threads) {
        SplitSpec spec;
        spec.seed = split_seed;
        const auto parts = split(read_container(data), spec);
        TrainOptions o;
        o.epochs = epochs;
        o.learning_rate = lr;
        o.batch_size = batch;
        o.seed = seed;
        o.backbone = backbone_mode_from_string(backbone);
        o.pretrained = std::move(pretrained);
        o.shift_augment = augment;
        o.threads = threads;
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(initial_model(ModelConfig::tiny(), o), parts.train, parts.val, o);
        }
        save_model(r.model, out);
        py::list history;
        for (const auto& e : r.history.epochs) {
          py::dict d;
          d["epoch"] = e.epoch;
          d["train_loss"] = e.train_loss;
          d["val_loss"] = e.val_loss;
          d["val_mae_sbp"] = e.val_mae_sbp;
          d["val_mae_dbp"] = e.val_mae_dbp;
          history.append(d);
        }
        return history;
      },
      py::arg("data"), py::arg("out"), py::arg("epochs") = 60, py::arg("lr") = 3e-4, py::arg("batch") = 32,
      py::arg("seed") = 0, py::arg("backbone") = "unfrozen", py::arg("pretrained") = py::none(),
      py::arg("split_seed") = SplitSpec{}.seed, py::arg("augment") = true, py::arg("threads") = 1,
      "Trains the tiny model on the training split of a container and saves it. Returns the per-epoch history.");

  m.def(
      "quantize_model",
      [](const fs::path& model_path, const fs::path& out, const std::string& mode, const std::string& observer,
         std::optional<fs::path> calib, std::uint64_t calib_count, std::uint64_t split_seed) {
        const EncoderModel model = load_model(model_path);
        const QuantMode qm = quant_mode_from_string(mode);
        QuantizedModel q;
        if (qm == QuantMode::kStatic) {
          if (!calib) throw ConfigError("static mode needs calibration data");
          auto ds = select_split(*calib, "train", split_seed);
          if (ds.size() > calib_count) ds.segments.resize(calib_count);
          const auto cal = calibrate_static(model, ds, observer_kind_from_string(observer));
          q = convert(model, qm, {}, &cal);
        } else {
          q = convert(model, qm);
        }
        save_quantized(q, out);
        py::dict d;
        d["float_bytes"] = model_size_bytes(model);
        d["quantized_bytes"] = model_size_bytes(q);
        d["reduction_factor"] = reduction_factor(model_size_bytes(model), model_size_bytes(q));
        return d;
      },
      py::arg("model"), py::arg("out"), py::arg("mode") = "dynamic", py::arg("observer") = "minmax",
      py::arg("calib") = py::none(), py::arg("calib_count") = 256, py::arg("split_seed") = SplitSpec{}.seed);

  m.def(
      "evaluate",
      [](const fs::path& model_path, const fs::path& data, const std::string& which, std::uint64_t split_seed) {
        const SegmentDataset ds = select_split(data, which, split_seed);
        EvalReport rep;
        ReportContext ctx;
        if (is_quantized(model_path)) {
          const auto q = load_quantized(model_path);
          ctx.model_tag = std::string("int8-") + to_string(q.mode);
          rep = evaluate(q, ds, q.residue.target_norm, ctx);
        } else {
          const auto f = load_model(model_path);
          rep = evaluate(f, ds, f.target_norm, ctx);
        }
        return py::module_::import("json").attr("loads")(report_to_json(rep));
      },
      py::arg("model"), py::arg("data"), py::arg("split") = "test", py::arg("split_seed") = SplitSpec{}.seed,
      "Clinical report (MAE, SD, R2, BHS, AAMI per target) as a dict.");

  m.def(
      "predict",
      [](const fs::path& model_path, const F32& ecg, const F32& ppg) {
        const SegmentDataset ds = arrays_to_dataset(ecg, ppg, {}, {});
        Tensor out;
        if (is_quantized(model_path)) {
          const auto q = load_quantized(model_path);
          out = denormalize(quantized_forward(q, ds.segments), q.residue.target_norm);
        } else {
          const auto f = load_model(model_path);
          out = denormalize(forward(f, ds.segments), f.target_norm);
        }
        F32 result({out.rows(), std::size_t{2}});
        std::memcpy(result.mutable_data(), out.raw(), out.size() * sizeof(float));
        return result;
      },
      py::arg("model"), py::arg("ecg"), py::arg("ppg"), "Predicted (SBP, DBP) in mmHg, shape [n, 2].");

  m.def(
      "model_size_bytes",
      [](const fs::path& path) {
        return is_quantized(path) ? model_size_bytes(load_quantized(path)) : model_size_bytes(load_model(path));
      },
      py::arg("path"));
}
