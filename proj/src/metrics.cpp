#include "bpq/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <sstream>

#include "bpq/errors.hpp"
#include "bpq/training.hpp"
#include "json.hpp"

namespace bpq {
namespace {

using nlohmann::ordered_json;

void check_errors(std::span<const double> e) {
  if (e.empty()) throw MetricError("metric of an empty error vector");
  for (double v : e)
    if (!std::isfinite(v)) throw MetricError("error vector holds a non-finite value");
}

struct Threshold {
  BhsGrade grade;
  double f5, f10, f15;
};

constexpr Threshold kBhs[] = {
    {BhsGrade::kA, 0.60, 0.85, 0.95},
    {BhsGrade::kB, 0.50, 0.75, 0.90},
    {BhsGrade::kC, 0.40, 0.65, 0.85},
};

int rank(BhsGrade g) { return static_cast<int>(static_cast<char>(g) - 'A'); }

ordered_json target_json(const TargetMetrics& m) {
  ordered_json j;
  j["mae"] = m.mae;
  j["sd"] = m.sd;
  j["r2"] = m.r2;
  j["bias"] = m.bias;
  j["within_5"] = m.fractions.within5;
  j["within_10"] = m.fractions.within10;
  j["within_15"] = m.fractions.within15;
  j["bhs"] = to_string(m.bhs);
  j["aami_pass"] = m.aami_pass;
  return j;
}

BhsGrade grade_from_string(const std::string& s) {
  if (s.size() != 1 || s[0] < 'A' || s[0] > 'D') throw ParseError(ParseErrorKind::kCorrupt, "bad BHS grade '" + s + "'");
  return static_cast<BhsGrade>(s[0]);
}

TargetMetrics target_from_json(const nlohmann::json& j) {
  TargetMetrics m;
  m.mae = j.at("mae").get<double>();
  m.sd = j.at("sd").get<double>();
  m.r2 = j.at("r2").get<double>();
  m.bias = j.at("bias").get<double>();
  m.fractions.within5 = j.at("within_5").get<double>();
  m.fractions.within10 = j.at("within_10").get<double>();
  m.fractions.within15 = j.at("within_15").get<double>();
  m.bhs = grade_from_string(j.at("bhs").get<std::string>());
  m.aami_pass = j.at("aami_pass").get<bool>();
  return m;
}

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

}  // namespace

double mae(std::span<const double> e) {
  check_errors(e);
  double s = 0.0;
  for (double v : e) s += std::abs(v);
  return s / static_cast<double>(e.size());
}

double bias(std::span<const double> e) {
  check_errors(e);
  double s = 0.0;
  for (double v : e) s += v;
  return s / static_cast<double>(e.size());
}

double sd(std::span<const double> e) {
  const double m = bias(e);
  double s = 0.0;
  for (double v : e) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(e.size()));
}

double r2(std::span<const double> targets, std::span<const double> predictions) {
  if (targets.size() != predictions.size()) throw MetricError("r2: length mismatch");
  check_errors(targets);
  check_errors(predictions);
  const double m = bias(targets);
  double ss_res = 0.0, ss_tot = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    ss_res += (targets[i] - predictions[i]) * (targets[i] - predictions[i]);
    ss_tot += (targets[i] - m) * (targets[i] - m);
  }
  if (ss_tot == 0.0) throw MetricError("r2 is undefined for constant targets");
  return 1.0 - ss_res / ss_tot;
}

std::string to_string(BhsGrade g) { return std::string(1, static_cast<char>(g)); }

BhsFractions bhs_fractions(std::span<const double> e) {
  check_errors(e);
  std::size_t c5 = 0, c10 = 0, c15 = 0;
  for (double v : e) {
    const double a = std::abs(v);
    c5 += a <= 5.0;
    c10 += a <= 10.0;
    c15 += a <= 15.0;
  }
  const double n = static_cast<double>(e.size());
  return {static_cast<double>(c5) / n, static_cast<double>(c10) / n, static_cast<double>(c15) / n};
}

BhsGrade bhs_grade(const BhsFractions& f) {
  for (const auto& t : kBhs) {
    if (f.within5 >= t.f5 && f.within10 >= t.f10 && f.within15 >= t.f15) return t.grade;
  }
  return BhsGrade::kD;
}

BhsGrade bhs_grade(std::span<const double> e) { return bhs_grade(bhs_fractions(e)); }

bool aami_check(double bias_mmhg, double sd_mmhg) {
  if (!std::isfinite(bias_mmhg) || !std::isfinite(sd_mmhg)) throw MetricError("AAMI check on non-finite statistics");
  return std::abs(bias_mmhg) <= 5.0 && sd_mmhg < 8.0;
}

bool aami_check(std::span<const double> e) { return aami_check(bias(e), sd(e)); }

TargetMetrics target_metrics(std::span<const double> targets, std::span<const double> predictions) {
  if (targets.size() != predictions.size()) throw MetricError("length mismatch between targets and predictions");
  std::vector<double> e(targets.size());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = targets[i] - predictions[i];
  TargetMetrics m;
  m.mae = mae(e);
  m.sd = sd(e);
  m.bias = bias(e);
  m.r2 = r2(targets, predictions);
  m.fractions = bhs_fractions(e);
  m.bhs = bhs_grade(m.fractions);
  m.aami_pass = aami_check(m.bias, m.sd);
  return m;
}

EvalReport make_report(const ReportContext& ctx, std::span<const double> sbp_true, std::span<const double> sbp_pred,
                       std::span<const double> dbp_true, std::span<const double> dbp_pred) {
  EvalReport r;
  r.context = ctx;
  r.segment_count = sbp_true.size();
  r.sbp = target_metrics(sbp_true, sbp_pred);
  r.dbp = target_metrics(dbp_true, dbp_pred);
  r.summary_bhs = rank(r.sbp.bhs) >= rank(r.dbp.bhs) ? r.sbp.bhs : r.dbp.bhs;
  r.summary_aami = r.sbp.aami_pass && r.dbp.aami_pass;
  return r;
}

EvalReport evaluate_predictions(const Tensor& normalized_predictions, const SegmentDataset& test,
                                const TargetNormalization& norm, const ReportContext& ctx) {
  if (test.empty()) throw EmptyDatasetError("evaluation set is empty");
  if (normalized_predictions.rank() != 2 || normalized_predictions.rows() != test.size()) {
    throw ShapeError("predictions do not match the evaluation set");
  }
  const Tensor mmhg = denormalize(normalized_predictions, norm);
  std::vector<double> st, sp, dt, dp;
  for (std::size_t i = 0; i < test.size(); ++i) {
    st.push_back(test.segments[i].sbp);
    dt.push_back(test.segments[i].dbp);
    sp.push_back(mmhg[2 * i]);
    dp.push_back(mmhg[2 * i + 1]);
  }
  return make_report(ctx, st, sp, dt, dp);
}

EvalReport evaluate(const EncoderModel& model, const SegmentDataset& test, const TargetNormalization& norm,
                    const ReportContext& ctx) {
  if (test.empty()) throw EmptyDatasetError("evaluation set is empty");
  return evaluate_predictions(forward(model, test.segments), test, norm, ctx);
}

EvalReport evaluate(const QuantizedModel& qmodel, const SegmentDataset& test, const TargetNormalization& norm,
                    const ReportContext& ctx) {
  if (test.empty()) throw EmptyDatasetError("evaluation set is empty");
  return evaluate_predictions(quantized_forward(qmodel, test.segments), test, norm, ctx);
}

std::string report_to_json(const EvalReport& r) {
  ordered_json j;
  j["schema"] = "bpq.eval_report/1";
  j["dataset"] = r.context.dataset_tag;
  j["model"] = r.context.model_tag;
  j["method"] = r.context.method;
  j["backbone"] = r.context.backbone;
  j["epochs"] = r.context.epochs;
  j["size"] = r.context.size;
  j["segments"] = r.segment_count;
  j["sbp"] = target_json(r.sbp);
  j["dbp"] = target_json(r.dbp);
  j["summary"] = {{"bhs", to_string(r.summary_bhs)}, {"aami_pass", r.summary_aami}};
  return j.dump(2) + "\n";
}

EvalReport report_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("schema").get<std::string>() != "bpq.eval_report/1") {
      throw ParseError(ParseErrorKind::kBadVersion, "unknown report schema");
    }
    EvalReport r;
    r.context.dataset_tag = j.at("dataset").get<std::string>();
    r.context.model_tag = j.at("model").get<std::string>();
    r.context.method = j.at("method").get<std::string>();
    r.context.backbone = j.at("backbone").get<std::string>();
    r.context.epochs = j.at("epochs").get<std::uint32_t>();
    r.context.size = j.at("size").get<std::string>();
    r.segment_count = j.at("segments").get<std::uint64_t>();
    r.sbp = target_from_json(j.at("sbp"));
    r.dbp = target_from_json(j.at("dbp"));
    r.summary_bhs = grade_from_string(j.at("summary").at("bhs").get<std::string>());
    r.summary_aami = j.at("summary").at("aami_pass").get<bool>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(ParseErrorKind::kCorrupt, std::string("bad report JSON: ") + e.what());
  }
}

std::string report_markdown_header() {
  return "| Dataset | Method | Frozen? | Epochs | Size | DBP SD | DBP MAE | DBP R² | SBP SD | SBP MAE | SBP R² | BHS | AAMI |\n"
         "|---|---|---|---|---|---|---|---|---|---|---|---|---|\n";
}

std::string report_markdown_row(const EvalReport& r) {
  std::ostringstream os;
  os << "| " << r.context.dataset_tag << " | " << r.context.method << " (" << r.context.model_tag << ") | "
     << (r.context.backbone == "frozen" ? "yes" : "no") << " | " << r.context.epochs << " | " << r.context.size << " | "
     << fixed(r.dbp.sd, 2) << " | " << fixed(r.dbp.mae, 2) << " | " << fixed(r.dbp.r2, 3) << " | " << fixed(r.sbp.sd, 2)
     << " | " << fixed(r.sbp.mae, 2) << " | " << fixed(r.sbp.r2, 3) << " | " << to_string(r.summary_bhs) << " | "
     << (r.summary_aami ? "Pass" : "Fail") << " |\n";
  return os.str();
}

std::string report_to_markdown(const std::vector<EvalReport>& reports) {
  std::string out = report_markdown_header();
  for (const auto& r : reports) out += report_markdown_row(r);
  return out;
}

}  // namespace bpq
