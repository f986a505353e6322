#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "bpq/model.hpp"
#include "bpq/quantization.hpp"
#include "bpq/signal_data.hpp"

namespace bpq {

// All take per-segment errors e = target - prediction (mmHg) and throw
// MetricError when empty or non-finite.
double mae(std::span<const double> e);
double sd(std::span<const double> e);  // population SD
double bias(std::span<const double> e);
// MetricError on length mismatch, empty input or constant targets.
double r2(std::span<const double> targets, std::span<const double> predictions);

enum class BhsGrade : char { kA = 'A', kB = 'B', kC = 'C', kD = 'D' };

std::string to_string(BhsGrade g);

struct BhsFractions {
  double within5 = 0.0, within10 = 0.0, within15 = 0.0;
};

BhsFractions bhs_fractions(std::span<const double> e);
BhsGrade bhs_grade(const BhsFractions& f);
BhsGrade bhs_grade(std::span<const double> e);

// |bias| <= 5 and sd < 8.
bool aami_check(double bias_mmhg, double sd_mmhg);
bool aami_check(std::span<const double> e);

struct TargetMetrics {
  double mae = 0.0, sd = 0.0, r2 = 0.0, bias = 0.0;
  BhsFractions fractions;
  BhsGrade bhs = BhsGrade::kD;
  bool aami_pass = false;
};

TargetMetrics target_metrics(std::span<const double> targets, std::span<const double> predictions);

// Descriptive columns of a report row.
struct ReportContext {
  std::string dataset_tag = "synthetic";
  std::string model_tag = "float";
  std::string method = "scratch";    // scratch | pretrained
  std::string backbone = "unfrozen";  // frozen | unfrozen
  std::uint32_t epochs = 0;
  std::string size = "tiny";
};

struct EvalReport {
  ReportContext context;
  std::uint64_t segment_count = 0;
  TargetMetrics sbp, dbp;
  // Worse grade and joint AAMI verdict over both targets.
  BhsGrade summary_bhs = BhsGrade::kD;
  bool summary_aami = false;
};

EvalReport make_report(const ReportContext& ctx, std::span<const double> sbp_true, std::span<const double> sbp_pred,
                       std::span<const double> dbp_true, std::span<const double> dbp_pred);

// Predictions are denormalized with `norm`; EmptyDatasetError on an empty set.
EvalReport evaluate(const EncoderModel& model, const SegmentDataset& test, const TargetNormalization& norm,
                    const ReportContext& ctx = {});
EvalReport evaluate(const QuantizedModel& qmodel, const SegmentDataset& test, const TargetNormalization& norm,
                    const ReportContext& ctx = {});
// Report from normalized predictions [n, 2] already computed by the caller.
EvalReport evaluate_predictions(const Tensor& normalized_predictions, const SegmentDataset& test,
                                const TargetNormalization& norm, const ReportContext& ctx = {});

std::string report_to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
std::string report_markdown_header();
std::string report_markdown_row(const EvalReport& report);
std::string report_to_markdown(const std::vector<EvalReport>& reports);

}  // namespace bpq
