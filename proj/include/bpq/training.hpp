#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "bpq/model.hpp"
#include "bpq/signal_data.hpp"

namespace bpq {

enum class BackboneMode { kFrozen, kUnfrozen };

const char* to_string(BackboneMode mode);
BackboneMode backbone_mode_from_string(const std::string& name);

struct TrainOptions {
  std::uint32_t epochs = 60;
  std::uint32_t batch_size = 32;
  double learning_rate = 3e-4;
  std::uint64_t seed = 0;
  BackboneMode backbone = BackboneMode::kUnfrozen;
  // Encoder checkpoint to start from; scratch (Xavier) when empty.
  std::optional<std::filesystem::path> pretrained;
  // Worker threads for per-sample gradients. Results do not depend on it.
  std::uint32_t threads = 1;
  // Rolls both channels of every training segment by one seeded random
  // offset per epoch. Labels are unchanged since the roll keeps the ECG-PPG
  // timing.
  bool shift_augment = true;

  void validate() const;  // throws ConfigError
};

struct EpochRecord {
  std::uint32_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_mae_sbp = 0.0;
  double val_mae_dbp = 0.0;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;

  friend bool operator==(const TrainHistory&, const TrainHistory&) = default;
};

// Parameter names updated by training. Frozen keeps only the patch
// projection and the regression head trainable.
std::set<std::string> trainable_set(const EncoderModel& model, BackboneMode mode);

// Mean squared error over every element of two equally shaped tensors.
double loss(const Tensor& predictions, const Tensor& targets);

// Per-target mean and population SD of a (training) dataset.
TargetNormalization fit_normalization(const SegmentDataset& ds);
// [n, 2] matrix of (SBP, DBP) mapped into normalized units.
Tensor normalize_targets(const SegmentDataset& ds, const TargetNormalization& norm);
// Maps [n, 2] normalized predictions back to mmHg. ConfigError when an SD is
// not positive or a statistic is not finite.
Tensor denormalize(const Tensor& predictions, const TargetNormalization& norm);

// Starting point for a run: Xavier init from `opts.seed`, or the pretrained
// encoder with a freshly initialised head.
EncoderModel initial_model(const ModelConfig& cfg, const TrainOptions& opts);

struct TrainResult {
  EncoderModel model;
  TrainHistory history;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

// Copy of `segment` with both channels rotated left by `shift` samples.
SignalSegment roll_segment(const SignalSegment& segment, std::size_t shift);

// Mini-batch Adam on the normalized-target MSE. The normalization is fitted
// on `train_ds` and stored in the returned model. Throws DivergenceError
// when a batch loss stops being finite.
TrainResult train(EncoderModel model, const SegmentDataset& train_ds, const SegmentDataset& val_ds,
                  const TrainOptions& opts, const EpochCallback& on_epoch = {});

// Validation loss (normalized MSE) and per-target MAE in mmHg.
EpochRecord evaluate_epoch(const EncoderModel& model, const SegmentDataset& ds);

void write_history_jsonl(const TrainHistory& history, const std::filesystem::path& path);
TrainHistory read_history_jsonl(const std::filesystem::path& path);

struct PretextOptions {
  double mask_fraction = 0.5;
  std::uint32_t epochs = 30;
  std::uint64_t seed = 0;
  std::uint32_t num_signals = 2048;
  std::uint32_t batch_size = 8;
  double learning_rate = 1e-3;
  std::uint32_t min_components = 3;
  std::uint32_t max_components = 8;
  double min_freq_hz = 0.5;
  double max_freq_hz = 3.0;
  double noise_level = 0.3;  // 1/f noise SD relative to the sinusoid mixture
  std::uint32_t threads = 1;

  void validate() const;  // throws ConfigError
};

struct PretextResult {
  EncoderModel model;
  std::vector<double> epoch_losses;  // masked-patch reconstruction MSE
};

// Two-channel sinusoid mixtures with pink noise. The second channel shares
// components with the first at a random lag.
SegmentDataset generate_pretext_signals(const PretextOptions& opts);

// Masked-patch reconstruction; the reconstruction head is discarded.
PretextResult pretrain_pretext(const ModelConfig& cfg, const PretextOptions& opts,
                               const std::function<void(std::uint32_t, double)>& on_epoch = {});

}  // namespace bpq
