#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "skipvit/skipdrop/schedule.hpp"
#include "skipvit/trainer/dataset.hpp"
#include "skipvit/trainer/train_config.hpp"
#include "skipvit/vit/model.hpp"

namespace skipvit::trainer {

/// Live-token count -> number of forward passes that saw it.
using Histogram = std::map<std::size_t, std::size_t>;

struct LayerHistogram {
  std::size_t layer = 0;
  Histogram attention;  // tokens entering the attention sublayer
  Histogram ffn;        // tokens entering the FFN sublayer
};

struct StageHistogram {
  std::size_t layer = 0;
  Histogram kept_patches;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  bool dropping = false;
  std::size_t steps = 0;
  std::size_t samples = 0;
  double train_loss = 0.0;  // mean over steps
  double train_top1 = 0.0;  // running, in percent
  std::optional<double> val_top1;
  double final_lr = 0.0;
  std::vector<LayerHistogram> layers;
  std::vector<StageHistogram> stages;
  /// Wall-clock throughput of the training steps; excluded from the metrics file.
  double samples_per_sec = 0.0;
};

struct RunMetrics {
  std::vector<EpochMetrics> epochs;
  std::size_t steps = 0;
  double final_loss = 0.0;  // loss of the last optimizer step
  bool stopped_early = false;
};

struct TrainOutputs {
  std::filesystem::path metrics;     // JSON lines, deterministic fields only
  std::filesystem::path timing;      // JSON lines with samples/sec
  std::filesystem::path checkpoint;  // written after the last epoch
};

struct TrainHooks {
  /// Called after every optimizer step; return false to stop.
  std::function<bool(std::size_t step, double loss)> on_step;
  /// Called after every epoch; return false to stop.
  std::function<bool(const EpochMetrics&)> on_epoch;
};

/// Percent of rows whose argmax matches the label; ties go to the lower class.
template <typename T>
double top1(const numerics::Tensor<T>& logits, std::span<const std::int32_t> labels);

/// One metrics record as a single JSON line.
std::string to_json_line(const EpochMetrics& metrics);
std::string to_timing_line(const EpochMetrics& metrics);

/// Trains in place. The epoch index is passed to every forward, so the
/// schedule's warm-up gates dropping. Throws NumericError on a non-finite loss.
template <typename T>
RunMetrics train(vit::VisionTransformer<T>& model, const skipdrop::DropSchedule& schedule,
                 const TrainConfig& config, const DatasetSplits& data,
                 const TrainOutputs& outputs = {}, const TrainHooks& hooks = {});

/// Top-1 in percent. The schedule applies at `epoch` (inactive during warm-up);
/// pass DropSchedule::none() to evaluate the full topology.
template <typename T>
double evaluate(const vit::VisionTransformer<T>& model, const Dataset& split,
                const Normalizer& normalizer, const skipdrop::DropSchedule& schedule,
                std::size_t epoch, std::size_t batch_size);

struct BenchmarkResult {
  double samples_per_sec = 0.0;  // median over timed batches
  std::vector<double> step_seconds;
  std::size_t discarded = 0;
  double final_loss = 0.0;  // loss of the last timed step; deterministic
};

/// Times full train steps (forward, backward, AdamW) on a private copy of the
/// model with dropping active. Discards the first `discard` batches.
template <typename T>
BenchmarkResult benchmark(const vit::VisionTransformer<T>& model,
                          const skipdrop::DropSchedule& schedule, const TrainConfig& config,
                          const Dataset& data, std::size_t batches, std::size_t discard = 3);

}  // namespace skipvit::trainer
