#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "skipvit/skipdrop/schedule.hpp"
#include "skipvit/trainer/dataset.hpp"
#include "skipvit/trainer/train_config.hpp"
#include "skipvit/vit/config.hpp"

namespace skipvit::cli {

/// Benchmark knobs for the bench and sweep subcommands.
struct BenchConfig {
  std::size_t batches = 12;
  std::size_t discard = 3;

  bool operator==(const BenchConfig&) const = default;
};

/// One named sweep arm: overrides applied on top of the base experiment.
struct SweepArm {
  std::string name;
  std::vector<std::pair<std::string, std::string>> overrides;

  bool operator==(const SweepArm&) const = default;
};

/// Everything needed to reproduce one run.
struct ExperimentConfig {
  vit::ModelConfig model = vit::ModelConfig::desk();
  skipdrop::DropSchedule schedule;
  trainer::TrainConfig train = trainer::TrainConfig::desk();
  trainer::DatasetSource dataset;
  BenchConfig bench;
  std::vector<SweepArm> arms;
  std::filesystem::path output_dir = "runs";
  /// Model initialisation seed; data order uses train.seed.
  std::uint64_t seed = 0;

  bool operator==(const ExperimentConfig&) const = default;
};

/// Ordered `key = value` pairs as read from text. Blank lines and lines
/// starting with '#' are skipped.
using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Throws ValidationError with the line number on malformed or repeated keys.
KeyValues parse_key_values(const std::string& text);
KeyValues read_key_values(const std::filesystem::path& path);

/// Applies pairs to a default experiment. `model.preset` and `train.preset`
/// are applied before every other key regardless of order.
ExperimentConfig build_experiment(const KeyValues& pairs);

/// Applies `key = value` pairs on top of an existing experiment, all at once,
/// so paired keys such as the drop layers and ratios may change together.
/// A preset key resets its whole section first. Throws ValidationError naming the key.
void apply_overrides(ExperimentConfig& config, const KeyValues& overrides);
void apply_override(ExperimentConfig& config, const std::string& key, const std::string& value);

/// Runs model, schedule, trainer and dataset validation.
void validate(const ExperimentConfig& config);

/// The fully resolved configuration; parsing it back yields an equal config.
std::string to_text(const ExperimentConfig& config);

/// The base experiment with one arm's overrides applied (arms cleared).
ExperimentConfig resolve_arm(const ExperimentConfig& config, const SweepArm& arm);

/// Splits "key=value"; throws ValidationError without '='.
std::pair<std::string, std::string> split_assignment(const std::string& text);

}  // namespace skipvit::cli
