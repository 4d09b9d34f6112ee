#pragma once

#include <filesystem>
#include <ostream>
#include <string>
#include <vector>

#include "skipvit/cli/experiment.hpp"
#include "skipvit/cli/report.hpp"

namespace skipvit::cli {

enum ExitCode : int {
  kSuccess = 0,
  kValidationFailure = 1,
  kRuntimeFailure = 2,
};

/// Output file names inside a run directory.
struct RunFiles {
  static constexpr const char* kConfig = "config.resolved";
  static constexpr const char* kMetrics = "metrics.jsonl";
  static constexpr const char* kTiming = "timing.jsonl";
  static constexpr const char* kCheckpoint = "model.ckpt";
  static constexpr const char* kSummary = "summary.jsonl";
  static constexpr const char* kBenchMetrics = "bench.jsonl";
  static constexpr const char* kBenchSummary = "bench_summary.jsonl";
  static constexpr const char* kBenchTiming = "bench_timing.jsonl";
  static constexpr const char* kFlops = "flops.txt";
  static constexpr const char* kEval = "eval.jsonl";
  static constexpr const char* kTable = "table.txt";
};

/// Trains one experiment into config.output_dir; returns its summary
/// (top-1 on the validation split).
RunSummary run_train(const ExperimentConfig& config, const std::string& arm = "");

/// Benchmarks the initial model of one experiment; returns its summary
/// (samples/sec).
RunSummary run_bench(const ExperimentConfig& config, const std::string& arm = "");

/// Top-1 of a checkpoint on the validation split.
double run_eval(const ExperimentConfig& config, const std::filesystem::path& checkpoint);

/// Trains and benchmarks every arm into output_dir/<arm>; writes the joined
/// table. Runs sequentially.
std::vector<RunSummary> run_sweep(const ExperimentConfig& config);

/// Command-line entry; returns an ExitCode.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace skipvit::cli
