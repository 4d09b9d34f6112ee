#include "skipvit/cli/app.hpp"

#include <fstream>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "json.hpp"
#include "skipvit/cli/flops.hpp"
#include "skipvit/errors.hpp"
#include "skipvit/numerics/allocator.hpp"
#include "skipvit/trainer/trainer.hpp"
#include "skipvit/vit/checkpoint.hpp"

namespace skipvit::cli {

namespace {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

template <typename F>
auto with_precision(int bits, F&& f) {
  if (bits == 64) return f.template operator()<double>();
  return f.template operator()<float>();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
}

void write_resolved(const ExperimentConfig& config) {
  write_text(config.output_dir / RunFiles::kConfig, to_text(config));
}

RunSummary summary_for(const ExperimentConfig& config, const std::string& arm) {
  RunSummary s;
  s.arm = arm;
  s.schedule = config.schedule;
  s.identity = config.schedule.identity();
  s.predicted_saving = estimate_flops(config.model, config.schedule).saving();
  return s;
}

}  // namespace

RunSummary run_train(const ExperimentConfig& config, const std::string& arm) {
  validate(config);
  write_resolved(config);
  const auto data = trainer::load_dataset(config.dataset);
  const fs::path dir = config.output_dir;
  trainer::TrainOutputs outputs{dir / RunFiles::kMetrics, dir / RunFiles::kTiming,
                                dir / RunFiles::kCheckpoint};
  const auto run = with_precision(config.train.precision, [&]<typename T>() {
    vit::VisionTransformer<T> model(config.model, config.seed);
    return trainer::train(model, config.schedule, config.train, data, outputs);
  });
  auto summary = summary_for(config, arm);
  if (!run.epochs.empty()) summary.top1 = run.epochs.back().val_top1;
  write_text(dir / RunFiles::kSummary, to_json(summary) + "\n");
  return summary;
}

RunSummary run_bench(const ExperimentConfig& config, const std::string& arm) {
  validate(config);
  write_resolved(config);
  const auto data = trainer::load_dataset(config.dataset);
  const auto result = with_precision(config.train.precision, [&]<typename T>() {
    vit::VisionTransformer<T> model(config.model, config.seed);
    return trainer::benchmark(model, config.schedule, config.train, data.train,
                              config.bench.batches, config.bench.discard);
  });
  const fs::path dir = config.output_dir;
  Json metrics;
  metrics["identity"] = config.schedule.identity();
  metrics["batch_size"] = config.train.batch_size;
  metrics["batches"] = config.bench.batches;
  metrics["discarded"] = result.discarded;
  metrics["final_loss"] = result.final_loss;
  write_text(dir / RunFiles::kBenchMetrics, metrics.dump() + "\n");
  Json timing;
  timing["samples_per_sec"] = result.samples_per_sec;
  timing["step_seconds"] = result.step_seconds;
  write_text(dir / RunFiles::kBenchTiming, timing.dump() + "\n");
  auto summary = summary_for(config, arm);
  summary.samples_per_sec = result.samples_per_sec;
  write_text(dir / RunFiles::kBenchSummary, to_json(summary) + "\n");
  return summary;
}

double run_eval(const ExperimentConfig& config, const fs::path& checkpoint) {
  const auto header = vit::read_checkpoint_header(checkpoint);
  ExperimentConfig resolved = config;
  resolved.model = header.config;
  resolved.train.precision = header.scalar_bytes == 8 ? 64 : 32;
  validate(resolved);
  write_resolved(resolved);
  const auto data = trainer::load_dataset(resolved.dataset);
  const auto normalizer = trainer::Normalizer::fit(data.train);
  const auto& schedule =
      resolved.train.eval_dropping ? resolved.schedule : skipdrop::DropSchedule::none();
  const double top1 = with_precision(resolved.train.precision, [&]<typename T>() {
    const auto model = vit::load_checkpoint<T>(checkpoint);
    return trainer::evaluate(model, data.val, normalizer, schedule, schedule.warmup_epochs,
                             resolved.train.batch_size);
  });
  Json record;
  record["checkpoint"] = checkpoint.string();
  record["identity"] = schedule.identity();
  record["split"] = "val";
  record["samples"] = data.val.size();
  record["top1"] = top1;
  write_text(resolved.output_dir / RunFiles::kEval, record.dump() + "\n");
  return top1;
}

std::vector<RunSummary> run_sweep(const ExperimentConfig& config) {
  if (config.arms.empty()) throw ValidationError("sweep.arms: no arms configured");
  validate(config);
  write_resolved(config);
  std::vector<RunSummary> summaries;
  for (const auto& arm : config.arms) {
    auto arm_config = resolve_arm(config, arm);
    arm_config.output_dir = config.output_dir / arm.name;
    spdlog::info("sweep arm '{}': {}", arm.name, arm_config.schedule.identity());
    summaries.push_back(run_train(arm_config, arm.name));
    summaries.push_back(run_bench(arm_config, arm.name));
  }
  std::string lines;
  for (const auto& s : summaries) lines += to_json(s) + "\n";
  write_text(config.output_dir / RunFiles::kSummary, lines);
  write_text(config.output_dir / RunFiles::kTable, format_report(summaries));
  return summaries;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Vision transformer training with token dropping and skip reinsertion"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> sets;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> precision;
  app.add_option("--config", config_path, "key = value experiment file")->check(CLI::ExistingFile);
  app.add_option("--set", sets, "override one key (key=value), repeatable")->take_all();
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed, "seed for initialisation and data order");
  app.add_option("--precision", precision, "scalar width")->check(CLI::IsMember({32, 64}));

  auto* train = app.add_subcommand("train", "train one configuration");
  auto* eval = app.add_subcommand("eval", "top-1 of a checkpoint on the validation split");
  std::string checkpoint;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  auto* bench = app.add_subcommand("bench", "samples/sec of full training steps");
  auto* flops = app.add_subcommand("flops", "analytic MAC report");
  auto* sweep = app.add_subcommand("sweep", "train and benchmark every sweep arm");
  auto* report = app.add_subcommand("report", "comparison table from summary files");
  std::vector<std::string> summary_files;
  report->add_option("files", summary_files, "summary files (one JSON record per line)")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kValidationFailure;
  }

  try {
    numerics::retain_freed_memory();
    if (report->parsed()) {
      std::vector<RunSummary> all;
      for (const auto& f : summary_files) {
        auto s = read_summaries(f);
        all.insert(all.end(), s.begin(), s.end());
      }
      out << format_report(all);
      return kSuccess;
    }

    ExperimentConfig config;
    if (!config_path.empty()) config = build_experiment(read_key_values(config_path));
    KeyValues overrides;
    for (const auto& s : sets) overrides.push_back(split_assignment(s));
    if (seed) {
      overrides.emplace_back("seed", std::to_string(*seed));
      overrides.emplace_back("train.seed", std::to_string(*seed));
    }
    if (precision) overrides.emplace_back("train.precision", std::to_string(*precision));
    if (!out_dir.empty()) overrides.emplace_back("output.dir", out_dir);
    apply_overrides(config, overrides);
    validate(config);

    if (train->parsed()) {
      const auto s = run_train(config);
      out << to_json(s) << "\n";
    } else if (eval->parsed()) {
      out << fmt::format("top1 {:.2f}\n", run_eval(config, checkpoint));
    } else if (bench->parsed()) {
      const auto s = run_bench(config);
      out << to_json(s) << "\n";
    } else if (flops->parsed()) {
      const auto text =
          format_cost_report(config.model, config.schedule, estimate_flops(config.model, config.schedule));
      write_resolved(config);
      write_text(config.output_dir / RunFiles::kFlops, text);
      out << text;
    } else if (sweep->parsed()) {
      const auto summaries = run_sweep(config);
      out << format_report(summaries);
    }
    return kSuccess;
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return kValidationFailure;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntimeFailure;
  }
}

}  // namespace skipvit::cli
