#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "skipvit/skipdrop/schedule.hpp"

namespace skipvit::cli {

/// One result record. Train runs fill `top1`, bench runs fill
/// `samples_per_sec`; the report joins records on `identity`.
struct RunSummary {
  std::string arm;
  skipdrop::DropSchedule schedule;
  std::string identity;
  std::optional<double> top1;
  std::optional<double> samples_per_sec;
  double predicted_saving = 0.0;
};

std::string to_json(const RunSummary& summary);
/// Throws ValidationError on missing or mistyped fields.
RunSummary summary_from_json(const std::string& text);
/// A file holds one summary per line.
std::vector<RunSummary> read_summaries(const std::filesystem::path& path);

/// "5,098(+13.23%)"
std::string format_throughput(double value, double baseline);
/// "70.16(-0.01)"
std::string format_top1(double value, double baseline);

struct ReportRow {
  std::string layers;
  std::string ratios;
  std::string target;
  std::optional<double> samples_per_sec;
  std::optional<double> top1;
  double predicted_saving = 0.0;
  bool baseline = false;
};

/// Merges records sharing an identity. Throws ValidationError without a
/// schedule-none row or when two records give the same field for one identity.
std::vector<ReportRow> join_summaries(const std::vector<RunSummary>& summaries);

/// Comparison table, baseline first, then the remaining rows in input order.
std::string format_report(const std::vector<RunSummary>& summaries);

}  // namespace skipvit::cli
