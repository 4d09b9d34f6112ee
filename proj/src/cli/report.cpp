#include "skipvit/cli/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>

#include "json.hpp"
#include "skipvit/errors.hpp"

namespace skipvit::cli {

namespace {

using Json = nlohmann::ordered_json;

template <typename T>
Json optional_json(const std::optional<T>& v) {
  return v ? Json(*v) : Json(nullptr);
}

std::string list_text(const skipdrop::DropSchedule& s, bool ratios) {
  if (s.stages.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < s.stages.size(); ++i) {
    if (i) out += ",";
    out += ratios ? fmt::format("{:g}%", s.stages[i].ratio * 100.0)
                  : std::to_string(s.stages[i].layer);
  }
  return out;
}

std::string target_text(const skipdrop::DropSchedule& s) {
  using skipdrop::DropMode;
  std::string out;
  if (s.mode == DropMode::kNone) return "-";
  if (s.mode == DropMode::kFuse) {
    out = "fused token";
  } else {
    out = "skip->" + (s.skip_target ? std::to_string(*s.skip_target) : std::string("?"));
  }
  if (s.drop_after_ffn) out += " (after FFN)";
  return out;
}

/// Rounds to `decimals` and drops the sign of a zero result.
double tidy(double v, int decimals) {
  const double scale = std::pow(10.0, decimals);
  const double r = std::round(v * scale) / scale;
  return r == 0.0 ? 0.0 : r;
}

/// Thousands separators for integer rounding; values below 1000 keep one decimal.
std::string grouped(double value) {
  if (std::abs(value) < 999.95) return fmt::format("{:.1f}", value);
  const auto rounded = static_cast<long long>(std::llround(value));
  std::string digits = std::to_string(rounded < 0 ? -rounded : rounded);
  std::string out;
  for (std::size_t i = 0; i < digits.size(); ++i) {
    if (i && (digits.size() - i) % 3 == 0) out += ',';
    out += digits[i];
  }
  return rounded < 0 ? "-" + out : out;
}

}  // namespace

std::string to_json(const RunSummary& s) {
  Json j;
  j["arm"] = s.arm;
  j["identity"] = s.identity;
  j["mode"] = skipdrop::to_string(s.schedule.mode);
  Json layers = Json::array(), ratios = Json::array();
  for (const auto& st : s.schedule.stages) {
    layers.push_back(st.layer);
    ratios.push_back(st.ratio);
  }
  j["drop_layers"] = layers;
  j["drop_ratios"] = ratios;
  j["skip_target"] = optional_json(s.schedule.skip_target);
  j["warmup_epochs"] = s.schedule.warmup_epochs;
  j["drop_after_ffn"] = s.schedule.drop_after_ffn;
  j["top1"] = optional_json(s.top1);
  j["samples_per_sec"] = optional_json(s.samples_per_sec);
  j["predicted_saving"] = s.predicted_saving;
  return j.dump();
}

RunSummary summary_from_json(const std::string& text) {
  RunSummary s;
  try {
    const Json j = Json::parse(text);
    s.arm = j.at("arm").get<std::string>();
    s.identity = j.at("identity").get<std::string>();
    s.schedule.mode = skipdrop::parse_drop_mode(j.at("mode").get<std::string>());
    const auto layers = j.at("drop_layers").get<std::vector<std::size_t>>();
    const auto ratios = j.at("drop_ratios").get<std::vector<double>>();
    if (layers.size() != ratios.size()) {
      throw ValidationError("summary: drop_layers and drop_ratios differ in length");
    }
    for (std::size_t i = 0; i < layers.size(); ++i) s.schedule.stages.push_back({layers[i], ratios[i]});
    if (!j.at("skip_target").is_null()) s.schedule.skip_target = j.at("skip_target").get<std::size_t>();
    s.schedule.warmup_epochs = j.at("warmup_epochs").get<std::size_t>();
    s.schedule.drop_after_ffn = j.at("drop_after_ffn").get<bool>();
    if (!j.at("top1").is_null()) s.top1 = j.at("top1").get<double>();
    if (!j.at("samples_per_sec").is_null()) s.samples_per_sec = j.at("samples_per_sec").get<double>();
    s.predicted_saving = j.at("predicted_saving").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("summary: ") + e.what());
  }
  if (s.identity != s.schedule.identity()) {
    throw ValidationError("summary: identity '" + s.identity + "' does not match its schedule fields");
  }
  return s;
}

std::vector<RunSummary> read_summaries(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("report: cannot read '" + path.string() + "'");
  std::vector<RunSummary> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(summary_from_json(line));
    } catch (const ValidationError& e) {
      throw ValidationError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
  }
  return out;
}

std::string format_throughput(double value, double baseline) {
  return fmt::format("{}({:+.2f}%)", grouped(value), tidy((value / baseline - 1.0) * 100.0, 2));
}

std::string format_top1(double value, double baseline) {
  return fmt::format("{:.2f}({:+.2f})", value, tidy(value - baseline, 2));
}

std::vector<ReportRow> join_summaries(const std::vector<RunSummary>& summaries) {
  std::vector<std::string> keys;
  std::vector<ReportRow> rows;
  for (const auto& s : summaries) {
    std::size_t i = 0;
    while (i < keys.size() && keys[i] != s.identity) ++i;
    if (i == keys.size()) {
      keys.push_back(s.identity);
      ReportRow row;
      row.layers = list_text(s.schedule, false);
      row.ratios = list_text(s.schedule, true);
      row.target = target_text(s.schedule);
      row.predicted_saving = s.predicted_saving;
      row.baseline = s.schedule.mode == skipdrop::DropMode::kNone;
      rows.push_back(row);
    }
    auto& row = rows[i];
    auto merge = [&](std::optional<double>& into, const std::optional<double>& from,
                     const char* field) {
      if (!from) return;
      if (into) {
        throw ValidationError(std::string("report: two records give ") + field + " for '" +
                              s.identity + "'");
      }
      into = from;
    };
    merge(row.samples_per_sec, s.samples_per_sec, "samples_per_sec");
    merge(row.top1, s.top1, "top1");
  }
  auto base = std::find_if(rows.begin(), rows.end(), [](const ReportRow& r) { return r.baseline; });
  if (base == rows.end()) throw ValidationError("report: no baseline (schedule none) row");
  std::rotate(rows.begin(), base, base + 1);
  return rows;
}

std::string format_report(const std::vector<RunSummary>& summaries) {
  const auto rows = join_summaries(summaries);
  const auto& base = rows.front();
  std::vector<std::vector<std::string>> cells = {{"Dropping layers", "Drop ratio",
                                                  "Skip target", "Throughput (Speedup)",
                                                  "Acc. Top-1(%)", "Predicted MAC saving"}};
  for (const auto& r : rows) {
    std::string fps = "n/a", acc = "n/a";
    if (r.samples_per_sec) {
      fps = base.samples_per_sec ? format_throughput(*r.samples_per_sec, *base.samples_per_sec)
                                 : grouped(*r.samples_per_sec);
    }
    if (r.top1) {
      acc = base.top1 ? format_top1(*r.top1, *base.top1) : fmt::format("{:.2f}", *r.top1);
    }
    cells.push_back({r.layers, r.ratios, r.target, fps, acc,
                     fmt::format("{:.2f}%", tidy(r.predicted_saving * 100.0, 2))});
  }
  std::vector<std::size_t> width(cells.front().size(), 0);
  for (const auto& row : cells) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::string out = "# throughput in samples/sec (Delta% vs baseline); saving in MACs\n";
  for (std::size_t r = 0; r < cells.size(); ++r) {
    std::string line = "|";
    for (std::size_t c = 0; c < cells[r].size(); ++c) {
      line += " " + fmt::format("{:<{}}", cells[r][c], width[c]) + " |";
    }
    out += line + "\n";
    if (r == 0) {
      std::string rule = "|";
      for (auto w : width) rule += std::string(w + 2, '-') + "|";
      out += rule + "\n";
    }
  }
  return out;
}

}  // namespace skipvit::cli
