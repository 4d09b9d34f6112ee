#include "skipvit/cli/flops.hpp"

#include <fmt/format.h>

#include "skipvit/errors.hpp"
#include "skipvit/skipdrop/schedule.hpp"

namespace skipvit::cli {

namespace {

CostBreakdown walk(const vit::ModelConfig& c, const skipdrop::DropSchedule& schedule) {
  using skipdrop::DropMode;
  const std::uint64_t d = c.embed_dim;
  auto attention = [&](std::uint64_t n) { return 4 * n * d * d + 2 * n * n * d; };
  auto ffn = [&](std::uint64_t n) { return 2 * c.ffn_ratio * n * d * d; };

  CostBreakdown out;
  out.patch_embed_macs = std::uint64_t(c.patch_count()) * c.patch_dim() * d;
  out.head_macs = d * c.num_classes;

  std::size_t patches = c.patch_count();  // droppable live patches
  std::size_t fused = 0;
  std::size_t stashed = 0;
  auto drop = [&](const skipdrop::DropStage& stage, LayerCost& cost) {
    const std::size_t kept = skipdrop::keep_count(patches, stage.ratio);
    const std::size_t dropped = patches - kept;
    patches = kept;
    if (schedule.mode == DropMode::kSkip) {
      stashed += dropped;
    } else if (dropped > 0) {
      cost.fuse_macs += dropped * d;
      ++fused;
    }
  };
  for (std::size_t l = 0; l < c.depth; ++l) {
    LayerCost cost;
    cost.layer = l;
    if (schedule.mode == DropMode::kSkip && schedule.skip_target == l) {
      patches += stashed;
      stashed = 0;
    }
    const auto* stage = schedule.stage_at(l);
    cost.attention_tokens = 1 + patches + fused;
    cost.attention_macs = attention(cost.attention_tokens);
    if (stage && !schedule.drop_after_ffn) drop(*stage, cost);
    cost.ffn_tokens = 1 + patches + fused;
    cost.ffn_macs = ffn(cost.ffn_tokens);
    if (stage && schedule.drop_after_ffn) drop(*stage, cost);
    out.layers.push_back(cost);
  }
  return out;
}

}  // namespace

std::uint64_t CostBreakdown::total() const {
  std::uint64_t sum = patch_embed_macs + head_macs;
  for (const auto& l : layers) sum += l.total();
  return sum;
}

double CostReport::saving() const {
  return 1.0 - double(scheduled.total()) / double(baseline.total());
}

CostReport estimate_flops(const vit::ModelConfig& config, const skipdrop::DropSchedule& schedule) {
  vit::validate(config);
  skipdrop::validate(schedule, config);
  return estimate_flops_unchecked(config, schedule);
}

CostReport estimate_flops_unchecked(const vit::ModelConfig& config,
                                    const skipdrop::DropSchedule& schedule) {
  for (const auto& stage : schedule.stages) {
    if (stage.layer >= config.depth) {
      throw ContractError("estimate_flops: drop layer " + std::to_string(stage.layer) +
                          " beyond depth " + std::to_string(config.depth));
    }
  }
  if (schedule.mode == skipdrop::DropMode::kSkip &&
      (!schedule.skip_target || *schedule.skip_target >= config.depth ||
       (!schedule.stages.empty() && schedule.stages.back().layer >= *schedule.skip_target))) {
    throw ContractError("estimate_flops: stashed tokens would never be reinserted");
  }
  return {walk(config, skipdrop::DropSchedule::none()), walk(config, schedule)};
}

std::string format_cost_report(const vit::ModelConfig& config,
                               const skipdrop::DropSchedule& schedule, const CostReport& report) {
  std::string out;
  out += "# unit: MAC (one multiply-accumulate), per sample, forward pass\n";
  out += fmt::format("# model: depth {} embed_dim {} heads {} ffn_ratio {} tokens {}\n",
                     config.depth, config.embed_dim, config.heads, config.ffn_ratio,
                     config.token_count());
  out += fmt::format("# schedule: {}\n", schedule.identity());
  out += fmt::format("{:>5} {:>7} {:>7} {:>16} {:>16} {:>12} {:>16} {:>16}\n", "layer",
                     "n_attn", "n_ffn", "attention_macs", "ffn_macs", "fuse_macs",
                     "base_attention", "base_ffn");
  for (std::size_t l = 0; l < report.scheduled.layers.size(); ++l) {
    const auto& s = report.scheduled.layers[l];
    const auto& b = report.baseline.layers[l];
    out += fmt::format("{:>5} {:>7} {:>7} {:>16} {:>16} {:>12} {:>16} {:>16}\n", l,
                       s.attention_tokens, s.ffn_tokens, s.attention_macs, s.ffn_macs, s.fuse_macs,
                       b.attention_macs, b.ffn_macs);
  }
  out += fmt::format("patch_embed_macs {}\n", report.scheduled.patch_embed_macs);
  out += fmt::format("head_macs {}\n", report.scheduled.head_macs);
  out += fmt::format("baseline_total_macs {}\n", report.baseline.total());
  out += fmt::format("schedule_total_macs {}\n", report.scheduled.total());
  out += fmt::format("saving {:.6f}\n", report.saving());
  return out;
}

}  // namespace skipvit::cli
