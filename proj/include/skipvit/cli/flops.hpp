#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "skipvit/skipdrop/schedule.hpp"
#include "skipvit/vit/config.hpp"

namespace skipvit::cli {

/// Multiply-accumulates of one block for a single sample.
struct LayerCost {
  std::size_t layer = 0;
  std::size_t attention_tokens = 0;
  std::size_t ffn_tokens = 0;
  std::uint64_t attention_macs = 0;
  std::uint64_t ffn_macs = 0;
  std::uint64_t fuse_macs = 0;  // weighted average over the dropped set

  std::uint64_t total() const { return attention_macs + ffn_macs + fuse_macs; }
};

struct CostBreakdown {
  std::vector<LayerCost> layers;
  std::uint64_t patch_embed_macs = 0;
  std::uint64_t head_macs = 0;

  std::uint64_t total() const;
};

/// MAC counts per sample for the full topology and for the schedule with
/// dropping active.
struct CostReport {
  CostBreakdown baseline;
  CostBreakdown scheduled;

  /// 1 - scheduled / baseline.
  double saving() const;
};

/// Exact forward MACs of the model, following the schedule's keep counts,
/// placement, fused tokens and reinsertion. Validates the schedule.
CostReport estimate_flops(const vit::ModelConfig& config, const skipdrop::DropSchedule& schedule);

/// Same count for any schedule the forward pass can execute, including drop
/// layers outside the validated range. Throws ContractError if stashed tokens
/// could never return.
CostReport estimate_flops_unchecked(const vit::ModelConfig& config,
                                    const skipdrop::DropSchedule& schedule);

/// Structured text with a header naming the unit.
std::string format_cost_report(const vit::ModelConfig& config,
                               const skipdrop::DropSchedule& schedule, const CostReport& report);

}  // namespace skipvit::cli
