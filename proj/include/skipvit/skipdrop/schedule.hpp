#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "skipvit/vit/config.hpp"

namespace skipvit::skipdrop {

enum class DropMode {
  kNone,  // mechanism off
  kSkip,  // stash dropped tokens, reinsert at skip_target
  kFuse,  // replace dropped tokens with one importance-weighted token
};

std::string to_string(DropMode mode);
/// Parses "none" / "skip" / "fuse"; throws ValidationError.
DropMode parse_drop_mode(const std::string& text);

struct DropStage {
  std::size_t layer = 0;  // 0-based transformer block index
  double ratio = 0.0;     // fraction of the currently live patch tokens to drop

  bool operator==(const DropStage&) const = default;
};

/// Where, how many and in which mode tokens leave the sequence, and where
/// they come back.
struct DropSchedule {
  std::vector<DropStage> stages;
  std::optional<std::size_t> skip_target;
  DropMode mode = DropMode::kNone;
  std::size_t warmup_epochs = 0;
  bool drop_after_ffn = false;

  static DropSchedule none() { return {}; }
  static DropSchedule skip(std::vector<DropStage> stages, std::size_t target,
                           std::size_t warmup_epochs = 0);
  static DropSchedule fuse(std::vector<DropStage> stages, std::size_t warmup_epochs = 0);

  /// Dropping runs only once the warm-up epochs have elapsed.
  bool active_at(std::size_t epoch) const {
    return mode != DropMode::kNone && epoch >= warmup_epochs;
  }
  const DropStage* stage_at(std::size_t layer) const;

  /// Canonical text of the topology (mode, layers, ratios, target, placement);
  /// warm-up is excluded. Used to join result files.
  std::string identity() const;

  bool operator==(const DropSchedule&) const = default;
};

/// Enforces every schedule invariant against the model depth. Throws
/// ValidationError naming the offending field.
void validate(const DropSchedule& schedule, const vit::ModelConfig& config);

/// ceil(patch_count * (1 - ratio)), robust to the representation error of
/// decimal ratios such as 0.3.
std::size_t keep_count(std::size_t patch_count, double ratio);

}  // namespace skipvit::skipdrop
