#include "skipvit/skipdrop/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "skipvit/errors.hpp"

namespace skipvit::skipdrop {

std::string to_string(DropMode mode) {
  switch (mode) {
    case DropMode::kNone:
      return "none";
    case DropMode::kSkip:
      return "skip";
    case DropMode::kFuse:
      return "fuse";
  }
  return "none";
}

DropMode parse_drop_mode(const std::string& text) {
  if (text == "none") return DropMode::kNone;
  if (text == "skip") return DropMode::kSkip;
  if (text == "fuse") return DropMode::kFuse;
  throw ValidationError("schedule.mode: unknown mode '" + text + "' (expected none, skip or fuse)");
}

DropSchedule DropSchedule::skip(std::vector<DropStage> stages, std::size_t target,
                                std::size_t warmup_epochs) {
  DropSchedule s;
  s.stages = std::move(stages);
  s.skip_target = target;
  s.mode = DropMode::kSkip;
  s.warmup_epochs = warmup_epochs;
  return s;
}

DropSchedule DropSchedule::fuse(std::vector<DropStage> stages, std::size_t warmup_epochs) {
  DropSchedule s;
  s.stages = std::move(stages);
  s.mode = DropMode::kFuse;
  s.warmup_epochs = warmup_epochs;
  return s;
}

const DropStage* DropSchedule::stage_at(std::size_t layer) const {
  for (const auto& stage : stages) {
    if (stage.layer == layer) return &stage;
  }
  return nullptr;
}

std::string DropSchedule::identity() const {
  std::ostringstream out;
  out << "mode=" << to_string(mode);
  if (mode == DropMode::kNone) return out.str();
  out << ";layers=";
  for (std::size_t i = 0; i < stages.size(); ++i) out << (i ? "," : "") << stages[i].layer;
  out << ";ratios=";
  for (std::size_t i = 0; i < stages.size(); ++i) out << (i ? "," : "") << stages[i].ratio;
  out << ";target=";
  if (skip_target) {
    out << *skip_target;
  } else {
    out << "none";
  }
  out << ";after_ffn=" << (drop_after_ffn ? 1 : 0);
  return out.str();
}

void validate(const DropSchedule& s, const vit::ModelConfig& config) {
  const std::size_t depth = config.depth;
  if (s.mode == DropMode::kNone) {
    if (!s.stages.empty()) {
      throw ValidationError("schedule.drop_layers: mode none takes no drop layers");
    }
    if (s.skip_target) throw ValidationError("schedule.skip_target: mode none takes no skip target");
    return;
  }
  if (s.stages.empty()) {
    throw ValidationError("schedule.drop_layers: mode " + to_string(s.mode) +
                          " needs at least one drop layer");
  }
  for (std::size_t i = 0; i < s.stages.size(); ++i) {
    const auto& stage = s.stages[i];
    if (!std::isfinite(stage.ratio) || stage.ratio < 0.0 || stage.ratio >= 1.0) {
      std::ostringstream msg;
      msg << "schedule.drop_ratios: ratio " << stage.ratio << " at layer " << stage.layer
          << " outside [0, 1)";
      throw ValidationError(msg.str());
    }
    if (stage.layer == 0) {
      throw ValidationError("schedule.drop_layers: layer 0 cannot drop tokens");
    }
    if (stage.layer + 1 >= depth) {
      throw ValidationError("schedule.drop_layers: layer " + std::to_string(stage.layer) +
                            " is the final layer or beyond (depth " + std::to_string(depth) + ")");
    }
    if (i > 0 && stage.layer <= s.stages[i - 1].layer) {
      throw ValidationError("schedule.drop_layers: layers must be strictly increasing");
    }
  }
  if (s.mode == DropMode::kFuse) {
    if (s.skip_target) {
      throw ValidationError("schedule.skip_target: fuse mode does not reinsert tokens");
    }
    return;
  }
  if (!s.skip_target) throw ValidationError("schedule.skip_target: skip mode needs a target layer");
  const std::size_t target = *s.skip_target;
  if (target >= depth) {
    throw ValidationError("schedule.skip_target: " + std::to_string(target) +
                          " not below depth " + std::to_string(depth));
  }
  if (s.stages.back().layer >= target) {
    throw ValidationError("schedule.skip_target: " + std::to_string(target) +
                          " does not follow drop layer " + std::to_string(s.stages.back().layer));
  }
}

std::size_t keep_count(std::size_t patch_count, double ratio) {
  const double exact = static_cast<double>(patch_count) * (1.0 - ratio);
  // Ratios like 0.3 are not representable; 100 * (1 - 0.3) evaluates to
  // 70.00000000000001 and must still keep 70.
  const double slack = 1e-9 * std::max(1.0, static_cast<double>(patch_count));
  const auto kept = static_cast<std::size_t>(std::ceil(exact - slack));
  return std::min(kept, patch_count);
}

}  // namespace skipvit::skipdrop
