#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

namespace skipvit::trainer {

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 30;
  double weight_decay = 0.05;
  double learning_rate = 1e-3;
  double warmup_lr = 1e-6;
  std::size_t lr_warmup_epochs = 3;
  double mixup = 0.0;  // recognised, only 0 is supported
  std::uint64_t seed = 0;
  int precision = 32;  // 32 or 64 bit scalars
  /// Apply the drop schedule during evaluation too.
  bool eval_dropping = true;
  /// Stop after this many optimizer steps (0 = run all epochs).
  std::size_t max_steps = 0;
  /// Evaluate the validation split every this many epochs, and always after the last.
  std::size_t eval_every = 1;

  /// Table-3 hyperparameters (batch 288, 100 epochs, weight decay 0.5, mixup 0.1).
  static TrainConfig paper();
  static TrainConfig desk() { return {}; }
  /// "desk" or "paper-vit-small"; throws ValidationError otherwise.
  static TrainConfig preset(const std::string& name);

  bool operator==(const TrainConfig&) const = default;
};

/// Throws ValidationError naming the field; mixup other than 0 fails as not implemented.
void validate(const TrainConfig& config);

}  // namespace skipvit::trainer
