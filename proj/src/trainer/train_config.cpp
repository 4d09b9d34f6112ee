#include "skipvit/trainer/train_config.hpp"

#include <cmath>

#include "skipvit/errors.hpp"

namespace skipvit::trainer {

TrainConfig TrainConfig::paper() {
  TrainConfig c;
  c.batch_size = 288;
  c.epochs = 100;
  c.weight_decay = 0.5;
  c.learning_rate = 1e-3;
  c.warmup_lr = 1e-6;
  c.lr_warmup_epochs = 5;
  c.mixup = 0.1;
  return c;
}

TrainConfig TrainConfig::preset(const std::string& name) {
  if (name == "desk") return desk();
  if (name == "paper-vit-small") return paper();
  throw ValidationError("train.preset: unknown preset '" + name + "' (expected desk or paper-vit-small)");
}

void validate(const TrainConfig& c) {
  auto positive = [](double v, const char* field) {
    if (!(v > 0) || !std::isfinite(v)) {
      throw ValidationError(std::string(field) + ": must be positive, got " + std::to_string(v));
    }
  };
  if (c.batch_size < 1) throw ValidationError("train.batch_size: must be at least 1");
  if (c.epochs < 1) throw ValidationError("train.epochs: must be at least 1");
  positive(c.learning_rate, "train.learning_rate");
  positive(c.warmup_lr, "train.warmup_lr");
  if (!(c.weight_decay >= 0) || !std::isfinite(c.weight_decay)) {
    throw ValidationError("train.weight_decay: must be non-negative");
  }
  if (c.lr_warmup_epochs > c.epochs) {
    throw ValidationError("train.lr_warmup_epochs: " + std::to_string(c.lr_warmup_epochs) +
                          " exceeds train.epochs " + std::to_string(c.epochs));
  }
  if (c.mixup != 0.0) {
    throw ValidationError("train.mixup: mixup is not implemented; set it to 0");
  }
  if (c.precision != 32 && c.precision != 64) {
    throw ValidationError("train.precision: must be 32 or 64, got " + std::to_string(c.precision));
  }
  if (c.eval_every < 1) throw ValidationError("train.eval_every: must be at least 1");
}

}  // namespace skipvit::trainer
