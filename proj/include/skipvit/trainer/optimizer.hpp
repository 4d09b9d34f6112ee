#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "skipvit/vit/model.hpp"

namespace skipvit::trainer {

struct TrainConfig;

/// Adam with decoupled weight decay:
///   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)
/// Decay applies only where the mask is set.
template <typename T>
class AdamW {
 public:
  struct Settings {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  /// Default mask: matrices decay; biases, norm parameters, cls_token and
  /// pos_embed do not.
  explicit AdamW(const std::vector<vit::NamedParameter<T>>& params, Settings settings);
  explicit AdamW(const std::vector<vit::NamedParameter<T>>& params)
      : AdamW(params, Settings{}) {}
  AdamW(const std::vector<vit::NamedParameter<T>>& params, std::vector<bool> decay_mask,
        Settings settings = {});

  /// Missing gradients count as zero. Throws NumericError naming the first
  /// parameter with a non-finite gradient; nothing is updated in that case.
  void step(std::vector<vit::NamedParameter<T>>& params, double lr, double weight_decay);

  std::uint64_t steps() const { return step_; }
  const std::vector<std::vector<T>>& first_moment() const { return m_; }
  const std::vector<std::vector<T>>& second_moment() const { return v_; }
  const std::vector<bool>& decay_mask() const { return decay_; }

 private:
  Settings settings_;
  std::uint64_t step_ = 0;
  std::vector<bool> decay_;
  std::vector<std::vector<T>> m_, v_;
};

/// Linear ramp from warmup_lr to learning_rate over lr_warmup_epochs, then
/// cosine back down to warmup_lr at the last step of the run.
double lr_at(const TrainConfig& config, std::size_t epoch, std::size_t step_in_epoch,
             std::size_t steps_per_epoch);

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace skipvit::trainer
