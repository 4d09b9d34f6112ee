#include "skipvit/trainer/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "skipvit/errors.hpp"
#include "skipvit/trainer/train_config.hpp"

namespace skipvit::trainer {

namespace {

template <typename T>
std::vector<bool> matrices_only(const std::vector<vit::NamedParameter<T>>& params) {
  std::vector<bool> mask;
  mask.reserve(params.size());
  for (const auto& p : params) {
    mask.push_back(p.tensor.ndim() >= 2 && p.name != "cls_token" && p.name != "pos_embed");
  }
  return mask;
}

}  // namespace

template <typename T>
AdamW<T>::AdamW(const std::vector<vit::NamedParameter<T>>& params, Settings settings)
    : AdamW(params, matrices_only(params), settings) {}

template <typename T>
AdamW<T>::AdamW(const std::vector<vit::NamedParameter<T>>& params, std::vector<bool> decay_mask,
                Settings settings)
    : settings_(settings), decay_(std::move(decay_mask)) {
  if (decay_.size() != params.size()) {
    throw ContractError("AdamW: decay mask covers " + std::to_string(decay_.size()) +
                        " parameters, model has " + std::to_string(params.size()));
  }
  for (const auto& p : params) {
    m_.emplace_back(p.tensor.numel(), T(0));
    v_.emplace_back(p.tensor.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(std::vector<vit::NamedParameter<T>>& params, double lr, double weight_decay) {
  if (params.size() != m_.size()) {
    throw ContractError("AdamW: parameter list changed size since construction");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = params[i].tensor;
    if (t.numel() != m_[i].size()) {
      throw ContractError("AdamW: parameter '" + params[i].name + "' changed shape");
    }
    for (T g : t.grad()) {
      if (!std::isfinite(g)) {
        throw NumericError("AdamW: non-finite gradient in parameter '" + params[i].name + "'");
      }
    }
  }
  ++step_;
  const double b1 = settings_.beta1, b2 = settings_.beta2;
  const double c1 = 1.0 - std::pow(b1, double(step_));
  const double c2 = 1.0 - std::pow(b2, double(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& t = params[i].tensor;
    auto data = t.mutable_data();
    const auto grad = t.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    const double wd = decay_[i] ? weight_decay : 0.0;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad.empty() ? 0.0 : double(grad[j]);
      const double mj = b1 * m[j] + (1 - b1) * g;
      const double vj = b2 * v[j] + (1 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / c1) / (std::sqrt(vj / c2) + settings_.eps) + wd * double(data[j]);
      data[j] = static_cast<T>(double(data[j]) - lr * update);
    }
  }
}

double lr_at(const TrainConfig& config, std::size_t epoch, std::size_t step_in_epoch,
             std::size_t steps_per_epoch) {
  const double lo = config.warmup_lr, hi = config.learning_rate;
  const std::size_t step = epoch * steps_per_epoch + step_in_epoch;
  const std::size_t ramp = config.lr_warmup_epochs * steps_per_epoch;
  const std::size_t last = config.epochs * steps_per_epoch - 1;
  if (step < ramp) return lo + (hi - lo) * double(step) / double(ramp);
  if (last <= ramp) return hi;
  const double progress = std::min(1.0, double(step - ramp) / double(last - ramp));
  return lo + 0.5 * (hi - lo) * (1.0 + std::cos(std::numbers::pi * progress));
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace skipvit::trainer
