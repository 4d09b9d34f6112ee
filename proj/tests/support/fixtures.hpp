#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "skipvit/vit/config.hpp"
#include "skipvit/vit/model.hpp"

namespace skipvit::testing {

/// depth 2, D=8, 2 heads, 8x8 image at patch 4 (4 patches), 3 classes.
inline vit::ModelConfig tiny_config() {
  vit::ModelConfig c;
  c.depth = 2;
  c.heads = 2;
  c.embed_dim = 8;
  c.ffn_ratio = 2;
  c.patch_size = 4;
  c.image_size = 8;
  c.channels = 3;
  c.num_classes = 3;
  return c;
}

/// 32x32 at patch 4 (65 tokens) with a narrow width so deep stacks stay cheap.
inline vit::ModelConfig narrow_config(std::size_t depth) {
  vit::ModelConfig c = vit::ModelConfig::desk();
  c.depth = depth;
  c.embed_dim = 16;
  c.heads = 2;
  c.ffn_ratio = 2;
  return c;
}

template <typename T>
numerics::Tensor<T> random_images(const vit::ModelConfig& c, std::size_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<T> data(batch * c.channels * c.image_size * c.image_size);
  for (auto& v : data) v = static_cast<T>(dist(rng));
  return numerics::Tensor<T>({batch, c.channels, c.image_size, c.image_size}, std::move(data));
}

/// Overwrites every element of a named parameter.
template <typename T>
void fill_parameter(vit::VisionTransformer<T>& model, const std::string& name, T value) {
  auto data = model.parameter(name).mutable_data();
  std::fill(data.begin(), data.end(), value);
}

template <typename T>
void set_identity(vit::VisionTransformer<T>& model, const std::string& name) {
  auto& t = model.parameter(name);
  auto data = t.mutable_data();
  std::fill(data.begin(), data.end(), T(0));
  const std::size_t n = std::min(t.dim(0), t.dim(1));
  for (std::size_t i = 0; i < n; ++i) data[i * t.dim(1) + i] = T(1);
}

/// Scales every weight matrix so attention is far from uniform in tiny models.
template <typename T>
void sharpen(vit::VisionTransformer<T>& model, T factor) {
  for (auto& p : model.parameters()) {
    if (p.tensor.ndim() < 2) continue;
    for (auto& v : p.tensor.mutable_data()) v *= factor;
  }
}

}  // namespace skipvit::testing
