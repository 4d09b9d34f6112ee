#pragma once

#include <cstddef>
#include <string>

namespace skipvit::vit {

/// Backbone shape. Layer indices elsewhere in the project are 0-based
/// against `depth`.
struct ModelConfig {
  std::size_t depth = 12;
  std::size_t heads = 6;
  std::size_t embed_dim = 384;
  std::size_t ffn_ratio = 4;
  std::size_t patch_size = 16;
  std::size_t image_size = 224;
  std::size_t channels = 3;
  std::size_t num_classes = 1000;
  double layernorm_eps = 1e-6;

  /// ViT-small layout at 224x224 (embed width 384 by ViT-small convention).
  static ModelConfig paper_vit_small();
  /// Desk-scale model for 32x32 inputs: depth 6, width 128, 4 heads, patch 4.
  static ModelConfig desk();
  /// Resolves "paper-vit-small" / "desk"; throws ValidationError otherwise.
  static ModelConfig preset(const std::string& name);

  std::size_t head_dim() const { return embed_dim / heads; }
  std::size_t grid() const { return image_size / patch_size; }
  std::size_t patch_count() const { return grid() * grid(); }
  /// Patches plus the CLS token.
  std::size_t token_count() const { return patch_count() + 1; }
  std::size_t patch_dim() const { return channels * patch_size * patch_size; }
  std::size_t ffn_dim() const { return embed_dim * ffn_ratio; }

  bool operator==(const ModelConfig&) const = default;
};

/// Throws ValidationError naming the offending field.
void validate(const ModelConfig& config);

}  // namespace skipvit::vit
