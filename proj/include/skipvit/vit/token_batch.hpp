#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "skipvit/numerics/tensor.hpp"

namespace skipvit::vit {

using numerics::Tensor;

/// Position index of the CLS token.
inline constexpr std::int32_t kClsPosition = 0;

/// Fused tokens take positions past the last patch: patch_count + 1 + ordinal.
inline bool is_fused_position(std::int32_t position, std::size_t patch_count) {
  return position > static_cast<std::int32_t>(patch_count);
}

/// Token embeddings for a batch plus, per sample, the original position of
/// each row (CLS = 0, patches 1..n). Samples may keep different tokens but
/// always the same number of them.
template <typename T>
struct TokenBatch {
  Tensor<T> embeddings;                 // [batch, tokens, embed_dim]
  std::vector<std::int32_t> positions;  // [batch * tokens]
  std::size_t patch_count = 0;          // n of the source image
  std::size_t layer_index = 0;

  std::size_t batch() const { return embeddings.dim(0); }
  std::size_t tokens() const { return embeddings.dim(1); }
  std::size_t width() const { return embeddings.dim(2); }
  std::span<const std::int32_t> positions_of(std::size_t sample) const {
    return {positions.data() + sample * tokens(), tokens()};
  }

  /// Unique positions per sample, CLS present, list length matches rows.
  /// Throws ContractError.
  void check_invariants() const;
};

/// Softmax(QK^T / sqrt(d)) of one layer, with the positions of its rows.
template <typename T>
struct AttentionRecord {
  Tensor<T> scores;  // [batch, heads, tokens, tokens]
  std::vector<std::int32_t> positions;
  std::size_t patch_count = 0;
  std::size_t layer_index = 0;

  std::size_t batch() const { return scores.dim(0); }
  std::size_t heads() const { return scores.dim(1); }
  std::size_t tokens() const { return scores.dim(2); }
};

extern template struct TokenBatch<float>;
extern template struct TokenBatch<double>;

}  // namespace skipvit::vit
