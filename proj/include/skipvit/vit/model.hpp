#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "skipvit/numerics/tensor.hpp"
#include "skipvit/skipdrop/schedule.hpp"
#include "skipvit/skipdrop/skipdrop.hpp"
#include "skipvit/vit/config.hpp"
#include "skipvit/vit/token_batch.hpp"

namespace skipvit::vit {

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

/// Live token counts entering each sublayer of one block.
struct LayerTokens {
  std::size_t attention = 0;
  std::size_t ffn = 0;
};

struct ForwardOptions {
  bool keep_attention_records = false;
  /// Verify the TokenBatch and stash partition invariants after every
  /// split/reinsert.
  bool check_invariants = true;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;  // [batch, num_classes]
  std::vector<LayerTokens> layer_tokens;
  std::vector<skipdrop::StageOutcome> stages;
  std::vector<AttentionRecord<T>> records;
  std::vector<std::int32_t> final_positions;  // positions entering the head
};

/// ViT backbone: patch embedding, CLS token, learned positions, pre-norm
/// blocks and a linear head on the final CLS embedding.
template <typename T>
class VisionTransformer {
 public:
  /// Truncated-normal(0.02) weights, zero biases, unit norm gains.
  VisionTransformer(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::vector<NamedParameter<T>>& parameters() { return params_; }
  const std::vector<NamedParameter<T>>& parameters() const { return params_; }
  /// Throws std::out_of_range for unknown names.
  Tensor<T>& parameter(const std::string& name);
  std::size_t parameter_count() const;
  void zero_grad();

  /// Independent deep copy with identical weights.
  VisionTransformer clone() const;

  /// images: [batch, channels, image_size, image_size].
  TokenBatch<T> patchify(const Tensor<T>& images) const;
  /// LN -> multi-head softmax(QK^T/sqrt(d))V -> projection -> residual.
  std::pair<TokenBatch<T>, AttentionRecord<T>> attention_block(const TokenBatch<T>& tokens,
                                                               std::size_t layer) const;
  /// LN -> linear -> GELU -> linear -> residual.
  TokenBatch<T> ffn_block(const TokenBatch<T>& tokens, std::size_t layer) const;
  /// Final LN on the CLS row, then the linear head.
  Tensor<T> classify(const TokenBatch<T>& tokens) const;

  /// Full pass with the drop mechanism. Dropping happens at stage layers once
  /// `epoch` reaches the schedule's warm-up; stashed tokens return at the input
  /// of the skip target. The schedule is assumed validated.
  ForwardResult<T> forward(const Tensor<T>& images, const skipdrop::DropSchedule& schedule,
                           std::size_t epoch, const ForwardOptions& options = {}) const;

  /// Reference pass with no drop hooks at all.
  Tensor<T> forward_plain(const Tensor<T>& images) const;

 private:
  struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]
  };
  struct Norm {
    Tensor<T> gain;
    Tensor<T> bias;
  };
  struct Block {
    Norm norm1;
    Linear q, k, v, proj;
    Norm norm2;
    Linear fc1, fc2;
  };

  VisionTransformer(const ModelConfig& config, std::vector<NamedParameter<T>> params);
  void bind();
  Tensor<T> linear(const Tensor<T>& x, const Linear& layer) const;
  Tensor<T> norm(const Tensor<T>& x, const Norm& layer) const;
  void check_layer(std::size_t layer) const;

  ModelConfig config_;
  std::vector<NamedParameter<T>> params_;
  Linear patch_embed_;
  Tensor<T> cls_token_;  // [1, embed_dim]
  Tensor<T> pos_embed_;  // [tokens, embed_dim]
  std::vector<Block> blocks_;
  Norm final_norm_;
  Linear head_;
};

extern template class VisionTransformer<float>;
extern template class VisionTransformer<double>;

}  // namespace skipvit::vit
