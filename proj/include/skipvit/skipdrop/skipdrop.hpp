#pragma once

// Attention-score token dropping: CLS-row importance, top-k partitioning,
// the stash that carries dropped tokens around the skipped layers, their
// positional reinsertion, and the fused-token baseline.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "skipvit/skipdrop/schedule.hpp"
#include "skipvit/vit/token_batch.hpp"

namespace skipvit::skipdrop {

using numerics::Tensor;
using vit::AttentionRecord;
using vit::TokenBatch;

/// Head-averaged CLS-query attention over the non-CLS rows of a layer.
template <typename T>
struct ImportanceVector {
  Tensor<T> scores;                     // [batch, tokens - 1]; differentiable
  std::vector<std::int32_t> positions;  // [batch * (tokens - 1)], aligned with scores
  std::size_t patch_count = 0;
  std::size_t source_layer = 0;

  std::size_t batch() const { return scores.dim(0); }
  std::size_t length() const { return scores.dim(1); }
};

/// Per-sample keep/drop partition of the droppable patch tokens. Both lists
/// are ascending by original position.
struct TokenSelection {
  std::size_t batch = 0;
  std::size_t keep_count = 0;
  std::size_t drop_count = 0;
  std::vector<std::int32_t> keep;  // [batch * keep_count]
  std::vector<std::int32_t> drop;  // [batch * drop_count]

  std::span<const std::int32_t> keep_of(std::size_t b) const {
    return {keep.data() + b * keep_count, keep_count};
  }
  std::span<const std::int32_t> drop_of(std::size_t b) const {
    return {drop.data() + b * drop_count, drop_count};
  }
};

template <typename T>
struct StashEntry {
  std::size_t drop_layer = 0;
  Tensor<T> embeddings;                 // [batch, count, width], values at drop time
  std::vector<std::int32_t> positions;  // [batch * count]
  std::size_t count = 0;
};

/// Dropped tokens awaiting reinsertion. Owned by a single forward pass.
template <typename T>
struct TokenStash {
  std::vector<StashEntry<T>> entries;

  bool empty() const { return entries.empty(); }
  std::size_t token_count() const;
  /// Throws ContractError unless stash positions and the live non-fused
  /// positions partition {0..n} in every sample with CLS live.
  void check_partition(const TokenBatch<T>& live) const;
};

/// Row 0 of each head's scores, averaged over heads, CLS column removed.
/// Throws ContractError for fewer than two tokens or an unnormalised CLS row.
template <typename T>
ImportanceVector<T> cls_importance(const AttentionRecord<T>& record);

/// Keeps the keep_count(patch_count, ratio) most important droppable patches
/// per sample; ties go to the lower original position. Fused tokens are never
/// candidates.
template <typename T>
TokenSelection select_topk(const ImportanceVector<T>& importance, double ratio);

/// Live batch of CLS + kept tokens in their original relative order; the
/// dropped rows are appended to the stash under `layer`.
template <typename T>
TokenBatch<T> split(const TokenBatch<T>& tokens, const TokenSelection& selection,
                    TokenStash<T>& stash, std::size_t layer);

/// Returns every stashed token to its original position and empties the stash.
template <typename T>
TokenBatch<T> reinsert(const TokenBatch<T>& tokens, TokenStash<T>& stash);

/// Importance-weighted average of dropped tokens ([batch, k, width] with
/// importance [batch, k]) as one [batch, 1, width] token. A sample whose
/// dropped importance sums to zero falls back to uniform weights.
template <typename T>
Tensor<T> fuse(const Tensor<T>& dropped_embeddings, const Tensor<T>& dropped_importance);

/// Counts from one applied drop stage.
struct StageOutcome {
  std::size_t layer = 0;
  std::size_t patches_before = 0;
  std::size_t kept_patches = 0;
  std::size_t dropped = 0;
  bool fused = false;
};

/// Scores, selects and removes tokens for one stage in the given mode. In
/// skip mode the dropped tokens go to `stash`; in fuse mode they are replaced
/// by a fused token appended at the end of the sequence.
template <typename T>
TokenBatch<T> apply_stage(const TokenBatch<T>& tokens, const AttentionRecord<T>& record,
                          const DropStage& stage, DropMode mode, TokenStash<T>& stash,
                          StageOutcome* outcome = nullptr);

}  // namespace skipvit::skipdrop
