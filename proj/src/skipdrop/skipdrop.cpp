#include "skipvit/skipdrop/skipdrop.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "skipvit/errors.hpp"
#include "skipvit/numerics/ops.hpp"

namespace skipvit::skipdrop {

using numerics::RowIndex;

namespace {

std::size_t fused_in(std::span<const std::int32_t> positions, std::size_t patch_count) {
  return static_cast<std::size_t>(std::count_if(positions.begin(), positions.end(), [&](auto p) {
    return vit::is_fused_position(p, patch_count);
  }));
}

}  // namespace

template <typename T>
std::size_t TokenStash<T>::token_count() const {
  std::size_t n = 0;
  for (const auto& e : entries) n += e.count;
  return n;
}

template <typename T>
void TokenStash<T>::check_partition(const TokenBatch<T>& live) const {
  const std::size_t n = live.patch_count;
  std::vector<int> seen(n + 1);
  for (std::size_t b = 0; b < live.batch(); ++b) {
    std::fill(seen.begin(), seen.end(), 0);
    for (auto p : live.positions_of(b)) {
      if (vit::is_fused_position(p, n)) continue;
      ++seen[static_cast<std::size_t>(p)];
    }
    if (seen[0] != 1) throw ContractError("partition: CLS not live in sample " + std::to_string(b));
    for (const auto& e : entries) {
      for (std::size_t j = 0; j < e.count; ++j) {
        const auto p = e.positions[b * e.count + j];
        if (p <= 0 || static_cast<std::size_t>(p) > n) {
          throw ContractError("partition: stash holds invalid position " + std::to_string(p));
        }
        ++seen[static_cast<std::size_t>(p)];
      }
    }
    for (std::size_t p = 0; p <= n; ++p) {
      if (seen[p] != 1) {
        throw ContractError("partition: position " + std::to_string(p) + " appears " +
                            std::to_string(seen[p]) + " times in sample " + std::to_string(b));
      }
    }
  }
}

template <typename T>
ImportanceVector<T> cls_importance(const AttentionRecord<T>& record) {
  const std::size_t batch = record.batch();
  const std::size_t heads = record.heads();
  const std::size_t tokens = record.tokens();
  if (tokens < 2) {
    throw ContractError("cls_importance: need at least 2 tokens, got " + std::to_string(tokens));
  }
  const auto scores = record.scores.data();
  for (std::size_t b = 0; b < batch; ++b) {
    if (record.positions[b * tokens] != vit::kClsPosition) {
      throw ContractError("cls_importance: row 0 of sample " + std::to_string(b) + " is not CLS");
    }
    for (std::size_t h = 0; h < heads; ++h) {
      const T* row = scores.data() + ((b * heads + h) * tokens) * tokens;
      T total = 0;
      for (std::size_t j = 0; j < tokens; ++j) total += row[j];
      if (std::abs(static_cast<double>(total) - 1.0) > 1e-3) {
        throw ContractError("cls_importance: CLS attention row is not normalised");
      }
    }
  }
  auto cls_rows = numerics::gather_rows(
      record.scores, RowIndex::shared(batch * heads, std::vector<std::size_t>{0}));
  auto averaged = numerics::mean(numerics::reshape(cls_rows, {batch, heads, tokens}), 1);
  std::vector<std::size_t> patch_rows(tokens - 1);
  std::iota(patch_rows.begin(), patch_rows.end(), 1);
  auto patches = numerics::gather_rows(numerics::reshape(averaged, {batch, tokens, 1}),
                                       RowIndex::shared(batch, patch_rows));

  ImportanceVector<T> out;
  out.scores = numerics::reshape(patches, {batch, tokens - 1});
  out.positions.reserve(batch * (tokens - 1));
  for (std::size_t b = 0; b < batch; ++b) {
    out.positions.insert(out.positions.end(), record.positions.begin() + b * tokens + 1,
                         record.positions.begin() + (b + 1) * tokens);
  }
  out.patch_count = record.patch_count;
  out.source_layer = record.layer_index;
  return out;
}

template <typename T>
TokenSelection select_topk(const ImportanceVector<T>& importance, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ContractError("select_topk: ratio " + std::to_string(ratio) + " outside [0, 1)");
  }
  const std::size_t batch = importance.batch();
  const std::size_t length = importance.length();
  const auto scores = importance.scores.data();

  TokenSelection sel;
  sel.batch = batch;
  std::vector<std::size_t> candidates;
  for (std::size_t b = 0; b < batch; ++b) {
    const std::int32_t* pos = importance.positions.data() + b * length;
    const T* score = scores.data() + b * length;
    candidates.clear();
    for (std::size_t j = 0; j < length; ++j) {
      if (!vit::is_fused_position(pos[j], importance.patch_count)) candidates.push_back(j);
    }
    const std::size_t kept = keep_count(candidates.size(), ratio);
    if (b == 0) {
      sel.keep_count = kept;
      sel.drop_count = candidates.size() - kept;
    } else if (kept != sel.keep_count || candidates.size() - kept != sel.drop_count) {
      throw ContractError("select_topk: samples disagree on the droppable token count");
    }
    std::stable_sort(candidates.begin(), candidates.end(), [&](std::size_t x, std::size_t y) {
      if (score[x] != score[y]) return score[x] > score[y];
      return pos[x] < pos[y];
    });
    std::vector<std::int32_t> keep, drop;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      (i < kept ? keep : drop).push_back(pos[candidates[i]]);
    }
    std::sort(keep.begin(), keep.end());
    std::sort(drop.begin(), drop.end());
    sel.keep.insert(sel.keep.end(), keep.begin(), keep.end());
    sel.drop.insert(sel.drop.end(), drop.begin(), drop.end());
  }
  return sel;
}

template <typename T>
TokenBatch<T> split(const TokenBatch<T>& tokens, const TokenSelection& selection,
                    TokenStash<T>& stash, std::size_t layer) {
  const std::size_t batch = tokens.batch();
  const std::size_t rows = tokens.tokens();
  if (selection.batch != batch) {
    throw ContractError("split: selection covers " + std::to_string(selection.batch) +
                        " samples, batch has " + std::to_string(batch));
  }
  enum class Fate : char { kUnassigned, kLive, kDrop };
  std::vector<std::size_t> live_rows, drop_rows;
  std::size_t live_per_sample = 0;
  std::vector<Fate> fate;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto pos = tokens.positions_of(b);
    fate.assign(rows, Fate::kUnassigned);
    auto row_of = [&](std::int32_t p) -> std::size_t {
      auto it = std::find(pos.begin(), pos.end(), p);
      if (it == pos.end()) {
        throw ContractError("split: position " + std::to_string(p) + " not present in sample " +
                            std::to_string(b));
      }
      return static_cast<std::size_t>(it - pos.begin());
    };
    auto assign = [&](std::int32_t p, Fate f) {
      if (p == vit::kClsPosition && f == Fate::kDrop) {
        throw ContractError("split: CLS cannot be dropped");
      }
      auto& slot = fate[row_of(p)];
      if (slot != Fate::kUnassigned) {
        throw ContractError("split: position " + std::to_string(p) + " both kept and dropped");
      }
      slot = f;
    };
    for (auto p : selection.keep_of(b)) assign(p, Fate::kLive);
    for (auto p : selection.drop_of(b)) assign(p, Fate::kDrop);
    for (std::size_t r = 0; r < rows; ++r) {
      if (fate[r] != Fate::kUnassigned) continue;
      if (pos[r] == vit::kClsPosition || vit::is_fused_position(pos[r], tokens.patch_count)) {
        fate[r] = Fate::kLive;
      } else {
        throw ContractError("split: position " + std::to_string(pos[r]) +
                            " neither kept nor dropped");
      }
    }
    const std::size_t before = live_rows.size();
    for (std::size_t r = 0; r < rows; ++r) {
      (fate[r] == Fate::kLive ? live_rows : drop_rows).push_back(r);
    }
    const std::size_t live_here = live_rows.size() - before;
    if (b == 0) {
      live_per_sample = live_here;
    } else if (live_here != live_per_sample) {
      throw ContractError("split: samples keep different token counts");
    }
  }
  if (drop_rows.empty()) return tokens;

  const std::size_t drop_per_sample = rows - live_per_sample;
  RowIndex live_index{batch, live_per_sample, std::move(live_rows)};
  RowIndex drop_index{batch, drop_per_sample, std::move(drop_rows)};

  TokenBatch<T> live;
  live.embeddings = numerics::gather_rows(tokens.embeddings, live_index);
  live.patch_count = tokens.patch_count;
  live.layer_index = layer;
  live.positions.reserve(batch * live_per_sample);

  StashEntry<T> entry;
  entry.drop_layer = layer;
  entry.count = drop_per_sample;
  entry.embeddings = numerics::gather_rows(tokens.embeddings, drop_index);
  entry.positions.reserve(batch * drop_per_sample);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto pos = tokens.positions_of(b);
    for (auto r : live_index.slice(b)) live.positions.push_back(pos[r]);
    for (auto r : drop_index.slice(b)) entry.positions.push_back(pos[r]);
  }
  stash.entries.push_back(std::move(entry));
  return live;
}

template <typename T>
TokenBatch<T> reinsert(const TokenBatch<T>& tokens, TokenStash<T>& stash) {
  if (stash.empty()) return tokens;
  const std::size_t batch = tokens.batch();
  const std::size_t width = tokens.width();
  const std::size_t total = tokens.tokens() + stash.token_count();

  std::vector<std::int32_t> merged_all;
  merged_all.reserve(batch * total);
  RowIndex live_index{batch, tokens.tokens(), {}};
  std::vector<RowIndex> entry_index;
  for (const auto& e : stash.entries) entry_index.push_back(RowIndex{batch, e.count, {}});

  std::vector<std::int32_t> merged;
  for (std::size_t b = 0; b < batch; ++b) {
    merged.assign(tokens.positions_of(b).begin(), tokens.positions_of(b).end());
    for (const auto& e : stash.entries) {
      merged.insert(merged.end(), e.positions.begin() + b * e.count,
                    e.positions.begin() + (b + 1) * e.count);
    }
    std::sort(merged.begin(), merged.end());
    if (auto dup = std::adjacent_find(merged.begin(), merged.end()); dup != merged.end()) {
      throw ContractError("reinsert: duplicate position " + std::to_string(*dup) + " in sample " +
                          std::to_string(b));
    }
    auto target = [&](std::int32_t p) {
      return static_cast<std::size_t>(std::lower_bound(merged.begin(), merged.end(), p) -
                                      merged.begin());
    };
    for (auto p : tokens.positions_of(b)) live_index.rows.push_back(target(p));
    for (std::size_t i = 0; i < stash.entries.size(); ++i) {
      const auto& e = stash.entries[i];
      for (std::size_t j = 0; j < e.count; ++j) {
        entry_index[i].rows.push_back(target(e.positions[b * e.count + j]));
      }
    }
    merged_all.insert(merged_all.end(), merged.begin(), merged.end());
  }

  auto out = numerics::scatter_rows(Tensor<T>::zeros({batch, total, width}), tokens.embeddings,
                                    live_index);
  for (std::size_t i = 0; i < stash.entries.size(); ++i) {
    out = numerics::scatter_rows(out, stash.entries[i].embeddings, entry_index[i]);
  }
  stash.entries.clear();

  TokenBatch<T> result;
  result.embeddings = std::move(out);
  result.positions = std::move(merged_all);
  result.patch_count = tokens.patch_count;
  result.layer_index = tokens.layer_index;
  return result;
}

template <typename T>
Tensor<T> fuse(const Tensor<T>& dropped_embeddings, const Tensor<T>& dropped_importance) {
  if (dropped_embeddings.ndim() != 3 || dropped_embeddings.dim(1) == 0) {
    throw ContractError("fuse: need at least one dropped token");
  }
  const std::size_t batch = dropped_embeddings.dim(0);
  const std::size_t count = dropped_embeddings.dim(1);
  if (dropped_importance.shape() != numerics::Shape{batch, count}) {
    throw DimensionError("fuse: importance " + numerics::shape_to_string(dropped_importance.shape()) +
                         " does not match dropped tokens " +
                         numerics::shape_to_string(dropped_embeddings.shape()));
  }
  std::size_t fallbacks = 0;
  auto weights = numerics::normalize_last(dropped_importance, &fallbacks);
  if (fallbacks > 0) {
    spdlog::warn("fuse: {} sample(s) had zero importance over the dropped set; using uniform weights",
                 fallbacks);
  }
  return numerics::matmul(numerics::reshape(weights, {batch, 1, count}), dropped_embeddings);
}

template <typename T>
TokenBatch<T> apply_stage(const TokenBatch<T>& tokens, const AttentionRecord<T>& record,
                          const DropStage& stage, DropMode mode, TokenStash<T>& stash,
                          StageOutcome* outcome) {
  if (mode == DropMode::kNone) return tokens;
  if (record.positions != tokens.positions) {
    throw ContractError("apply_stage: attention record does not describe this token batch");
  }
  const auto importance = cls_importance(record);
  const auto selection = select_topk(importance, stage.ratio);
  if (outcome) {
    outcome->layer = stage.layer;
    outcome->patches_before = selection.keep_count + selection.drop_count;
    outcome->kept_patches = selection.keep_count;
    outcome->dropped = selection.drop_count;
    outcome->fused = false;
  }
  if (mode == DropMode::kSkip) return split(tokens, selection, stash, stage.layer);
  if (selection.drop_count == 0) return tokens;

  TokenStash<T> discarded;
  TokenBatch<T> live = split(tokens, selection, discarded, stage.layer);
  const auto& entry = discarded.entries.front();

  const std::size_t batch = tokens.batch();
  const std::size_t length = importance.length();
  RowIndex dropped_rows{batch, entry.count, {}};
  for (std::size_t b = 0; b < batch; ++b) {
    const auto first = importance.positions.begin() + static_cast<std::ptrdiff_t>(b * length);
    const auto last = first + static_cast<std::ptrdiff_t>(length);
    for (std::size_t j = 0; j < entry.count; ++j) {
      const auto it = std::find(first, last, entry.positions[b * entry.count + j]);
      dropped_rows.rows.push_back(static_cast<std::size_t>(it - first));
    }
  }
  auto weights = numerics::reshape(
      numerics::gather_rows(numerics::reshape(importance.scores, {batch, length, 1}), dropped_rows),
      {batch, entry.count});
  auto fused = fuse(entry.embeddings, weights);

  const auto existing = fused_in(live.positions_of(0), live.patch_count);
  const auto fused_position = static_cast<std::int32_t>(live.patch_count + 1 + existing);
  const std::size_t live_tokens = live.tokens();
  std::vector<std::int32_t> positions;
  positions.reserve(batch * (live_tokens + 1));
  for (std::size_t b = 0; b < batch; ++b) {
    const auto pos = live.positions_of(b);
    positions.insert(positions.end(), pos.begin(), pos.end());
    positions.push_back(fused_position);
  }
  live.embeddings = numerics::concat_rows(live.embeddings, fused);
  live.positions = std::move(positions);
  if (outcome) outcome->fused = true;
  return live;
}

#define SKIPVIT_INSTANTIATE_SKIPDROP(T)                                                          \
  template struct TokenStash<T>;                                                                 \
  template ImportanceVector<T> cls_importance(const AttentionRecord<T>&);                        \
  template TokenSelection select_topk(const ImportanceVector<T>&, double);                       \
  template TokenBatch<T> split(const TokenBatch<T>&, const TokenSelection&, TokenStash<T>&,      \
                               std::size_t);                                                     \
  template TokenBatch<T> reinsert(const TokenBatch<T>&, TokenStash<T>&);                         \
  template Tensor<T> fuse(const Tensor<T>&, const Tensor<T>&);                                   \
  template TokenBatch<T> apply_stage(const TokenBatch<T>&, const AttentionRecord<T>&,            \
                                     const DropStage&, DropMode, TokenStash<T>&, StageOutcome*);

SKIPVIT_INSTANTIATE_SKIPDROP(float)
SKIPVIT_INSTANTIATE_SKIPDROP(double)

#undef SKIPVIT_INSTANTIATE_SKIPDROP

}  // namespace skipvit::skipdrop
