#include "skipvit/vit/token_batch.hpp"

#include <string>

#include "skipvit/errors.hpp"

namespace skipvit::vit {

template <typename T>
void TokenBatch<T>::check_invariants() const {
  if (embeddings.ndim() != 3) {
    throw ContractError("token batch: embeddings must be [batch, tokens, width]");
  }
  if (positions.size() != batch() * tokens()) {
    throw ContractError("token batch: " + std::to_string(positions.size()) + " positions for " +
                        std::to_string(batch()) + "x" + std::to_string(tokens()) + " rows");
  }
  std::vector<char> seen;
  for (std::size_t b = 0; b < batch(); ++b) {
    seen.assign(patch_count + 1 + tokens(), 0);
    bool has_cls = false;
    for (auto p : positions_of(b)) {
      if (p < 0 || static_cast<std::size_t>(p) >= seen.size()) {
        throw ContractError("token batch: position " + std::to_string(p) + " out of range");
      }
      if (seen[static_cast<std::size_t>(p)]) {
        throw ContractError("token batch: duplicate position " + std::to_string(p) +
                            " in sample " + std::to_string(b));
      }
      seen[static_cast<std::size_t>(p)] = 1;
      has_cls = has_cls || p == kClsPosition;
    }
    if (!has_cls) {
      throw ContractError("token batch: CLS position missing in sample " + std::to_string(b));
    }
  }
}

template struct TokenBatch<float>;
template struct TokenBatch<double>;

}  // namespace skipvit::vit
