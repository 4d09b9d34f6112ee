#pragma once

#include <cstdint>

namespace skipvit::numerics {

/// Counts multiply-accumulates performed by forward matmuls on this thread
/// while alive. Scopes nest; each sees the MACs issued during its lifetime.
class MacCountScope {
 public:
  MacCountScope();
  ~MacCountScope();
  MacCountScope(const MacCountScope&) = delete;
  MacCountScope& operator=(const MacCountScope&) = delete;

  std::uint64_t count() const;

 private:
  std::uint64_t start_;
  bool previous_active_;
};

void record_forward_macs(std::uint64_t macs);

}  // namespace skipvit::numerics
