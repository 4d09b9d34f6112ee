#include "skipvit/numerics/mac_counter.hpp"

namespace skipvit::numerics {

namespace {
thread_local std::uint64_t g_total = 0;
thread_local bool g_active = false;
}  // namespace

MacCountScope::MacCountScope() : start_(g_total), previous_active_(g_active) { g_active = true; }

MacCountScope::~MacCountScope() { g_active = previous_active_; }

std::uint64_t MacCountScope::count() const { return g_total - start_; }

void record_forward_macs(std::uint64_t macs) {
  if (g_active) g_total += macs;
}

}  // namespace skipvit::numerics
