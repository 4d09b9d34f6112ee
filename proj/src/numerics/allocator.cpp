#include "skipvit/numerics/allocator.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace skipvit::numerics {

void retain_freed_memory() {
#if defined(__GLIBC__)
  static const bool done = [] {
    mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 * 1024 * 1024);
    return true;
  }();
  (void)done;
#endif
}

}  // namespace skipvit::numerics
