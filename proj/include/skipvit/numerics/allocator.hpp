#pragma once

namespace skipvit::numerics {

/// Keeps freed tensor buffers in the process heap instead of returning them
/// to the OS, so per-step activations reuse warm pages. No-op outside glibc.
/// Idempotent.
void retain_freed_memory();

}  // namespace skipvit::numerics
