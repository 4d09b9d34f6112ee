#pragma once

#include <cstdint>
#include <filesystem>

#include "skipvit/vit/config.hpp"
#include "skipvit/vit/model.hpp"

namespace skipvit::vit {

// Binary layout, all integers and scalars little-endian:
//   "SKVITCKP" | u32 version | u32 scalar_bytes (4 or 8)
//   u64 depth, heads, embed_dim, ffn_ratio, patch_size, image_size, channels,
//       num_classes | f64 layernorm_eps
//   u64 parameter_count, then per parameter:
//     u32 name_length | name bytes | u32 ndim | u64 dims[ndim] | raw payload
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointHeader {
  std::uint32_t version = kCheckpointVersion;
  std::uint32_t scalar_bytes = 4;
  ModelConfig config;
};

template <typename T>
void save_checkpoint(const VisionTransformer<T>& model, const std::filesystem::path& path);

/// Throws std::runtime_error on I/O failure, unknown version, scalar-width
/// mismatch, or a parameter table that does not fit the stored config.
template <typename T>
VisionTransformer<T> load_checkpoint(const std::filesystem::path& path);

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path);

}  // namespace skipvit::vit
