#include "skipvit/vit/config.hpp"

#include <cmath>

#include "skipvit/errors.hpp"

namespace skipvit::vit {

ModelConfig ModelConfig::paper_vit_small() { return ModelConfig{}; }

ModelConfig ModelConfig::desk() {
  ModelConfig c;
  c.depth = 6;
  c.heads = 4;
  c.embed_dim = 128;
  c.patch_size = 4;
  c.image_size = 32;
  c.num_classes = 10;
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "paper-vit-small") return paper_vit_small();
  if (name == "desk") return desk();
  throw ValidationError("model.preset: unknown preset '" + name + "' (expected desk or paper-vit-small)");
}

void validate(const ModelConfig& c) {
  auto positive = [](std::size_t v, const char* field) {
    if (v == 0) throw ValidationError(std::string(field) + ": must be positive");
  };
  positive(c.depth, "model.depth");
  positive(c.heads, "model.heads");
  positive(c.embed_dim, "model.embed_dim");
  positive(c.ffn_ratio, "model.ffn_ratio");
  positive(c.patch_size, "model.patch_size");
  positive(c.image_size, "model.image_size");
  positive(c.channels, "model.channels");
  positive(c.num_classes, "model.num_classes");
  if (c.embed_dim % c.heads != 0) {
    throw ValidationError("model.embed_dim: " + std::to_string(c.embed_dim) +
                          " is not divisible by model.heads = " + std::to_string(c.heads));
  }
  if (c.image_size % c.patch_size != 0) {
    throw ValidationError("model.image_size: " + std::to_string(c.image_size) +
                          " is not divisible by model.patch_size = " + std::to_string(c.patch_size));
  }
  if (!(c.layernorm_eps > 0.0) || !std::isfinite(c.layernorm_eps)) {
    throw ValidationError("model.layernorm_eps: must be positive");
  }
}

}  // namespace skipvit::vit
