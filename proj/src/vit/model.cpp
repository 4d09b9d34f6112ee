#include "skipvit/vit/model.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "skipvit/errors.hpp"
#include "skipvit/numerics/ops.hpp"

namespace skipvit::vit {

namespace ops = numerics;
using numerics::RowIndex;
using numerics::Shape;

namespace {

template <typename T>
Tensor<T> trunc_normal(Shape shape, std::mt19937_64& rng, double stddev = 0.02) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> data(numerics::shape_numel(shape));
  for (auto& v : data) {
    double x = dist(rng);
    while (std::abs(x) > 2 * stddev) x = dist(rng);
    v = static_cast<T>(x);
  }
  return Tensor<T>(std::move(shape), std::move(data), true);
}

}  // namespace

template <typename T>
VisionTransformer<T>::VisionTransformer(const ModelConfig& config, std::uint64_t seed)
    : config_(config) {
  validate(config_);
  std::mt19937_64 rng(seed);
  const std::size_t d = config_.embed_dim;
  auto add = [&](std::string name, Tensor<T> t) { params_.push_back({std::move(name), std::move(t)}); };
  auto ones = [](std::size_t n) { return Tensor<T>::full({n}, T(1), true); };
  auto zeros = [](std::size_t n) { return Tensor<T>::zeros({n}, true); };

  add("patch_embed.weight", trunc_normal<T>({config_.patch_dim(), d}, rng));
  add("patch_embed.bias", zeros(d));
  add("cls_token", trunc_normal<T>({1, d}, rng));
  add("pos_embed", trunc_normal<T>({config_.token_count(), d}, rng));
  for (std::size_t l = 0; l < config_.depth; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    add(p + "norm1.gain", ones(d));
    add(p + "norm1.bias", zeros(d));
    for (const char* name : {"q", "k", "v", "proj"}) {
      add(p + "attn." + name + ".weight", trunc_normal<T>({d, d}, rng));
      add(p + "attn." + name + ".bias", zeros(d));
    }
    add(p + "norm2.gain", ones(d));
    add(p + "norm2.bias", zeros(d));
    add(p + "ffn.fc1.weight", trunc_normal<T>({d, config_.ffn_dim()}, rng));
    add(p + "ffn.fc1.bias", zeros(config_.ffn_dim()));
    add(p + "ffn.fc2.weight", trunc_normal<T>({config_.ffn_dim(), d}, rng));
    add(p + "ffn.fc2.bias", zeros(d));
  }
  add("norm.gain", ones(d));
  add("norm.bias", zeros(d));
  add("head.weight", trunc_normal<T>({d, config_.num_classes}, rng));
  add("head.bias", zeros(config_.num_classes));
  bind();
}

template <typename T>
VisionTransformer<T>::VisionTransformer(const ModelConfig& config,
                                        std::vector<NamedParameter<T>> params)
    : config_(config), params_(std::move(params)) {
  bind();
}

template <typename T>
void VisionTransformer<T>::bind() {
  patch_embed_ = {parameter("patch_embed.weight"), parameter("patch_embed.bias")};
  cls_token_ = parameter("cls_token");
  pos_embed_ = parameter("pos_embed");
  blocks_.clear();
  for (std::size_t l = 0; l < config_.depth; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    auto lin = [&](const std::string& name) {
      return Linear{parameter(p + name + ".weight"), parameter(p + name + ".bias")};
    };
    Block b;
    b.norm1 = {parameter(p + "norm1.gain"), parameter(p + "norm1.bias")};
    b.q = lin("attn.q");
    b.k = lin("attn.k");
    b.v = lin("attn.v");
    b.proj = lin("attn.proj");
    b.norm2 = {parameter(p + "norm2.gain"), parameter(p + "norm2.bias")};
    b.fc1 = lin("ffn.fc1");
    b.fc2 = lin("ffn.fc2");
    blocks_.push_back(std::move(b));
  }
  final_norm_ = {parameter("norm.gain"), parameter("norm.bias")};
  head_ = {parameter("head.weight"), parameter("head.bias")};
}

template <typename T>
Tensor<T>& VisionTransformer<T>::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("no parameter named '" + name + "'");
}

template <typename T>
std::size_t VisionTransformer<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void VisionTransformer<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
VisionTransformer<T> VisionTransformer<T>::clone() const {
  std::vector<NamedParameter<T>> copy;
  copy.reserve(params_.size());
  for (const auto& p : params_) {
    auto t = p.tensor.detach();
    t.set_requires_grad(true);
    copy.push_back({p.name, std::move(t)});
  }
  return VisionTransformer(config_, std::move(copy));
}

template <typename T>
Tensor<T> VisionTransformer<T>::linear(const Tensor<T>& x, const Linear& layer) const {
  return ops::add(ops::matmul(x, layer.weight), layer.bias);
}

template <typename T>
Tensor<T> VisionTransformer<T>::norm(const Tensor<T>& x, const Norm& layer) const {
  return ops::layernorm(x, layer.gain, layer.bias, static_cast<T>(config_.layernorm_eps));
}

template <typename T>
void VisionTransformer<T>::check_layer(std::size_t layer) const {
  if (layer >= config_.depth) {
    throw IndexError("layer " + std::to_string(layer) + " outside depth " +
                     std::to_string(config_.depth));
  }
}

template <typename T>
TokenBatch<T> VisionTransformer<T>::patchify(const Tensor<T>& images) const {
  const auto& c = config_;
  if (images.ndim() != 4 || images.dim(1) != c.channels || images.dim(2) != c.image_size ||
      images.dim(3) != c.image_size) {
    throw DimensionError("patchify: expected [batch, " + std::to_string(c.channels) + ", " +
                         std::to_string(c.image_size) + ", " + std::to_string(c.image_size) +
                         "], got " + numerics::shape_to_string(images.shape()));
  }
  const std::size_t batch = images.dim(0);
  const std::size_t grid = c.grid();
  const std::size_t p = c.patch_size;
  const std::size_t n = c.patch_count();
  const std::size_t side = c.image_size;
  const auto pixels = images.data();
  std::vector<T> patches(batch * n * c.patch_dim());
  T* out = patches.data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t gy = 0; gy < grid; ++gy) {
      for (std::size_t gx = 0; gx < grid; ++gx) {
        for (std::size_t ch = 0; ch < c.channels; ++ch) {
          for (std::size_t py = 0; py < p; ++py) {
            const T* row = pixels.data() + ((b * c.channels + ch) * side + gy * p + py) * side + gx * p;
            out = std::copy(row, row + p, out);
          }
        }
      }
    }
  }
  auto embedded = linear(Tensor<T>({batch, n, c.patch_dim()}, std::move(patches)), patch_embed_);
  auto cls = ops::add(Tensor<T>::zeros({batch, 1, c.embed_dim}), cls_token_);
  TokenBatch<T> tokens;
  tokens.embeddings = ops::add(ops::concat_rows(cls, embedded), pos_embed_);
  tokens.patch_count = n;
  tokens.layer_index = 0;
  tokens.positions.resize(batch * (n + 1));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t t = 0; t <= n; ++t) tokens.positions[b * (n + 1) + t] = static_cast<std::int32_t>(t);
  }
  return tokens;
}

template <typename T>
std::pair<TokenBatch<T>, AttentionRecord<T>> VisionTransformer<T>::attention_block(
    const TokenBatch<T>& tokens, std::size_t layer) const {
  check_layer(layer);
  const auto& blk = blocks_[layer];
  const std::size_t batch = tokens.batch();
  const std::size_t count = tokens.tokens();
  const std::size_t d = config_.embed_dim;
  const std::size_t h = config_.heads;
  const std::size_t dh = config_.head_dim();
  if (tokens.width() != d) {
    throw DimensionError("attention_block: token width " + std::to_string(tokens.width()) +
                         " != embed_dim " + std::to_string(d));
  }

  auto x = norm(tokens.embeddings, blk.norm1);
  auto heads_first = [&](const Tensor<T>& t) {  // [B,T,D] -> [B,H,T,dh]
    return ops::transpose(ops::reshape(t, {batch, count, h, dh}), 1, 2);
  };
  auto q = heads_first(linear(x, blk.q));
  auto k_t = ops::transpose(heads_first(linear(x, blk.k)), 2, 3);
  auto v = heads_first(linear(x, blk.v));
  const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(dh));
  auto scores = ops::softmax(ops::scale(ops::matmul(q, k_t), inv_sqrt_d), -1);
  auto context = ops::reshape(ops::transpose(ops::matmul(scores, v), 1, 2), {batch, count, d});
  auto out = ops::add(tokens.embeddings, linear(context, blk.proj));

  TokenBatch<T> next{out, tokens.positions, tokens.patch_count, layer};
  AttentionRecord<T> record{scores, tokens.positions, tokens.patch_count, layer};
  return {std::move(next), std::move(record)};
}

template <typename T>
TokenBatch<T> VisionTransformer<T>::ffn_block(const TokenBatch<T>& tokens, std::size_t layer) const {
  check_layer(layer);
  const auto& blk = blocks_[layer];
  auto hidden = ops::gelu(linear(norm(tokens.embeddings, blk.norm2), blk.fc1));
  auto out = ops::add(tokens.embeddings, linear(hidden, blk.fc2));
  return TokenBatch<T>{out, tokens.positions, tokens.patch_count, layer};
}

template <typename T>
Tensor<T> VisionTransformer<T>::classify(const TokenBatch<T>& tokens) const {
  const std::size_t batch = tokens.batch();
  for (std::size_t b = 0; b < batch; ++b) {
    if (tokens.positions_of(b).empty() || tokens.positions_of(b)[0] != kClsPosition) {
      throw ContractError("classify: CLS token is not the first row of sample " + std::to_string(b));
    }
  }
  auto cls = ops::gather_rows(tokens.embeddings, RowIndex::shared(batch, std::vector<std::size_t>{0}));
  auto normed = norm(ops::reshape(cls, {batch, config_.embed_dim}), final_norm_);
  return linear(normed, head_);
}

template <typename T>
ForwardResult<T> VisionTransformer<T>::forward(const Tensor<T>& images,
                                               const skipdrop::DropSchedule& schedule,
                                               std::size_t epoch,
                                               const ForwardOptions& options) const {
  using skipdrop::DropMode;
  ForwardResult<T> result;
  result.layer_tokens.resize(config_.depth);
  const bool active = schedule.active_at(epoch);
  const bool skip_mode = active && schedule.mode == DropMode::kSkip;

  TokenBatch<T> tokens = patchify(images);
  skipdrop::TokenStash<T> stash;
  auto verify = [&] {
    if (!options.check_invariants) return;
    tokens.check_invariants();
    if (skip_mode) stash.check_partition(tokens);
  };
  auto drop = [&](const AttentionRecord<T>& record, const skipdrop::DropStage& stage) {
    skipdrop::StageOutcome outcome;
    tokens = skipdrop::apply_stage(tokens, record, stage, schedule.mode, stash, &outcome);
    result.stages.push_back(outcome);
    verify();
  };

  for (std::size_t l = 0; l < config_.depth; ++l) {
    if (skip_mode && schedule.skip_target == l) {
      tokens = skipdrop::reinsert(tokens, stash);
      verify();
    }
    result.layer_tokens[l].attention = tokens.tokens();
    auto [attended, record] = attention_block(tokens, l);
    tokens = std::move(attended);
    const skipdrop::DropStage* stage = active ? schedule.stage_at(l) : nullptr;
    if (stage && !schedule.drop_after_ffn) drop(record, *stage);
    result.layer_tokens[l].ffn = tokens.tokens();
    tokens = ffn_block(tokens, l);
    if (stage && schedule.drop_after_ffn) drop(record, *stage);
    if (options.keep_attention_records) result.records.push_back(std::move(record));
  }
  if (!stash.empty()) {
    throw ContractError("forward: stashed tokens never reached a skip target");
  }
  result.final_positions = tokens.positions;
  result.logits = classify(tokens);
  return result;
}

template <typename T>
Tensor<T> VisionTransformer<T>::forward_plain(const Tensor<T>& images) const {
  TokenBatch<T> tokens = patchify(images);
  for (std::size_t l = 0; l < config_.depth; ++l) {
    tokens = attention_block(tokens, l).first;
    tokens = ffn_block(tokens, l);
  }
  return classify(tokens);
}

template class VisionTransformer<float>;
template class VisionTransformer<double>;

}  // namespace skipvit::vit
