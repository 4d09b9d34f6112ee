#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <vector>

#include "skipvit/errors.hpp"
#include "skipvit/numerics/ops.hpp"
#include "skipvit/vit/checkpoint.hpp"
#include "skipvit/vit/model.hpp"
#include "support/fixtures.hpp"
#include "support/grad_check.hpp"

using namespace skipvit;
using numerics::Tensor;
using skipdrop::DropSchedule;
using vit::ModelConfig;
using vit::VisionTransformer;

namespace {

// Row-wise population layernorm with unit gain and zero bias.
std::vector<double> layernorm_rows(std::span<const double> x, std::size_t rows, std::size_t width,
                                   double eps) {
  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < width; ++c) mean += x[r * width + c];
    mean /= width;
    for (std::size_t c = 0; c < width; ++c) var += std::pow(x[r * width + c] - mean, 2);
    var /= width;
    for (std::size_t c = 0; c < width; ++c) out[r * width + c] = (x[r * width + c] - mean) / std::sqrt(var + eps);
  }
  return out;
}

ModelConfig single_head(std::size_t width) {
  auto c = testing::tiny_config();
  c.depth = 1;
  c.heads = 1;
  c.embed_dim = width;
  return c;
}

void zero_biases(VisionTransformer<double>& model, std::size_t layer) {
  const std::string p = "blocks." + std::to_string(layer) + ".attn.";
  for (const char* n : {"q", "k", "v", "proj"}) testing::fill_parameter(model, p + n + ".bias", 0.0);
}

}  // namespace

TEST_CASE("patchify: token counts and positions") {
  const auto desk = ModelConfig::desk();
  VisionTransformer<float> model(desk, 1);
  auto tokens = model.patchify(testing::random_images<float>(desk, 2, 3));
  CHECK(tokens.tokens() == 65);
  CHECK(tokens.width() == 128);
  std::vector<std::int32_t> expected(65);
  std::iota(expected.begin(), expected.end(), 0);
  for (std::size_t b = 0; b < 2; ++b) {
    auto pos = tokens.positions_of(b);
    CHECK(std::vector<std::int32_t>(pos.begin(), pos.end()) == expected);
  }

  auto paper = ModelConfig::paper_vit_small();
  CHECK(paper.token_count() == 197);
  paper.depth = 1;
  paper.embed_dim = 12;
  paper.heads = 6;
  VisionTransformer<float> wide(paper, 1);
  CHECK(wide.patchify(testing::random_images<float>(paper, 1, 3)).tokens() == 197);
}

TEST_CASE("patchify: image size mismatch is a dimension error") {
  const auto c = testing::tiny_config();
  VisionTransformer<double> model(c, 1);
  auto wrong = c;
  wrong.image_size = 12;
  CHECK_THROWS_AS(model.patchify(testing::random_images<double>(wrong, 1, 1)), DimensionError);
}

TEST_CASE("patchify: each patch token is the projection of its own pixels") {
  auto c = testing::tiny_config();
  c.channels = 1;
  VisionTransformer<double> model(c, 2);
  testing::fill_parameter(model, "pos_embed", 0.0);
  testing::fill_parameter(model, "patch_embed.bias", 0.0);
  testing::fill_parameter(model, "patch_embed.weight", 1.0);
  std::vector<double> pixels(64);
  std::iota(pixels.begin(), pixels.end(), 0.0);
  auto tokens = model.patchify(Tensor<double>({1, 1, 8, 8}, pixels));
  // Patch (gy, gx) covers rows 4gy..4gy+3, cols 4gx..4gx+3; all-ones weights sum them.
  for (std::size_t gy = 0; gy < 2; ++gy) {
    for (std::size_t gx = 0; gx < 2; ++gx) {
      double s = 0;
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) s += pixels[(4 * gy + y) * 8 + 4 * gx + x];
      CHECK(tokens.embeddings.at({0, 1 + gy * 2 + gx, 0}) == doctest::Approx(s));
    }
  }
}

TEST_CASE("attention: logits are divided by sqrt(d) before softmax") {
  const auto c = single_head(64);
  CHECK(c.head_dim() == 64);
  VisionTransformer<double> model(c, 5);
  testing::set_identity(model, "blocks.0.attn.q.weight");
  testing::set_identity(model, "blocks.0.attn.k.weight");
  zero_biases(model, 0);
  auto tokens = model.patchify(testing::random_images<double>(c, 1, 9));
  auto [out, record] = model.attention_block(tokens, 0);
  const std::size_t n = tokens.tokens();
  const auto ln = layernorm_rows(tokens.embeddings.data(), n, 64, c.layernorm_eps);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> logits(n);
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < 64; ++k) dot += ln[i * 64 + k] * ln[j * 64 + k];
      logits[j] = dot / 8.0;
    }
    const double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0;
    for (auto& v : logits) z += (v = std::exp(v - mx));
    for (std::size_t j = 0; j < n; ++j) {
      CHECK(record.scores.at({0, 0, i, j}) == doctest::Approx(logits[j] / z).epsilon(1e-10));
    }
  }
}

TEST_CASE("attention: uniform scores average the values") {
  const auto c = single_head(8);
  VisionTransformer<double> model(c, 6);
  testing::fill_parameter(model, "blocks.0.attn.q.weight", 0.0);
  testing::set_identity(model, "blocks.0.attn.v.weight");
  testing::set_identity(model, "blocks.0.attn.proj.weight");
  zero_biases(model, 0);
  auto tokens = model.patchify(testing::random_images<double>(c, 1, 2));
  auto [out, record] = model.attention_block(tokens, 0);
  const std::size_t n = tokens.tokens();
  const auto ln = layernorm_rows(tokens.embeddings.data(), n, 8, c.layernorm_eps);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) CHECK(record.scores.at({0, 0, i, j}) == doctest::Approx(1.0 / n));
    for (std::size_t k = 0; k < 8; ++k) {
      double mean = 0;
      for (std::size_t j = 0; j < n; ++j) mean += ln[j * 8 + k];
      mean /= n;
      CHECK(out.embeddings.at({0, i, k}) ==
            doctest::Approx(tokens.embeddings.at({0, i, k}) + mean).epsilon(1e-12));
    }
  }
  CHECK(out.positions == tokens.positions);
}

TEST_CASE("attention: rows sum to one and lie in [0, 1]") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto c = testing::narrow_config(2);
    VisionTransformer<float> model(c, seed);
    testing::sharpen(model, 20.0f);
    auto tokens = model.patchify(testing::random_images<float>(c, 2, seed + 100));
    auto [out, record] = model.attention_block(tokens, 1);
    const std::size_t n = record.tokens();
    const auto s = record.scores.data();
    for (std::size_t row = 0; row < s.size() / n; ++row) {
      double total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const float v = s[row * n + j];
        REQUIRE(v >= 0.0f);
        REQUIRE(v <= 1.0f);
        total += v;
      }
      REQUIRE(std::abs(total - 1.0) <= 1e-5);
    }
  }
}

TEST_CASE("ffn: zero weights leave the residual only, shape follows token count") {
  const auto c = testing::tiny_config();
  VisionTransformer<double> model(c, 4);
  for (const char* n : {"fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"}) {
    testing::fill_parameter(model, std::string("blocks.0.ffn.") + n, 0.0);
  }
  for (std::size_t count : {1, 2, 5, 9}) {
    std::mt19937_64 rng(count);
    vit::TokenBatch<double> in{testing::random_tensor({2, count, c.embed_dim}, rng),
                               std::vector<std::int32_t>(2 * count), c.patch_count(), 0};
    auto out = model.ffn_block(in, 0);
    CHECK(out.embeddings.shape() == in.embeddings.shape());
    const auto a = out.embeddings.data();
    const auto b = in.embeddings.data();
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("ffn: gradient matches central differences") {
  const auto c = testing::tiny_config();
  VisionTransformer<double> model(c, 8);
  std::mt19937_64 rng(8);
  auto x = testing::random_tensor({2, 3, c.embed_dim}, rng);
  std::vector<std::pair<std::string, Tensor<double>>> leaves{{"x", x}};
  for (auto& p : model.parameters()) {
    if (p.name.rfind("blocks.0.ffn", 0) == 0 || p.name.rfind("blocks.0.norm2", 0) == 0) {
      leaves.push_back({p.name, p.tensor});
    }
  }
  auto loss = [&] {
    vit::TokenBatch<double> in{x, std::vector<std::int32_t>(6), c.patch_count(), 0};
    auto y = model.ffn_block(in, 0).embeddings;
    return numerics::sum(numerics::gelu(y));
  };
  const auto result = testing::grad_check(loss, leaves);
  INFO(result.worst);
  CHECK(result.max_rel_error < 1e-4);
}

TEST_CASE("classify: zero head, shape, probability mass, CLS contract") {
  const auto c = testing::tiny_config();
  VisionTransformer<double> model(c, 3);
  auto tokens = model.patchify(testing::random_images<double>(c, 3, 4));
  auto logits = model.classify(tokens);
  CHECK(logits.shape() == numerics::Shape{3, 3});
  auto probs = numerics::softmax(logits, -1);
  for (std::size_t b = 0; b < 3; ++b) {
    double s = 0;
    for (std::size_t k = 0; k < 3; ++k) s += probs.at({b, k});
    CHECK(s == doctest::Approx(1.0));
  }
  testing::fill_parameter(model, "head.weight", 0.0);
  testing::fill_parameter(model, "head.bias", 0.0);
  const auto zeroed = model.classify(tokens);
  for (double v : zeroed.data()) CHECK(v == 0.0);

  auto broken = tokens;
  std::swap(broken.positions[0], broken.positions[1]);
  CHECK_THROWS_AS(model.classify(broken), ContractError);
}

TEST_CASE("forward: disabled mechanism is bit-identical to the plain pass") {
  const auto c = testing::narrow_config(4);
  VisionTransformer<float> model(c, 11);
  const auto images = testing::random_images<float>(c, 3, 12);
  const auto plain = model.forward_plain(images);
  auto same = [&](const DropSchedule& s, std::size_t epoch) {
    const auto logits = model.forward(images, s, epoch).logits;
    return std::equal(plain.data().begin(), plain.data().end(), logits.data().begin());
  };
  CHECK(same(DropSchedule::none(), 0));
  CHECK(same(DropSchedule::skip({{1, 0.0}}, 3), 0));
  CHECK(same(DropSchedule::skip({{1, 0.0}, {2, 0.0}}, 3), 7));
  CHECK(same(DropSchedule::fuse({{1, 0.0}}), 0));
  CHECK(same(DropSchedule::skip({{1, 0.55}}, 3, 5), 4));
  CHECK(same(DropSchedule::fuse({{1, 0.45}}, 5), 0));
  CHECK_FALSE(same(DropSchedule::skip({{1, 0.55}}, 3, 5), 5));
}

TEST_CASE("forward: drop 55% at 6 with skip to 11 leaves 30 live tokens in between") {
  const auto c = testing::narrow_config(12);
  const auto schedule = DropSchedule::skip({{6, 0.55}}, 11);
  skipdrop::validate(schedule, c);
  VisionTransformer<float> model(c, 13);
  const auto result = model.forward(testing::random_images<float>(c, 2, 1), schedule, 0);
  for (std::size_t l = 0; l <= 6; ++l) CHECK(result.layer_tokens[l].attention == 65);
  CHECK(result.layer_tokens[6].ffn == 30);
  for (std::size_t l = 7; l <= 10; ++l) {
    CHECK(result.layer_tokens[l].attention == 30);
    CHECK(result.layer_tokens[l].ffn == 30);
  }
  CHECK(result.layer_tokens[11].attention == 65);
  REQUIRE(result.stages.size() == 1);
  CHECK(result.stages[0].patches_before == 64);
  CHECK(result.stages[0].kept_patches == 29);

  auto after = schedule;
  after.drop_after_ffn = true;
  const auto late = model.forward(testing::random_images<float>(c, 2, 1), after, 0);
  CHECK(late.layer_tokens[6].ffn == 65);
  CHECK(late.layer_tokens[7].attention == 30);
}

TEST_CASE("forward: every valid schedule returns all positions, attention stays normalised") {
  const auto c = testing::narrow_config(6);
  VisionTransformer<float> model(c, 17);
  testing::sharpen(model, 10.0f);
  const auto images = testing::random_images<float>(c, 2, 18);
  std::vector<std::int32_t> all(65);
  std::iota(all.begin(), all.end(), 0);
  const std::vector<DropSchedule> schedules = {
      DropSchedule::skip({{2, 0.55}}, 4), DropSchedule::skip({{1, 0.3}, {3, 0.3}}, 5),
      DropSchedule::skip({{1, 0.9}}, 2), DropSchedule::fuse({{2, 0.45}}),
      DropSchedule::fuse({{1, 0.3}, {3, 0.3}})};
  for (auto s : schedules) {
    for (bool after : {false, true}) {
      s.drop_after_ffn = after;
      skipdrop::validate(s, c);
      vit::ForwardOptions options;
      options.keep_attention_records = true;
      const auto r = model.forward(images, s, 0, options);
      if (s.mode == skipdrop::DropMode::kSkip) {
        for (std::size_t b = 0; b < 2; ++b) {
          std::vector<std::int32_t> got(r.final_positions.begin() + b * 65,
                                        r.final_positions.begin() + (b + 1) * 65);
          CHECK(got == all);
        }
      }
      for (const auto& rec : r.records) {
        const std::size_t n = rec.tokens();
        const auto sc = rec.scores.data();
        for (std::size_t row = 0; row < sc.size() / n; ++row) {
          const double total = std::accumulate(sc.begin() + row * n, sc.begin() + (row + 1) * n, 0.0);
          REQUIRE(std::abs(total - 1.0) <= 1e-5);
        }
      }
    }
  }
}

TEST_CASE("forward: end-to-end gradients through split, reinsert and fuse") {
  const auto c = testing::tiny_config();
  const auto images = testing::random_images<double>(c, 2, 21);
  const std::vector<std::int32_t> labels = {0, 2};
  for (const auto& schedule : {DropSchedule::skip({{0, 0.5}}, 1), DropSchedule::fuse({{0, 0.5}}),
                               DropSchedule::none()}) {
    VisionTransformer<double> model(c, 22);
    testing::sharpen(model, 25.0);
    std::vector<std::pair<std::string, Tensor<double>>> leaves;
    for (auto& p : model.parameters()) leaves.push_back({p.name, p.tensor});
    auto loss = [&] { return numerics::cross_entropy(model.forward(images, schedule, 0).logits, labels); };
    const auto result = testing::grad_check(loss, leaves, 1e-6, 1e-6);
    INFO(skipdrop::to_string(schedule.mode), " worst ", result.worst);
    CHECK(result.max_rel_error < 1e-3);
  }
}

TEST_CASE("clone is deep and starts identical") {
  const auto c = testing::tiny_config();
  VisionTransformer<double> model(c, 30);
  auto copy = model.clone();
  const auto images = testing::random_images<double>(c, 1, 31);
  const auto a = model.forward_plain(images);
  CHECK(std::ranges::equal(a.data(), copy.forward_plain(images).data()));
  testing::fill_parameter(copy, "head.bias", 1.0);
  CHECK(std::ranges::equal(a.data(), model.forward_plain(images).data()));
}

TEST_CASE("same seed gives same weights") {
  const auto c = testing::tiny_config();
  VisionTransformer<float> a(c, 7), b(c, 7), other(c, 8);
  CHECK(std::ranges::equal(a.parameter("pos_embed").data(), b.parameter("pos_embed").data()));
  CHECK_FALSE(std::ranges::equal(a.parameter("pos_embed").data(), other.parameter("pos_embed").data()));
  for (float v : a.parameter("blocks.0.attn.q.weight").data()) CHECK(std::abs(v) <= 0.04f);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  const auto dir = std::filesystem::temp_directory_path() / "skipvit_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto c = testing::tiny_config();

  VisionTransformer<float> f(c, 40);
  save_checkpoint(f, dir / "f.ckpt");
  auto f2 = vit::load_checkpoint<float>(dir / "f.ckpt");
  CHECK(f2.config() == c);
  for (std::size_t i = 0; i < f.parameters().size(); ++i) {
    CHECK(f.parameters()[i].name == f2.parameters()[i].name);
    CHECK(std::ranges::equal(f.parameters()[i].tensor.data(), f2.parameters()[i].tensor.data()));
  }

  VisionTransformer<double> d(c, 41);
  save_checkpoint(d, dir / "d.ckpt");
  auto d2 = vit::load_checkpoint<double>(dir / "d.ckpt");
  const auto images = testing::random_images<double>(c, 2, 3);
  CHECK(std::ranges::equal(d.forward_plain(images).data(), d2.forward_plain(images).data()));
  CHECK(vit::read_checkpoint_header(dir / "d.ckpt").scalar_bytes == 8);

  CHECK_THROWS_WITH_AS(vit::load_checkpoint<float>(dir / "d.ckpt"),
                       doctest::Contains("64-bit"), std::runtime_error);

  const auto size = std::filesystem::file_size(dir / "f.ckpt");
  std::filesystem::resize_file(dir / "f.ckpt", size - 3);
  CHECK_THROWS_WITH_AS(vit::load_checkpoint<float>(dir / "f.ckpt"), doctest::Contains("truncated"),
                       std::runtime_error);
  {
    std::ofstream junk(dir / "junk.ckpt", std::ios::binary);
    junk << "not a checkpoint at all";
  }
  CHECK_THROWS_WITH_AS(vit::load_checkpoint<float>(dir / "junk.ckpt"), doctest::Contains("magic"),
                       std::runtime_error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("model config validation and presets") {
  CHECK(ModelConfig::preset("desk") == ModelConfig::desk());
  CHECK(ModelConfig::preset("paper-vit-small").embed_dim == 384);
  CHECK_THROWS_AS(ModelConfig::preset("vit-huge"), ValidationError);
  auto c = ModelConfig::desk();
  c.heads = 3;
  CHECK_THROWS_WITH_AS(vit::validate(c), doctest::Contains("heads"), ValidationError);
  c = ModelConfig::desk();
  c.image_size = 30;
  CHECK_THROWS_WITH_AS(vit::validate(c), doctest::Contains("image_size"), ValidationError);
  CHECK_NOTHROW(vit::validate(ModelConfig::paper_vit_small()));
}
