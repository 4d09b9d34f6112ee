#include "skipvit/vit/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace skipvit::vit {

namespace {

constexpr std::array<char, 8> kMagic = {'S', 'K', 'V', 'I', 'T', 'C', 'K', 'P'};

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw std::runtime_error("checkpoint: cannot open " + path.string() + " for writing");
  }
  template <typename U>
  void integer(U value) {
    static_assert(std::is_unsigned_v<U>);
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.put(static_cast<char>((value >> (8 * i)) & 0xFF));
  }
  void real(double v) { integer(std::bit_cast<std::uint64_t>(v)); }
  void real(float v) { integer(std::bit_cast<std::uint32_t>(v)); }
  void bytes(const char* data, std::size_t n) { out_.write(data, static_cast<std::streamsize>(n)); }
  void finish() {
    out_.flush();
    if (!out_) throw std::runtime_error("checkpoint: write failed");
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("checkpoint: cannot open " + path.string());
  }
  template <typename U>
  U integer() {
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) {
      const int c = in_.get();
      if (c == std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: truncated file");
      value |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return value;
  }
  double real64() { return std::bit_cast<double>(integer<std::uint64_t>()); }
  float real32() { return std::bit_cast<float>(integer<std::uint32_t>()); }
  std::string text(std::size_t n) {
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw std::runtime_error("checkpoint: truncated file");
    return s;
  }

 private:
  std::ifstream in_;
};

CheckpointHeader read_header(Reader& in) {
  const auto magic = in.text(kMagic.size());
  if (std::memcmp(magic.data(), kMagic.data(), kMagic.size()) != 0) {
    throw std::runtime_error("checkpoint: bad magic");
  }
  CheckpointHeader h;
  h.version = in.integer<std::uint32_t>();
  if (h.version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(h.version));
  }
  h.scalar_bytes = in.integer<std::uint32_t>();
  if (h.scalar_bytes != 4 && h.scalar_bytes != 8) {
    throw std::runtime_error("checkpoint: invalid scalar width " + std::to_string(h.scalar_bytes));
  }
  auto& c = h.config;
  c.depth = in.integer<std::uint64_t>();
  c.heads = in.integer<std::uint64_t>();
  c.embed_dim = in.integer<std::uint64_t>();
  c.ffn_ratio = in.integer<std::uint64_t>();
  c.patch_size = in.integer<std::uint64_t>();
  c.image_size = in.integer<std::uint64_t>();
  c.channels = in.integer<std::uint64_t>();
  c.num_classes = in.integer<std::uint64_t>();
  c.layernorm_eps = in.real64();
  return h;
}

}  // namespace

template <typename T>
void save_checkpoint(const VisionTransformer<T>& model, const std::filesystem::path& path) {
  Writer out(path);
  out.bytes(kMagic.data(), kMagic.size());
  out.integer<std::uint32_t>(kCheckpointVersion);
  out.integer<std::uint32_t>(sizeof(T));
  const auto& c = model.config();
  for (std::uint64_t v : {c.depth, c.heads, c.embed_dim, c.ffn_ratio, c.patch_size, c.image_size,
                          c.channels, c.num_classes}) {
    out.integer<std::uint64_t>(v);
  }
  out.real(c.layernorm_eps);
  out.integer<std::uint64_t>(model.parameters().size());
  for (const auto& p : model.parameters()) {
    out.integer<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    out.bytes(p.name.data(), p.name.size());
    out.integer<std::uint32_t>(static_cast<std::uint32_t>(p.tensor.ndim()));
    for (auto d : p.tensor.shape()) out.integer<std::uint64_t>(d);
    for (T v : p.tensor.data()) out.real(v);
  }
  out.finish();
}

template <typename T>
VisionTransformer<T> load_checkpoint(const std::filesystem::path& path) {
  Reader in(path);
  const auto header = read_header(in);
  if (header.scalar_bytes != sizeof(T)) {
    throw std::runtime_error("checkpoint: stored with " + std::to_string(header.scalar_bytes * 8) +
                             "-bit scalars, loading as " + std::to_string(sizeof(T) * 8) + "-bit");
  }
  VisionTransformer<T> model(header.config, 0);
  const auto count = in.integer<std::uint64_t>();
  if (count != model.parameters().size()) {
    throw std::runtime_error("checkpoint: expected " + std::to_string(model.parameters().size()) +
                             " parameters, found " + std::to_string(count));
  }
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name = in.text(in.integer<std::uint32_t>());
    Tensor<T>* target = nullptr;
    try {
      target = &model.parameter(name);
    } catch (const std::out_of_range&) {
      throw std::runtime_error("checkpoint: unexpected parameter '" + name + "'");
    }
    numerics::Shape shape(in.integer<std::uint32_t>());
    for (auto& d : shape) d = in.integer<std::uint64_t>();
    if (shape != target->shape()) {
      throw std::runtime_error("checkpoint: parameter '" + name + "' has shape " +
                               numerics::shape_to_string(shape) + ", model expects " +
                               numerics::shape_to_string(target->shape()));
    }
    for (auto& v : target->mutable_data()) {
      if constexpr (sizeof(T) == 8) {
        v = in.real64();
      } else {
        v = in.real32();
      }
    }
  }
  return model;
}

CheckpointHeader read_checkpoint_header(const std::filesystem::path& path) {
  Reader in(path);
  return read_header(in);
}

template void save_checkpoint<float>(const VisionTransformer<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const VisionTransformer<double>&, const std::filesystem::path&);
template VisionTransformer<float> load_checkpoint<float>(const std::filesystem::path&);
template VisionTransformer<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace skipvit::vit
