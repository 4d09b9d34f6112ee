#include "skipvit/trainer/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

#include "skipvit/errors.hpp"

namespace skipvit::trainer {

namespace {

constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarChannels = 3;
constexpr std::size_t kCifarClasses = 10;
constexpr std::size_t kCifarRecord = 1 + kCifarChannels * kCifarSide * kCifarSide;

void append(Dataset& into, const Dataset& from) {
  into.pixels.insert(into.pixels.end(), from.pixels.begin(), from.pixels.end());
  into.labels.insert(into.labels.end(), from.labels.begin(), from.labels.end());
}

}  // namespace

Dataset Dataset::head(std::size_t count) const {
  Dataset out = *this;
  if (count >= size()) return out;
  out.labels.resize(count);
  out.pixels.resize(count * image_bytes());
  return out;
}

Dataset synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes == 0) throw ValidationError("dataset.num_classes: must be positive");
  const std::size_t grid = static_cast<std::size_t>(std::ceil(std::sqrt(double(spec.num_classes))));
  const std::size_t cell = spec.side / grid;
  if (cell < spec.square || spec.square == 0) {
    throw ValidationError("dataset: " + std::to_string(spec.num_classes) + " classes leave " +
                          std::to_string(cell) + "px cells, too small for a " +
                          std::to_string(spec.square) + "px square");
  }
  if (spec.distractors + 1 > grid * grid) {
    throw ValidationError("dataset: more distractors than free grid cells");
  }
  std::mt19937_64 rng(spec.seed);
  auto uniform = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  Dataset data;
  data.channels = spec.channels;
  data.side = spec.side;
  data.num_classes = spec.num_classes;
  data.pixels.resize(spec.count * data.image_bytes());
  data.labels.resize(spec.count);
  std::vector<std::size_t> cells;

  for (std::size_t i = 0; i < spec.count; ++i) {
    const auto label = static_cast<std::size_t>(uniform(0, static_cast<int>(spec.num_classes) - 1));
    data.labels[i] = static_cast<std::int32_t>(label);
    std::uint8_t* img = data.pixels.data() + i * data.image_bytes();
    for (std::size_t p = 0; p < data.image_bytes(); ++p) img[p] = static_cast<std::uint8_t>(uniform(0, spec.noise));

    auto draw = [&](std::size_t which, int lo, int hi) {
      const std::size_t y0 = (which / grid) * cell + uniform(0, static_cast<int>(cell - spec.square));
      const std::size_t x0 = (which % grid) * cell + uniform(0, static_cast<int>(cell - spec.square));
      for (std::size_t c = 0; c < spec.channels; ++c) {
        const auto value = static_cast<std::uint8_t>(uniform(lo, hi));
        for (std::size_t y = y0; y < y0 + spec.square; ++y) {
          std::fill_n(img + (c * spec.side + y) * spec.side + x0, spec.square, value);
        }
      }
    };
    cells.resize(grid * grid);
    std::iota(cells.begin(), cells.end(), 0);
    cells.erase(cells.begin() + static_cast<std::ptrdiff_t>(label));
    std::shuffle(cells.begin(), cells.end(), rng);
    for (std::size_t d = 0; d < spec.distractors; ++d) draw(cells[d], 100, 200);
    draw(label, 180, 255);
  }
  return data;
}

Dataset load_cifar_file(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IngestionError("cannot open " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.empty()) throw IngestionError(file.string() + ": empty file at byte offset 0");

  Dataset data;
  data.channels = kCifarChannels;
  data.side = kCifarSide;
  data.num_classes = kCifarClasses;
  const std::size_t records = bytes.size() / kCifarRecord;
  if (records * kCifarRecord != bytes.size()) {
    throw IngestionError(file.string() + ": short record at byte offset " +
                         std::to_string(records * kCifarRecord) + " (" +
                         std::to_string(bytes.size() - records * kCifarRecord) + " of " +
                         std::to_string(kCifarRecord) + " bytes)");
  }
  data.labels.reserve(records);
  data.pixels.reserve(records * (kCifarRecord - 1));
  for (std::size_t r = 0; r < records; ++r) {
    const std::size_t offset = r * kCifarRecord;
    const std::uint8_t label = bytes[offset];
    if (label >= kCifarClasses) {
      throw IngestionError(file.string() + ": label " + std::to_string(label) + " at byte offset " +
                           std::to_string(offset) + " is outside 0..9");
    }
    data.labels.push_back(label);
    data.pixels.insert(data.pixels.end(), bytes.begin() + offset + 1, bytes.begin() + offset + kCifarRecord);
  }
  return data;
}

DatasetSplits load_cifar10(const std::filesystem::path& root) {
  DatasetSplits splits;
  for (int i = 1; i <= 5; ++i) {
    const auto file = root / ("data_batch_" + std::to_string(i) + ".bin");
    if (!std::filesystem::exists(file)) throw IngestionError("missing CIFAR-10 file " + file.string());
    auto part = load_cifar_file(file);
    if (i == 1) {
      splits.train = std::move(part);
    } else {
      append(splits.train, part);
    }
  }
  const auto test = root / "test_batch.bin";
  if (!std::filesystem::exists(test)) throw IngestionError("missing CIFAR-10 file " + test.string());
  splits.val = load_cifar_file(test);
  return splits;
}

DatasetSplits load_dataset(const DatasetSource& source) {
  if (source.name == "synthetic") {
    SyntheticSpec spec;
    spec.num_classes = source.num_classes;
    spec.side = source.side;
    spec.seed = source.seed;
    spec.count = source.train_size;
    DatasetSplits splits;
    splits.train = synthetic(spec);
    spec.seed = source.seed ^ 0x9E3779B97F4A7C15ULL;
    spec.count = source.val_size;
    splits.val = synthetic(spec);
    return splits;
  }
  if (source.name == "cifar10") {
    auto root = source.root;
    if (root.empty()) {
      const char* env = std::getenv("SKIPVIT_DATA_ROOT");
      if (env == nullptr) {
        throw IngestionError("dataset.root is unset and SKIPVIT_DATA_ROOT is not defined");
      }
      root = env;
    }
    auto splits = load_cifar10(root);
    if (source.train_size > 0) splits.train = splits.train.head(source.train_size);
    if (source.val_size > 0) splits.val = splits.val.head(source.val_size);
    return splits;
  }
  throw ValidationError("dataset.name: unknown source '" + source.name + "' (expected synthetic or cifar10)");
}

Normalizer Normalizer::fit(const Dataset& data) {
  Normalizer n;
  const std::size_t plane = data.side * data.side;
  n.mean.assign(data.channels, 0.0);
  n.stddev.assign(data.channels, 1.0);
  if (data.size() == 0) return n;
  for (std::size_t c = 0; c < data.channels; ++c) {
    double sum = 0, sq = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const std::uint8_t* p = data.pixels.data() + i * data.image_bytes() + c * plane;
      for (std::size_t j = 0; j < plane; ++j) {
        const double v = p[j] / 255.0;
        sum += v;
        sq += v * v;
      }
    }
    const double count = double(data.size() * plane);
    n.mean[c] = sum / count;
    const double var = std::max(sq / count - n.mean[c] * n.mean[c], 0.0);
    n.stddev[c] = var > 0 ? std::sqrt(var) : 1.0;
  }
  return n;
}

template <typename T>
numerics::Tensor<T> Normalizer::batch(const Dataset& data, std::span<const std::size_t> indices) const {
  const std::size_t plane = data.side * data.side;
  std::vector<T> out(indices.size() * data.image_bytes());
  T* dst = out.data();
  for (auto i : indices) {
    if (i >= data.size()) {
      throw IndexError("sample " + std::to_string(i) + " outside dataset of " + std::to_string(data.size()));
    }
    const std::uint8_t* src = data.pixels.data() + i * data.image_bytes();
    for (std::size_t c = 0; c < data.channels; ++c) {
      const double m = mean[c], inv = 1.0 / stddev[c];
      for (std::size_t j = 0; j < plane; ++j) *dst++ = static_cast<T>((src[c * plane + j] / 255.0 - m) * inv);
    }
  }
  return numerics::Tensor<T>({indices.size(), data.channels, data.side, data.side}, std::move(out));
}

template numerics::Tensor<float> Normalizer::batch<float>(const Dataset&, std::span<const std::size_t>) const;
template numerics::Tensor<double> Normalizer::batch<double>(const Dataset&, std::span<const std::size_t>) const;

}  // namespace skipvit::trainer
