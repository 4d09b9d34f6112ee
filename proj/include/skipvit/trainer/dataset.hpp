#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "skipvit/numerics/tensor.hpp"

namespace skipvit::trainer {

/// Raw 8-bit images, channel-major per sample ([n, channels, side, side]).
struct Dataset {
  std::size_t channels = 3;
  std::size_t side = 32;
  std::size_t num_classes = 10;
  std::vector<std::uint8_t> pixels;
  std::vector<std::int32_t> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_bytes() const { return channels * side * side; }
  std::span<const std::uint8_t> image(std::size_t i) const {
    return {pixels.data() + i * image_bytes(), image_bytes()};
  }
  /// First `count` samples (all of them if count exceeds size()).
  Dataset head(std::size_t count) const;
};

struct DatasetSplits {
  Dataset train;
  Dataset val;
};

/// Class k draws one bright square inside cell k of a near-square grid over
/// the image; the background is uniform noise. Dimmer distractor squares land
/// in other cells.
struct SyntheticSpec {
  std::uint64_t seed = 0;
  std::size_t count = 256;
  std::size_t num_classes = 10;
  std::size_t side = 32;
  std::size_t channels = 3;
  std::size_t square = 5;       // side of the class square in pixels
  std::size_t distractors = 2;  // dimmer squares in other cells
  std::uint8_t noise = 96;      // background drawn from [0, noise]
};

Dataset synthetic(const SyntheticSpec& spec);

/// One CIFAR-10 binary batch file: records of 1 label byte + 3072 pixel bytes.
/// Throws IngestionError with the byte offset of a short or corrupt record.
Dataset load_cifar_file(const std::filesystem::path& file);

/// data_batch_1..5.bin as train, test_batch.bin as val.
DatasetSplits load_cifar10(const std::filesystem::path& root);

struct DatasetSource {
  std::string name = "synthetic";  // "synthetic" or "cifar10"
  std::filesystem::path root;      // cifar10 only; falls back to $SKIPVIT_DATA_ROOT
  std::uint64_t seed = 0;
  std::size_t train_size = 10000;  // synthetic count, or cifar10 subset limit (0 = all)
  std::size_t val_size = 2000;
  std::size_t num_classes = 10;
  std::size_t side = 32;

  bool operator==(const DatasetSource&) const = default;
};

/// Throws ValidationError for an unknown name, IngestionError when files are missing.
DatasetSplits load_dataset(const DatasetSource& source);

/// Per-channel standardisation with statistics taken from one split.
struct Normalizer {
  std::vector<double> mean;    // per channel, on the [0, 1] scale
  std::vector<double> stddev;  // per channel

  static Normalizer fit(const Dataset& data);

  /// [indices.size(), channels, side, side] standardised images.
  template <typename T>
  numerics::Tensor<T> batch(const Dataset& data, std::span<const std::size_t> indices) const;
};

}  // namespace skipvit::trainer
