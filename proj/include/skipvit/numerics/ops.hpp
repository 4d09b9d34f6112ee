#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "skipvit/numerics/tensor.hpp"

namespace skipvit::numerics {

/// Per-slice row selection for gather_rows / scatter_rows. A tensor of shape
/// [..., rows, width] is viewed as `batch` slices (product of leading dims);
/// slice b uses rows[b * count .. (b + 1) * count).
struct RowIndex {
  std::size_t batch = 0;
  std::size_t count = 0;
  std::vector<std::size_t> rows;

  static RowIndex shared(std::size_t batch, std::span<const std::size_t> rows);
  std::span<const std::size_t> slice(std::size_t b) const {
    return {rows.data() + b * count, count};
  }
};

/// a[..., M, K] x b[..., K, N]. b either carries the same leading dims as a
/// or none (a shared right-hand matrix).
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise sum; b's shape must equal a's or be a suffix of it, in which
/// case b is repeated over a's leading dims.
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

/// Swaps two axes and materialises the result.
template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1);

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// Max-subtracted softmax along `axis`.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis);

/// Normalises over the last axis with population variance, then applies
/// gain and bias (both shaped [last-axis]).
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);

/// tanh approximation.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x);

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const RowIndex& index);

/// Copy of `base` with the indexed rows replaced by `src`'s rows. Gradient
/// reaches base only at rows that were not overwritten.
template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& base, const Tensor<T>& src, const RowIndex& index);

/// Concatenation along the row axis (-2); leading dims and width must agree.
template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mean(const Tensor<T>& x, int axis);

template <typename T>
Tensor<T> sum(const Tensor<T>& x);

/// Divides each last-axis slice by its sum. Slices that sum to zero are
/// replaced by uniform weights (and pass no gradient); `fallbacks`, when
/// given, receives the number of such slices.
template <typename T>
Tensor<T> normalize_last(const Tensor<T>& x, std::size_t* fallbacks = nullptr);

/// Mean negative log-likelihood of softmax(logits[B, C]) at the labels.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::int32_t> labels);

}  // namespace skipvit::numerics
