#include "skipvit/numerics/kernels.hpp"

#include <algorithm>

namespace skipvit::numerics::kernels {

namespace {

// Column tile spans 256 bytes per row, four rows per register block.
template <typename T>
inline constexpr std::size_t kTileCols = 256 / sizeof(T);
inline constexpr std::size_t kTileRows = 4;

template <typename T, bool Accumulate>
inline void store(T* dst, const T* acc, std::size_t count) {
  for (std::size_t j = 0; j < count; ++j) {
    if constexpr (Accumulate) {
      dst[j] += acc[j];
    } else {
      dst[j] = acc[j];
    }
  }
}

template <typename T>
using Vec [[gnu::vector_size(64), gnu::aligned(alignof(T))]] = T;

template <typename T, bool Accumulate>
void block_full(const T* a, const T* b, T* c, std::size_t i, std::size_t j, std::size_t k,
                std::size_t n) {
  using V = Vec<T>;
  constexpr std::size_t kLanes = sizeof(V) / sizeof(T);
  static_assert(kTileCols<T> == 4 * kLanes);
  V acc[kTileRows][4] = {};
  const T* a0 = a + (i + 0) * k;
  const T* a1 = a + (i + 1) * k;
  const T* a2 = a + (i + 2) * k;
  const T* a3 = a + (i + 3) * k;
  for (std::size_t p = 0; p < k; ++p) {
    const V* brow = reinterpret_cast<const V*>(b + p * n + j);
    const V b0 = brow[0], b1 = brow[1], b2 = brow[2], b3 = brow[3];
    const T v[kTileRows] = {a0[p], a1[p], a2[p], a3[p]};
    for (std::size_t r = 0; r < kTileRows; ++r) {
      acc[r][0] += v[r] * b0;
      acc[r][1] += v[r] * b1;
      acc[r][2] += v[r] * b2;
      acc[r][3] += v[r] * b3;
    }
  }
  for (std::size_t r = 0; r < kTileRows; ++r) {
    alignas(64) T tmp[kTileCols<T>];
    for (std::size_t q = 0; q < 4; ++q) {
      for (std::size_t l = 0; l < kLanes; ++l) tmp[q * kLanes + l] = acc[r][q][l];
    }
    store<T, Accumulate>(c + (i + r) * n + j, tmp, kTileCols<T>);
  }
}

// Handles row/column remainders with the same per-element summation order.
template <typename T, bool Accumulate>
void block_edge(const T* a, const T* b, T* c, std::size_t i, std::size_t rows, std::size_t j,
                std::size_t cols, std::size_t k, std::size_t n) {
  constexpr std::size_t kCols = kTileCols<T>;
  alignas(64) T acc[kCols];
  for (std::size_t r = 0; r < rows; ++r) {
    std::fill(acc, acc + cols, T(0));
    const T* arow = a + (i + r) * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T v = arow[p];
      const T* brow = b + p * n + j;
      for (std::size_t q = 0; q < cols; ++q) acc[q] += v * brow[q];
    }
    store<T, Accumulate>(c + (i + r) * n + j, acc, cols);
  }
}

template <typename T, bool Accumulate>
void gemm_impl(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  constexpr std::size_t kCols = kTileCols<T>;
  if (k == 0) {
    if constexpr (!Accumulate) std::fill(c, c + m * n, T(0));
    return;
  }
  for (std::size_t j = 0; j < n; j += kCols) {
    const std::size_t cols = std::min(kCols, n - j);
    std::size_t i = 0;
    if (cols == kCols) {
      for (; i + kTileRows <= m; i += kTileRows) block_full<T, Accumulate>(a, b, c, i, j, k, n);
    }
    if (i < m) block_edge<T, Accumulate>(a, b, c, i, m - i, j, cols, k, n);
  }
}

}  // namespace

template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_impl<T, false>(a, b, c, m, k, n);
}

template <typename T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  gemm_impl<T, true>(a, b, c, m, k, n);
}

template <typename T>
void transpose2d(const T* in, T* out, std::size_t m, std::size_t n) {
  constexpr std::size_t kBlock = 32;
  for (std::size_t i0 = 0; i0 < m; i0 += kBlock) {
    for (std::size_t j0 = 0; j0 < n; j0 += kBlock) {
      const std::size_t i1 = std::min(m, i0 + kBlock);
      const std::size_t j1 = std::min(n, j0 + kBlock);
      for (std::size_t i = i0; i < i1; ++i) {
        for (std::size_t j = j0; j < j1; ++j) out[j * m + i] = in[i * n + j];
      }
    }
  }
}

template void gemm<float>(const float*, const float*, float*, std::size_t, std::size_t, std::size_t);
template void gemm<double>(const double*, const double*, double*, std::size_t, std::size_t,
                           std::size_t);
template void gemm_accumulate<float>(const float*, const float*, float*, std::size_t, std::size_t,
                                     std::size_t);
template void gemm_accumulate<double>(const double*, const double*, double*, std::size_t,
                                      std::size_t, std::size_t);
template void transpose2d<float>(const float*, float*, std::size_t, std::size_t);
template void transpose2d<double>(const double*, double*, std::size_t, std::size_t);

}  // namespace skipvit::numerics::kernels
