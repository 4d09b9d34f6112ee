#pragma once

#include <cstddef>

namespace skipvit::numerics::kernels {

// c[M,N] = a[M,K] * b[K,N], all row-major, c overwritten. Every output
// element is reduced sequentially over k = 0..K-1, whatever the tiling.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

// c[M,N] += a[M,K] * b[K,N]; the sum over k is formed first, then added to c.
template <typename T>
void gemm_accumulate(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n);

// out[N,M] = in[M,N]
template <typename T>
void transpose2d(const T* in, T* out, std::size_t m, std::size_t n);

}  // namespace skipvit::numerics::kernels
