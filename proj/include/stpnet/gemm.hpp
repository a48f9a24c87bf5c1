#pragma once

#include <cstdint>

namespace stpnet {

// C[M,N] (+)= A[M,K] * B[K,N], row-major, optional transposes on logical A/B.
// accumulate=false overwrites C. Single code path for float and double keeps
// training and 64-bit gradient checks on identical arithmetic structure, and the
// fixed k-ordered inner accumulation keeps results bit-stable across runs.
template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a,
          int64_t lda, const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate);

}  // namespace stpnet
