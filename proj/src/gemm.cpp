#include "stpnet/gemm.hpp"

#include <cstring>
#include <vector>

namespace stpnet {

// Register-blocked GEMM: the driver walks C in MR x NR tiles whose
// accumulators live in registers across the whole k loop, so each B row is
// loaded once per row-block instead of once per row (the i-k-j streaming
// kernel this replaces was memory-bound on exactly that reread). Accumulation
// order over k is ascending everywhere, including the edge kernels, so
// results are identical for every (m, n) split of the same problem.
namespace {

constexpr int kMR = 8;  // C rows per register tile

// NR floats/doubles per tile: two 512-bit vectors' worth at either width.
template <typename T>
constexpr int nr_tile() {
  return int(128 / sizeof(T));
}

// Full MRT x NR tile with compile-time bounds; ACC stays in registers.
template <typename T, int NR, int MRT>
void micro_full(int64_t k, const T* a, int64_t lda, const T* b, int64_t ldb,
                T* c, int64_t ldc, bool accumulate) {
  T acc[MRT][NR] = {};
  for (int64_t p = 0; p < k; ++p) {
    const T* brow = b + p * ldb;
    for (int r = 0; r < MRT; ++r) {
      T av = a[r * lda + p];
      // vectorize along j (distinct accumulators), never across rows; the
      // per-element sum order over p stays sequential either way
#pragma omp simd
      for (int j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (int r = 0; r < MRT; ++r) {
    T* crow = c + r * ldc;
    if (accumulate)
      for (int j = 0; j < NR; ++j) crow[j] += acc[r][j];
    else
      for (int j = 0; j < NR; ++j) crow[j] = acc[r][j];
  }
}

// Ragged right edge: runtime column count, stack accumulators.
template <typename T, int MRT>
void micro_edge(int64_t k, const T* a, int64_t lda, const T* b, int64_t ldb,
                T* c, int64_t ldc, int64_t nr, bool accumulate) {
  constexpr int NR = nr_tile<T>();
  T acc[MRT][NR];
  for (int r = 0; r < MRT; ++r)
    for (int64_t j = 0; j < nr; ++j) acc[r][j] = T(0);
  for (int64_t p = 0; p < k; ++p) {
    const T* brow = b + p * ldb;
    for (int r = 0; r < MRT; ++r) {
      T av = a[r * lda + p];
#pragma omp simd
      for (int64_t j = 0; j < nr; ++j) acc[r][j] += av * brow[j];
    }
  }
  for (int r = 0; r < MRT; ++r) {
    T* crow = c + r * ldc;
    if (accumulate)
      for (int64_t j = 0; j < nr; ++j) crow[j] += acc[r][j];
    else
      for (int64_t j = 0; j < nr; ++j) crow[j] = acc[r][j];
  }
}

template <typename T, int MRT>
void row_band(int64_t n, int64_t k, const T* a, int64_t lda, const T* b,
              int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  constexpr int NR = nr_tile<T>();
  int64_t j = 0;
  for (; j + NR <= n; j += NR)
    micro_full<T, NR, MRT>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
  if (j + NR / 2 <= n) {
    micro_full<T, NR / 2, MRT>(k, a, lda, b + j, ldb, c + j, ldc, accumulate);
    j += NR / 2;
  }
  if (j < n)
    micro_edge<T, MRT>(k, a, lda, b + j, ldb, c + j, ldc, n - j, accumulate);
}

template <typename T>
void gemm_rowmajor(int64_t m, int64_t n, int64_t k, const T* a, int64_t lda,
                   const T* b, int64_t ldb, T* c, int64_t ldc,
                   bool accumulate) {
  int64_t i = 0;
  for (; i + kMR <= m; i += kMR)
    row_band<T, kMR>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc,
                     accumulate);
  for (; i < m; ++i)
    row_band<T, 1>(n, k, a + i * lda, lda, b, ldb, c + i * ldc, ldc,
                   accumulate);
}

template <typename T>
std::vector<T> pack_transposed(const T* src, int64_t rows, int64_t cols, int64_t ld) {
  // src is [rows, cols] with leading dim ld; returns [cols, rows] row-major.
  std::vector<T> out(size_t(rows) * size_t(cols));
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) out[size_t(c) * rows + r] = src[r * ld + c];
  return out;
}

}  // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const T* a,
          int64_t lda, const T* b, int64_t ldb, T* c, int64_t ldc, bool accumulate) {
  const T* ap = a;
  const T* bp = b;
  int64_t alead = lda, blead = ldb;
  std::vector<T> apack, bpack;
  if (trans_a) {
    // logical A is [m,k] = stored [k,m] transposed
    apack = pack_transposed(a, k, m, lda);
    ap = apack.data();
    alead = k;
  }
  if (trans_b) {
    bpack = pack_transposed(b, n, k, ldb);
    bp = bpack.data();
    blead = n;
  }
  gemm_rowmajor(m, n, k, ap, alead, bp, blead, c, ldc, accumulate);
}

template void gemm<float>(bool, bool, int64_t, int64_t, int64_t, const float*, int64_t,
                          const float*, int64_t, float*, int64_t, bool);
template void gemm<double>(bool, bool, int64_t, int64_t, int64_t, const double*, int64_t,
                           const double*, int64_t, double*, int64_t, bool);

}  // namespace stpnet
