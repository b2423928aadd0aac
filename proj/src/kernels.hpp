#pragma once

#include <cstddef>
#include <vector>

// Inner matmul loops. Layouts are row-major; the _acc variants accumulate
// into the output. Loop orders are chosen so the compiler can vectorize
// without reassociating reductions; the _nt forms stage a transposed copy of
// b so the hot loop streams contiguously.
namespace unlearn::diff::kern {

inline double* transpose_scratch(const double* b, int rows, int cols) {
  thread_local std::vector<double> scratch;
  scratch.resize(static_cast<size_t>(rows) * cols);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) scratch[static_cast<size_t>(j) * rows + i] = b[static_cast<size_t>(i) * cols + j];
  return scratch.data();
}

// c = a[m x k] . b[k x n]
inline void mm_nn(const double* __restrict a, const double* __restrict b, double* __restrict c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) ci[j] = 0.0;
    const double* ai = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double f = ai[p];
      const double* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += f * bp[j];
    }
  }
}

// c += a[m x k] . b[k x n]
inline void mm_nn_acc(const double* __restrict a, const double* __restrict b, double* __restrict c, int m, int k,
                      int n) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<size_t>(i) * n;
    const double* ai = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double f = ai[p];
      const double* bp = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += f * bp[j];
    }
  }
}

// c = a[m x k] . b[n x k]^T
inline void mm_nt(const double* __restrict a, const double* b, double* __restrict c, int m, int k, int n) {
  const double* bt = transpose_scratch(b, n, k);  // k x n
  mm_nn(a, bt, c, m, k, n);
}

// c += a[m x k] . b[n x k]^T
inline void mm_nt_acc(const double* __restrict a, const double* b, double* __restrict c, int m, int k, int n) {
  const double* bt = transpose_scratch(b, n, k);
  mm_nn_acc(a, bt, c, m, k, n);
}

// c += a[k x m]^T . b[k x n]
inline void mm_tn_acc(const double* __restrict a, const double* __restrict b, double* __restrict c, int m, int k,
                      int n) {
  for (int p = 0; p < k; ++p) {
    const double* ap = a + static_cast<size_t>(p) * m;
    const double* bp = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double f = ap[i];
      double* ci = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += f * bp[j];
    }
  }
}

}  // namespace unlearn::diff::kern
