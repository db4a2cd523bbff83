#include "laip/kernels.hpp"

#include <algorithm>
#include <cmath>

namespace laip::kernels {

namespace {

// One output row of c = a * b. Loop order i-p-j keeps b accesses contiguous.
inline void gemm_nn_row(const double* __restrict a, const double* __restrict b, double* __restrict c, GemmDims d, std::size_t i,
                        bool accumulate) {
  double* crow = c + i * d.n;
  if (!accumulate) std::fill(crow, crow + d.n, 0.0);
  const double* arow = a + i * d.k;
  for (std::size_t p = 0; p < d.k; ++p) {
    const double av = arow[p];
    if (av == 0.0) continue;
    const double* brow = b + p * d.n;
    for (std::size_t j = 0; j < d.n; ++j) crow[j] += av * brow[j];
  }
}

inline void gemm_nt_row(const double* a, const double* b, double* c, GemmDims d, std::size_t i,
                        bool accumulate) {
  double* crow = c + i * d.n;
  const double* arow = a + i * d.k;
  for (std::size_t j = 0; j < d.n; ++j) {
    const double* brow = b + j * d.k;
    // Four partial sums let the compiler keep independent FMA chains.
    double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
    std::size_t p = 0;
    for (; p + 4 <= d.k; p += 4) {
      s0 += arow[p] * brow[p];
      s1 += arow[p + 1] * brow[p + 1];
      s2 += arow[p + 2] * brow[p + 2];
      s3 += arow[p + 3] * brow[p + 3];
    }
    for (; p < d.k; ++p) s0 += arow[p] * brow[p];
    const double s = (s0 + s1) + (s2 + s3);
    crow[j] = accumulate ? crow[j] + s : s;
  }
}

inline void gemm_tn_row(const double* __restrict a, const double* __restrict b, double* __restrict c, GemmDims d, std::size_t i,
                        bool accumulate) {
  double* crow = c + i * d.n;
  if (!accumulate) std::fill(crow, crow + d.n, 0.0);
  for (std::size_t p = 0; p < d.k; ++p) {
    const double av = a[p * d.m + i];
    if (av == 0.0) continue;
    const double* brow = b + p * d.n;
    for (std::size_t j = 0; j < d.n; ++j) crow[j] += av * brow[j];
  }
}

inline void softmax_row(const double* x, double* y, std::size_t cols) {
  double mx = x[0];
  for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
  double sum = 0.0;
  for (std::size_t j = 0; j < cols; ++j) {
    y[j] = std::exp(x[j] - mx);
    sum += y[j];
  }
  const double inv = 1.0 / sum;
  for (std::size_t j = 0; j < cols; ++j) y[j] *= inv;
}

bool worth_parallel(GemmDims d) { return d.m > 1 && d.m * d.k * d.n >= kParallelThreshold; }

}  // namespace

namespace serial {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate) {
  for (std::size_t i = 0; i < dims.m; ++i)
    gemm_nn_row(a.data(), b.data(), c.data(), dims, i, accumulate);
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate) {
  for (std::size_t i = 0; i < dims.m; ++i)
    gemm_nt_row(a.data(), b.data(), c.data(), dims, i, accumulate);
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate) {
  for (std::size_t i = 0; i < dims.m; ++i)
    gemm_tn_row(a.data(), b.data(), c.data(), dims, i, accumulate);
}

void row_softmax(std::span<const double> x, std::span<double> y, std::size_t rows,
                 std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) softmax_row(x.data() + r * cols, y.data() + r * cols, cols);
}

}  // namespace serial

namespace omp {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate) {
  if (!worth_parallel(dims)) return serial::gemm_nn(a, b, c, dims, accumulate);
  const auto m = static_cast<std::ptrdiff_t>(dims.m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i)
    gemm_nn_row(a.data(), b.data(), c.data(), dims, static_cast<std::size_t>(i), accumulate);
}

void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate) {
  if (!worth_parallel(dims)) return serial::gemm_nt(a, b, c, dims, accumulate);
  const auto m = static_cast<std::ptrdiff_t>(dims.m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i)
    gemm_nt_row(a.data(), b.data(), c.data(), dims, static_cast<std::size_t>(i), accumulate);
}

void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate) {
  if (!worth_parallel(dims)) return serial::gemm_tn(a, b, c, dims, accumulate);
  const auto m = static_cast<std::ptrdiff_t>(dims.m);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t i = 0; i < m; ++i)
    gemm_tn_row(a.data(), b.data(), c.data(), dims, static_cast<std::size_t>(i), accumulate);
}

void row_softmax(std::span<const double> x, std::span<double> y, std::size_t rows,
                 std::size_t cols) {
  if (rows < 2 || rows * cols < kParallelThreshold) return serial::row_softmax(x, y, rows, cols);
  const auto m = static_cast<std::ptrdiff_t>(rows);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t r = 0; r < m; ++r)
    softmax_row(x.data() + r * cols, y.data() + r * cols, cols);
}

}  // namespace omp

}  // namespace laip::kernels
