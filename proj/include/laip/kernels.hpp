#pragma once

#include <cstddef>
#include <span>

// Dense kernels behind the tensor ops. Each kernel exists twice: a plain
// serial loop nest kept as the reference, and an OpenMP version that
// partitions output rows across threads. Both accumulate every output
// element in the same order, so results are bitwise identical.
namespace laip::kernels {

struct GemmDims {
  std::size_t m, k, n;
};

namespace serial {

// c[m x n] (+)= a[m x k] * b[k x n]
void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate);
// c[m x n] (+)= a[m x k] * b[n x k]^T
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate);
// c[m x n] (+)= a[k x m]^T * b[k x n]
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate);
void row_softmax(std::span<const double> x, std::span<double> y, std::size_t rows,
                 std::size_t cols);

}  // namespace serial

namespace omp {

void gemm_nn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate);
void gemm_nt(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate);
void gemm_tn(std::span<const double> a, std::span<const double> b, std::span<double> c,
             GemmDims dims, bool accumulate);
void row_softmax(std::span<const double> x, std::span<double> y, std::size_t rows,
                 std::size_t cols);

}  // namespace omp

// Below this many multiply-adds the OpenMP kernels stay on the calling thread.
inline constexpr std::size_t kParallelThreshold = 1 << 15;

}  // namespace laip::kernels
