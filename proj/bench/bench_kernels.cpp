#include <chrono>
#include <cstdio>
#include <functional>
#include <vector>

#include <omp.h>

#include "laip/kernels.hpp"
#include "laip/rng.hpp"

using namespace laip;

namespace {

std::vector<double> random_vec(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto& x : v) x = rng.normal();
  return v;
}

double seconds(const std::function<void()>& f, int reps) {
  f();
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < reps; ++i) f();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double>(t1 - t0).count() / reps;
}

}  // namespace

int main() {
  Rng rng(0);
  std::printf("threads: %d\n", omp_get_max_threads());
  std::printf("%-12s %-16s %12s %12s %8s\n", "kernel", "shape", "serial_ms", "omp_ms", "speedup");
  for (std::size_t n : {32, 65, 128, 256}) {
    kernels::GemmDims dims{n, n, n};
    auto a = random_vec(rng, n * n), b = random_vec(rng, n * n);
    std::vector<double> c(n * n);
    const int reps = n <= 65 ? 200 : 10;
    const double s = seconds([&] { kernels::serial::gemm_nn(a, b, c, dims, false); }, reps);
    const double p = seconds([&] { kernels::omp::gemm_nn(a, b, c, dims, false); }, reps);
    char shape[32];
    std::snprintf(shape, sizeof shape, "%zux%zux%zu", n, n, n);
    std::printf("%-12s %-16s %12.4f %12.4f %8.2f\n", "gemm_nn", shape, 1e3 * s, 1e3 * p, s / p);
  }
  for (std::size_t rows : {65, 512, 4096}) {
    const std::size_t cols = 65;
    auto x = random_vec(rng, rows * cols);
    std::vector<double> y(rows * cols);
    const double s = seconds([&] { kernels::serial::row_softmax(x, y, rows, cols); }, 50);
    const double p = seconds([&] { kernels::omp::row_softmax(x, y, rows, cols); }, 50);
    char shape[32];
    std::snprintf(shape, sizeof shape, "%zux%zu", rows, cols);
    std::printf("%-12s %-16s %12.4f %12.4f %8.2f\n", "row_softmax", shape, 1e3 * s, 1e3 * p, s / p);
  }
  return 0;
}
