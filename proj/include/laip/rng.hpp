#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace laip {

// PCG32 (XSH-RR output, 64-bit LCG state). All derived draws are implemented
// here rather than through <random> distributions so that streams are
// identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed, std::uint64_t stream = 0x14057b7ef767814fULL);

  std::uint32_t next_u32();
  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [0, n), unbiased.
  std::uint64_t below(std::uint64_t n);
  // Standard normal via Box-Muller.
  double normal();
  // Normal(0, sigma) redrawn until |x| <= 2 sigma.
  double truncated_normal(double sigma);
  // Index drawn with probability proportional to weights (nonnegative, not all zero).
  std::size_t categorical(std::span<const double> weights);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent generator derived from this one's next output.
  Rng split();

 private:
  std::uint64_t state_;
  std::uint64_t inc_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace laip
