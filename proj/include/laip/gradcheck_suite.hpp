#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "laip/model.hpp"

// Finite-difference checks of every loss at toy dimensions.
namespace laip::gradcheck {

struct Entry {
  std::string loss;    // itc, itm, triplet, biatt, mpm, total
  std::string target;  // what the gradient is taken with respect to
  std::uint64_t seed = 0;
  double max_rel_error = 0.0;
};

struct SuiteOptions {
  std::uint64_t base_seed = 0;
  std::size_t seeds = 10;
  double eps = 1e-3;
};

// Model config used by the suite: d = 16, 4 heads, a 2x2 patch grid.
model::ModelConfig toy_config();

std::vector<Entry> run_suite(const SuiteOptions& options = {});

// Largest error per loss, in first-seen order.
std::vector<std::pair<std::string, double>> max_by_loss(const std::vector<Entry>& entries);

}  // namespace laip::gradcheck
