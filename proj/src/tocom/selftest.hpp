#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tocom {

struct SuiteResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// Quick invariant suites: gradient check of the distillation loss, matching
// against a brute-force oracle, duplicate-token invariance, plugin algebra,
// artifact round trips, and a linear probe on the synthetic corpus.
std::vector<SuiteResult> run_selftest(std::uint64_t seed = 0);

SuiteResult selftest_gradcheck(std::uint64_t seed, std::size_t configs);
SuiteResult selftest_bsm_oracle(std::uint64_t seed, std::size_t seeds);
SuiteResult selftest_duplicate_invariance(std::uint64_t seed, std::size_t trials);
SuiteResult selftest_plugin_algebra(std::uint64_t seed);
SuiteResult selftest_persistence(std::uint64_t seed);
SuiteResult selftest_linear_probe(std::uint64_t seed);

}  // namespace tocom
