#pragma once

#include <cmath>
#include <map>
#include <utility>
#include <vector>

#include "crab/common.hpp"

namespace crab::evaluate {

// Adjusted Rand index (Hubert-Arabie) between two labelings of the same
// items. Label values are arbitrary; only the induced partitions matter.
// Degenerate case (both partitions trivial in the same way) scores 1.
inline double adjusted_rand_index(const std::vector<int>& a, const std::vector<int>& b) {
  require<ArgError>(a.size() == b.size() && !a.empty(),
                    "adjusted_rand_index: labelings must be same nonempty length");
  std::map<std::pair<int, int>, long long> cell;
  std::map<int, long long> rows, cols;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++cell[{a[i], b[i]}];
    ++rows[a[i]];
    ++cols[b[i]];
  }
  auto choose2 = [](long long n) { return 0.5 * static_cast<double>(n) * static_cast<double>(n - 1); };
  double index = 0, sum_a = 0, sum_b = 0;
  for (const auto& [key, n] : cell) index += choose2(n);
  for (const auto& [key, n] : rows) sum_a += choose2(n);
  for (const auto& [key, n] : cols) sum_b += choose2(n);
  const double total = choose2(static_cast<long long>(a.size()));
  const double expected = sum_a * sum_b / total;
  const double max_index = 0.5 * (sum_a + sum_b);
  if (std::abs(max_index - expected) < 1e-12)
    return std::abs(index - expected) < 1e-12 ? 1.0 : 0.0;
  return (index - expected) / (max_index - expected);
}

}  // namespace crab::evaluate
