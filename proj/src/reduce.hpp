#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

namespace routelab::detail {

// Order-insensitive sum: contributions are sorted before a compensated
// accumulation, so any permutation of the input gives the same bits.
inline double sorted_sum(std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  double sum = 0.0;
  double comp = 0.0;
  for (double v : values) {
    const double t = sum + v;
    comp += std::abs(sum) >= std::abs(v) ? (sum - t) + v : (v - t) + sum;
    sum = t;
  }
  return sum + comp;
}

// Column-wise sorted_sum over rows of equal width.
inline std::vector<double> sorted_column_sums(const std::vector<std::vector<double>>& rows,
                                              std::size_t width) {
  std::vector<double> out(width, 0.0);
  std::vector<double> column(rows.size());
  for (std::size_t c = 0; c < width; ++c) {
    for (std::size_t r = 0; r < rows.size(); ++r) column[r] = rows[r][c];
    out[c] = sorted_sum(column);
  }
  return out;
}

}  // namespace routelab::detail
