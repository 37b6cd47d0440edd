#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "apsope/error.hpp"

namespace apsope {

/// Linear-interpolation sample quantile (Hyndman-Fan type 7, the R/NumPy default).
inline double quantile(std::span<const double> xs, double prob) {
  if (xs.empty()) throw Error(ErrorCode::kEmptyDataset, "quantile of empty sample");
  std::vector<double> v(xs.begin(), xs.end());
  const double h = (static_cast<double>(v.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(lo), v.end());
  const double x_lo = v[lo];
  if (hi == lo) return x_lo;
  const double x_hi = *std::min_element(v.begin() + static_cast<std::ptrdiff_t>(lo) + 1, v.end());
  return x_lo + (h - static_cast<double>(lo)) * (x_hi - x_lo);
}

}  // namespace apsope
