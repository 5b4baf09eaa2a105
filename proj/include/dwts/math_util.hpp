#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace dwts {

inline double soft_threshold(double x, double t) {
  if (x > t) return x - t;
  if (x < -t) return x + t;
  return 0.0;
}

// Standard normal quantile, Acklam's rational approximation refined by one
// Halley step against erfc. Absolute error < 1e-12 on (1e-300, 1 - 1e-16).
double normal_quantile(double prob);

// Type-7 quantile (linear interpolation between order statistics) of an
// unsorted sample. q in [0, 1].
double quantile_type7(std::vector<double> values, double q);

// Same, but `sorted` must already be ascending.
double quantile_type7_sorted(const std::vector<double>& sorted, double q);

}  // namespace dwts
