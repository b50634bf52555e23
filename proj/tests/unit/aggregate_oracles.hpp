#pragma once

// Planted-cluster data and an embedding quality score shared by the unit and
// acceptance suites.

#include <algorithm>
#include <array>
#include <cmath>
#include <vector>

#include "qpi/rng.hpp"

namespace oracle {

// Two Gaussian blobs in 5 dimensions centred at -5 and +5, classes alternating.
inline std::vector<std::vector<double>> two_blobs(std::size_t n, std::uint64_t seed, std::vector<int>& truth) {
  qpi::Rng rng(seed);
  std::vector<std::vector<double>> pts;
  truth.clear();
  for (std::size_t i = 0; i < n; ++i) {
    const int c = static_cast<int>(i % 2);
    std::vector<double> p(5);
    for (auto& v : p) v = rng.normal() + (c == 0 ? -5.0 : 5.0);
    pts.push_back(p);
    truth.push_back(c);
  }
  return pts;
}

// Mean silhouette of a labelling in the plane.
inline double silhouette(const std::vector<std::array<double, 2>>& y, const std::vector<int>& labels) {
  const std::size_t n = y.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double same = 0.0, other = 0.0;
    std::size_t ns = 0, no = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double d = std::hypot(y[i][0] - y[j][0], y[i][1] - y[j][1]);
      if (labels[i] == labels[j]) {
        same += d;
        ++ns;
      } else {
        other += d;
        ++no;
      }
    }
    const double a = same / static_cast<double>(ns), b = other / static_cast<double>(no);
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(n);
}

}  // namespace oracle
