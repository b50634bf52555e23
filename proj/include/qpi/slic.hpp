#pragma once

#include <cstddef>
#include <vector>

#include "qpi/image.hpp"

namespace qpi::explain {

struct SlicParams {
  std::size_t segments = 25;
  double compactness = 10.0;
  double sigma = 2.5;
};

// Per-pixel labels 0..count-1, each label one 4-connected region.
struct Segmentation {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<int> labels;
  std::size_t count = 0;

  int at(std::size_t row, std::size_t col) const { return labels[row * width + col]; }
};

// Separable Gaussian blur, kernel truncated at 4 sigma, edge pixels
// replicated. sigma <= 0 returns the input.
Image gaussian_blur(const Image& image, double sigma);

// SLIC superpixels: k-means over (intensity * step / compactness, row, col)
// from a regular seed grid (step = sqrt(pixels / segments)), 10 iterations,
// then every component that is not the largest of its label is merged into
// its largest adjacent region. ConfigError if segments is 0 or exceeds the
// pixel count.
Segmentation slic(const Image& image, const SlicParams& params);

// Merges orphan components as described above and relabels in raster order.
// Exposed for testing on hand-built label maps.
Segmentation enforce_connectivity(std::size_t height, std::size_t width, const std::vector<int>& labels);

}  // namespace qpi::explain
