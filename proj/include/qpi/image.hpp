#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "qpi/tensor.hpp"

namespace qpi {

// Single-channel row-major image.
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), pixels(h * w, fill) {}
  Image(std::size_t h, std::size_t w, std::vector<double> values);

  double& at(std::size_t row, std::size_t col) { return pixels[row * width + col]; }
  double at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  std::size_t size() const { return pixels.size(); }
  double mean() const;
  double min() const;
  double max() const;
};

// Bilinear resampling with pixel-centre alignment (source coordinate
// (dst + 0.5) * scale - 0.5, clamped to the border). Output values stay
// within [min, max] of the source; equal extents reproduce the source.
Image resize_bilinear(const Image& src, std::size_t height, std::size_t width);

// Transpose of resize_bilinear: maps a gradient on the resized grid back onto
// the source grid.
Image resize_bilinear_adjoint(const Image& grad, std::size_t src_height, std::size_t src_width);

// Stacks images into [N, channels, H', W'] after resizing each to H' x W' and
// replicating the single channel.
Tensor images_to_batch(std::span<const Image> images, const Shape& sample_shape);

// Pulls a per-sample input gradient [C, H', W'] back onto an H x W patch:
// channel sum followed by the resize adjoint.
Image input_grad_to_patch(std::span<const double> sample_grad, const Shape& sample_shape,
                          std::size_t height, std::size_t width);

}  // namespace qpi
