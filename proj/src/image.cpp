#include "qpi/image.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "qpi/error.hpp"

namespace qpi {
namespace {

struct AxisTap {
  std::size_t lo, hi;
  double w_hi;  // weight of hi; lo gets 1 - w_hi
};

std::vector<AxisTap> axis_taps(std::size_t src, std::size_t dst) {
  std::vector<AxisTap> taps(dst);
  const double scale = static_cast<double>(src) / static_cast<double>(dst);
  for (std::size_t i = 0; i < dst; ++i) {
    double x = (static_cast<double>(i) + 0.5) * scale - 0.5;
    x = std::clamp(x, 0.0, static_cast<double>(src - 1));
    const auto lo = static_cast<std::size_t>(std::floor(x));
    const std::size_t hi = std::min(lo + 1, src - 1);
    taps[i] = {lo, hi, x - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

Image::Image(std::size_t h, std::size_t w, std::vector<double> values)
    : height(h), width(w), pixels(std::move(values)) {
  if (pixels.size() != h * w) {
    throw DimensionError("image " + std::to_string(h) + "x" + std::to_string(w) + " given " +
                         std::to_string(pixels.size()) + " values");
  }
}

double Image::mean() const {
  return pixels.empty() ? 0.0 : std::accumulate(pixels.begin(), pixels.end(), 0.0) / static_cast<double>(pixels.size());
}

double Image::min() const { return *std::min_element(pixels.begin(), pixels.end()); }
double Image::max() const { return *std::max_element(pixels.begin(), pixels.end()); }

Image resize_bilinear(const Image& src, std::size_t height, std::size_t width) {
  if (height < 1 || width < 1) throw DomainError("resize target must be >= 1");
  if (src.height == height && src.width == width) return src;
  const auto ty = axis_taps(src.height, height);
  const auto tx = axis_taps(src.width, width);
  Image out(height, width);
  for (std::size_t r = 0; r < height; ++r) {
    const AxisTap& y = ty[r];
    for (std::size_t c = 0; c < width; ++c) {
      const AxisTap& x = tx[c];
      const double top = src.at(y.lo, x.lo) * (1.0 - x.w_hi) + src.at(y.lo, x.hi) * x.w_hi;
      const double bottom = src.at(y.hi, x.lo) * (1.0 - x.w_hi) + src.at(y.hi, x.hi) * x.w_hi;
      out.at(r, c) = top * (1.0 - y.w_hi) + bottom * y.w_hi;
    }
  }
  return out;
}

Image resize_bilinear_adjoint(const Image& grad, std::size_t src_height, std::size_t src_width) {
  if (grad.height == src_height && grad.width == src_width) return grad;
  const auto ty = axis_taps(src_height, grad.height);
  const auto tx = axis_taps(src_width, grad.width);
  Image out(src_height, src_width);
  for (std::size_t r = 0; r < grad.height; ++r) {
    const AxisTap& y = ty[r];
    for (std::size_t c = 0; c < grad.width; ++c) {
      const AxisTap& x = tx[c];
      const double g = grad.at(r, c);
      out.at(y.lo, x.lo) += g * (1.0 - y.w_hi) * (1.0 - x.w_hi);
      out.at(y.lo, x.hi) += g * (1.0 - y.w_hi) * x.w_hi;
      out.at(y.hi, x.lo) += g * y.w_hi * (1.0 - x.w_hi);
      out.at(y.hi, x.hi) += g * y.w_hi * x.w_hi;
    }
  }
  return out;
}

Tensor images_to_batch(std::span<const Image> images, const Shape& sample_shape) {
  if (sample_shape.size() != 3) {
    throw DimensionError("images_to_batch expects a [C,H,W] sample shape, got " + shape_string(sample_shape));
  }
  const std::size_t channels = sample_shape[0], h = sample_shape[1], w = sample_shape[2];
  Tensor batch({images.size(), channels, h, w});
  const std::size_t plane = h * w;
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image resized = resize_bilinear(images[n], h, w);
    for (std::size_t c = 0; c < channels; ++c) {
      std::copy(resized.pixels.begin(), resized.pixels.end(),
                batch.data().begin() + static_cast<std::ptrdiff_t>((n * channels + c) * plane));
    }
  }
  return batch;
}

Image input_grad_to_patch(std::span<const double> sample_grad, const Shape& sample_shape,
                          std::size_t height, std::size_t width) {
  const std::size_t channels = sample_shape[0], h = sample_shape[1], w = sample_shape[2];
  Image summed(h, w);
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t i = 0; i < h * w; ++i) summed.pixels[i] += sample_grad[c * h * w + i];
  }
  return resize_bilinear_adjoint(summed, height, width);
}

}  // namespace qpi
