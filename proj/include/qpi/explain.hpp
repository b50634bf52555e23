#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "qpi/image.hpp"
#include "qpi/nn.hpp"
#include "qpi/slic.hpp"

namespace qpi::explain {

// Signed per-pixel attribution on the source patch grid. Positive values
// support the explained class.
struct ExplanationMap {
  Image values;
  std::string method;
  std::string model;
  std::string sample_id;
  int target = 0;
};

// Scores a batch of patches for the explained class, one value per patch.
using ScoreFn = std::function<std::vector<double>(std::span<const Image>)>;

// Softmax probability of `target` from eval-mode forwards.
ScoreFn model_probability(const nn::Model& model, int target, std::size_t batch_size = 64);

// Occluder of window x window filled with the patch mean, slid with the given
// stride. Each pixel gets the mean of (base - occluded) over the windows that
// cover it (0 where none does). ConfigError unless 1 <= window <= extent and
// stride >= 1.
ExplanationMap occlusion(const ScoreFn& score, const Image& patch, std::size_t window = 6, std::size_t stride = 1);

// d(logit_target)/d(patch) through the resize to the model input, channel-summed.
ExplanationMap saliency(const nn::Model& model, const Image& patch, int target);

// Grad-CAM on the rectified output of the last conv layer, upsampled
// bilinearly to the patch extent. CapabilityError when the model has no conv
// layer or its last conv map is 1x1.
ExplanationMap grad_cam(const nn::Model& model, const Image& patch, int target);

// Guided backpropagation to the patch; with combine_with_cam the map is
// multiplied elementwise by the Grad-CAM map.
ExplanationMap guided_backprop(const nn::Model& model, const Image& patch, int target, bool combine_with_cam);

struct LimeConfig {
  std::vector<SlicParams> segmenters = {{15, 10.0, 3.0}, {25, 10.0, 2.5}, {35, 25.0, 3.0}, {50, 15.0, 5.0}};
  std::size_t samples = 1000;
  double kernel_width = 0.25;
  double ridge = 1.0;
};

// Weighted ridge surrogate for one segmentation.
struct LimeSurrogate {
  Segmentation segmentation;
  std::vector<double> weights;  // one per segment
  double intercept = 0.0;
};

struct LimeResult {
  ExplanationMap map;  // mean of the painted surrogate maps
  std::vector<LimeSurrogate> surrogates;
};

// Multi-segmentation LIME. Per segmenter s, sample 0 keeps every segment and
// the rest switch each segment on with probability 1/2 (RNG stream
// derive_seed(seed, {s})); switched-off segments take the patch mean. Weights
// exp(-D^2 / width^2) use the cosine distance D of the on/off vector from the
// all-on vector. ConfigError when the sample count does not exceed the
// segment count of some segmentation.
LimeResult lime(const ScoreFn& score, const Image& patch, const LimeConfig& config, std::uint64_t seed);

// Solves min sum_i w_i (y_i - b - x_i . beta)^2 + lambda |beta|^2 with an
// unpenalised intercept b. Rows of x are samples. Returns {beta..., b}.
std::vector<double> weighted_ridge(std::span<const std::vector<double>> x, std::span<const double> y,
                                   std::span<const double> weights, double lambda);

}  // namespace qpi::explain
