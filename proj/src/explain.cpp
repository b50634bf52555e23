#include "qpi/explain.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <optional>

#include "qpi/error.hpp"
#include "qpi/inference.hpp"
#include "qpi/models.hpp"
#include "qpi/rng.hpp"

namespace qpi::explain {
namespace {

constexpr std::size_t kScoreChunk = 256;

ExplanationMap make_map(Image values, std::string method, int target) {
  ExplanationMap m;
  m.values = std::move(values);
  m.method = std::move(method);
  m.target = target;
  return m;
}

void check_target(const nn::Model& model, int target) {
  if (target < 0 || static_cast<std::size_t>(target) >= model.output_shape().at(0)) {
    throw ConfigError("explained class " + std::to_string(target) + " is outside the model's outputs");
  }
}

// Eval forward of one patch with the tape, plus the one-hot seed gradient on
// the target logit.
struct Traced {
  nn::Tape tape;
  Tensor seed;
};

Traced trace(const nn::Model& model, const Image& patch, int target) {
  check_target(model, target);
  Traced t;
  const std::vector<Image> one{patch};
  const Tensor logits = model.forward(images_to_batch(one, model.input_shape()), {}, t.tape);
  t.seed = Tensor(logits.shape());
  t.seed[static_cast<std::size_t>(target)] = 1.0;
  return t;
}

// Scores images in fixed-size chunks so memory stays bounded.
std::vector<double> score_all(const ScoreFn& score, std::span<const Image> images) {
  std::vector<double> out;
  out.reserve(images.size());
  for (std::size_t start = 0; start < images.size(); start += kScoreChunk) {
    const auto chunk = images.subspan(start, std::min(kScoreChunk, images.size() - start));
    const auto s = score(chunk);
    if (s.size() != chunk.size()) throw DimensionError("score function returned the wrong number of values");
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

}  // namespace

ScoreFn model_probability(const nn::Model& model, int target, std::size_t batch_size) {
  check_target(model, target);
  return [&model, target, batch_size](std::span<const Image> images) {
    const Tensor probs = nn::softmax(predict_logits(model, images, batch_size));
    const std::size_t k = probs.dim(1);
    std::vector<double> out(images.size());
    for (std::size_t i = 0; i < images.size(); ++i) out[i] = probs[i * k + static_cast<std::size_t>(target)];
    return out;
  };
}

ExplanationMap occlusion(const ScoreFn& score, const Image& patch, std::size_t window, std::size_t stride) {
  if (window < 1 || window > std::min(patch.height, patch.width)) {
    throw ConfigError("occlusion window must lie in [1, " + std::to_string(std::min(patch.height, patch.width)) +
                      "]");
  }
  if (stride < 1) throw ConfigError("occlusion stride must be >= 1");
  const double fill = patch.mean();
  std::vector<std::pair<std::size_t, std::size_t>> corners;
  for (std::size_t r = 0; r + window <= patch.height; r += stride)
    for (std::size_t c = 0; c + window <= patch.width; c += stride) corners.emplace_back(r, c);

  std::vector<Image> images{patch};
  for (auto [r0, c0] : corners) {
    Image occluded = patch;
    for (std::size_t r = r0; r < r0 + window; ++r)
      for (std::size_t c = c0; c < c0 + window; ++c) occluded.at(r, c) = fill;
    images.push_back(std::move(occluded));
  }
  const auto scores = score_all(score, images);

  Image sum(patch.height, patch.width), cover(patch.height, patch.width);
  for (std::size_t k = 0; k < corners.size(); ++k) {
    const double drop = scores[0] - scores[k + 1];
    const auto [r0, c0] = corners[k];
    for (std::size_t r = r0; r < r0 + window; ++r) {
      for (std::size_t c = c0; c < c0 + window; ++c) {
        sum.at(r, c) += drop;
        cover.at(r, c) += 1.0;
      }
    }
  }
  for (std::size_t i = 0; i < sum.size(); ++i) {
    if (cover.pixels[i] > 0.0) sum.pixels[i] /= cover.pixels[i];
  }
  return make_map(std::move(sum), "occlusion", -1);
}

ExplanationMap saliency(const nn::Model& model, const Image& patch, int target) {
  const Traced t = trace(model, patch, target);
  const Tensor g = model.backward_input(t.tape, t.seed);
  return make_map(input_grad_to_patch(g.values(), model.input_shape(), patch.height, patch.width), "saliency",
                  target);
}

ExplanationMap grad_cam(const nn::Model& model, const Image& patch, int target) {
  const std::size_t conv = models::last_conv_layer(model);
  if (conv == model.layer_count()) throw CapabilityError("Grad-CAM needs a convolutional layer");
  // Use the rectified map when the conv is followed by a ReLU.
  std::size_t layer = conv;
  if (conv + 1 < model.layer_count() && model.layer(conv + 1).kind == nn::LayerKind::relu) layer = conv + 1;
  const Shape& shape = model.layer_output_shape(layer);
  const std::size_t channels = shape[0], h = shape[1], w = shape[2];
  if (h * w <= 1) {
    throw CapabilityError("Grad-CAM needs a spatial last conv map; this model's is " + shape_string(shape));
  }

  const Traced t = trace(model, patch, target);
  std::vector<Tensor> grads;
  model.backward_input(t.tape, t.seed, {false, &grads});
  const Tensor& act = layer + 1 < model.layer_count() ? t.tape.records[layer + 1].input : t.tape.output;
  const Tensor& grad = grads[layer];

  Image cam(h, w);
  for (std::size_t k = 0; k < channels; ++k) {
    double alpha = 0.0;
    for (std::size_t p = 0; p < h * w; ++p) alpha += grad[k * h * w + p];
    alpha /= static_cast<double>(h * w);
    for (std::size_t p = 0; p < h * w; ++p) cam.pixels[p] += alpha * act[k * h * w + p];
  }
  for (auto& v : cam.pixels) v = std::max(v, 0.0);
  return make_map(resize_bilinear(cam, patch.height, patch.width), "grad_cam", target);
}

ExplanationMap guided_backprop(const nn::Model& model, const Image& patch, int target, bool combine_with_cam) {
  std::optional<Image> cam;
  if (combine_with_cam) cam = grad_cam(model, patch, target).values;
  const Traced t = trace(model, patch, target);
  const Tensor g = model.backward_input(t.tape, t.seed, {true, nullptr});
  Image map = input_grad_to_patch(g.values(), model.input_shape(), patch.height, patch.width);
  if (cam) {
    for (std::size_t i = 0; i < map.size(); ++i) map.pixels[i] *= cam->pixels[i];
  }
  return make_map(std::move(map), combine_with_cam ? "guided_grad_cam" : "guided_backprop", target);
}

std::vector<double> weighted_ridge(std::span<const std::vector<double>> x, std::span<const double> y,
                                   std::span<const double> weights, double lambda) {
  if (x.empty() || x.size() != y.size() || x.size() != weights.size()) {
    throw DimensionError("weighted_ridge: sample counts differ");
  }
  const std::size_t d = x[0].size();
  // Normal equations over [features, 1].
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(d + 1), static_cast<Eigen::Index>(d + 1));
  Eigen::VectorXd b = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d + 1));
  Eigen::VectorXd row(static_cast<Eigen::Index>(d + 1));
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i].size() != d) throw DimensionError("weighted_ridge: ragged design matrix");
    for (std::size_t j = 0; j < d; ++j) row[static_cast<Eigen::Index>(j)] = x[i][j];
    row[static_cast<Eigen::Index>(d)] = 1.0;
    a.noalias() += weights[i] * row * row.transpose();
    b.noalias() += weights[i] * y[i] * row;
  }
  for (std::size_t j = 0; j < d; ++j) a(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(j)) += lambda;
  const Eigen::VectorXd sol = a.ldlt().solve(b);
  return {sol.data(), sol.data() + sol.size()};
}

LimeResult lime(const ScoreFn& score, const Image& patch, const LimeConfig& config, std::uint64_t seed) {
  if (config.segmenters.empty()) throw ConfigError("LIME needs at least one segmenter");
  if (!(config.kernel_width > 0.0)) throw ConfigError("LIME kernel width must be positive");
  if (!(config.ridge > 0.0)) throw ConfigError("LIME ridge penalty must be positive");
  const double fill = patch.mean();
  LimeResult result;
  Image total(patch.height, patch.width);

  for (std::size_t s = 0; s < config.segmenters.size(); ++s) {
    LimeSurrogate sur;
    sur.segmentation = slic(patch, config.segmenters[s]);
    const std::size_t segs = sur.segmentation.count;
    if (config.samples <= segs) {
      throw ConfigError("LIME sample count " + std::to_string(config.samples) + " must exceed the " +
                        std::to_string(segs) + " segments of segmenter " + std::to_string(s));
    }

    Rng rng(derive_seed(seed, {s}));
    std::vector<std::vector<double>> z(config.samples, std::vector<double>(segs, 1.0));
    for (std::size_t i = 1; i < config.samples; ++i)
      for (auto& v : z[i]) v = rng.bernoulli(0.5) ? 1.0 : 0.0;

    std::vector<double> y;
    y.reserve(config.samples);
    for (std::size_t start = 0; start < config.samples; start += kScoreChunk) {
      const std::size_t end = std::min(config.samples, start + kScoreChunk);
      std::vector<Image> images;
      for (std::size_t i = start; i < end; ++i) {
        Image img = patch;
        for (std::size_t p = 0; p < img.size(); ++p) {
          if (z[i][static_cast<std::size_t>(sur.segmentation.labels[p])] == 0.0) img.pixels[p] = fill;
        }
        images.push_back(std::move(img));
      }
      const auto part = score_all(score, images);
      y.insert(y.end(), part.begin(), part.end());
    }

    std::vector<double> kernel(config.samples);
    const double norm_all = std::sqrt(static_cast<double>(segs));
    for (std::size_t i = 0; i < config.samples; ++i) {
      double on = 0.0;
      for (double v : z[i]) on += v;
      const double distance = on > 0.0 ? 1.0 - on / (std::sqrt(on) * norm_all) : 1.0;
      kernel[i] = std::exp(-distance * distance / (config.kernel_width * config.kernel_width));
    }

    auto sol = weighted_ridge(z, y, kernel, config.ridge);
    sur.intercept = sol.back();
    sol.pop_back();
    sur.weights = std::move(sol);
    for (std::size_t p = 0; p < total.size(); ++p) {
      total.pixels[p] += sur.weights[static_cast<std::size_t>(sur.segmentation.labels[p])];
    }
    result.surrogates.push_back(std::move(sur));
  }
  for (auto& v : total.pixels) v /= static_cast<double>(config.segmenters.size());
  result.map = make_map(std::move(total), "lime", -1);
  return result;
}

}  // namespace qpi::explain
