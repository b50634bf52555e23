#include "qpi/train.hpp"

#include <algorithm>
#include <numeric>

#include "qpi/error.hpp"
#include "qpi/models.hpp"
#include "qpi/rng.hpp"

namespace qpi {

TrainLog train_classifier(nn::Model& model, std::span<const Image> patches, std::span<const int> labels,
                          const TrainConfig& config) {
  if (patches.size() != labels.size()) throw DimensionError("train: patch/label count mismatch");
  if (config.batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  TrainLog log;
  if (patches.empty() || config.epochs == 0) return log;

  auto params = model.parameters();
  nn::AdamState adam = nn::make_adam_state(params, config.adam);
  std::vector<std::size_t> order(patches.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(config.seed, {0x5348u, epoch}));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<Image> batch_images;
      std::vector<int> batch_labels;
      for (std::size_t k = start; k < end; ++k) {
        batch_images.push_back(patches[order[k]]);
        batch_labels.push_back(labels[order[k]]);
      }
      const Tensor input = models::prepare_batch(model, batch_images);
      nn::Tape tape;
      const nn::ForwardOptions fwd{nn::Mode::train, derive_seed(config.seed, {0x4452u, epoch}), start};
      const Tensor logits = model.forward(input, fwd, tape);
      const auto ce = nn::cross_entropy(nn::softmax(logits), batch_labels);
      loss_sum += ce.loss;
      log.clamped += ce.clamped;
      ++batches;
      model.zero_grad();
      model.backward(tape, nn::cross_entropy_logit_grad(logits, batch_labels));
      nn::adam_step(adam, params);
      ++log.steps;
    }
    log.epoch_loss.push_back(loss_sum / static_cast<double>(batches));
  }
  return log;
}

}  // namespace qpi
