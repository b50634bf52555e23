#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "qpi/adam.hpp"
#include "qpi/image.hpp"
#include "qpi/nn.hpp"

namespace qpi {

struct TrainConfig {
  std::size_t epochs = 12;
  std::size_t batch_size = 32;
  nn::AdamConfig adam;
  std::uint64_t seed = 0;
};

struct TrainLog {
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
  std::size_t steps = 0;
  std::size_t clamped = 0;
};

// Minibatch Adam on softmax cross-entropy. Patches are resized to the model
// input per batch. Shuffling and dropout masks derive from config.seed.
TrainLog train_classifier(nn::Model& model, std::span<const Image> patches, std::span<const int> labels,
                          const TrainConfig& config);

}  // namespace qpi
