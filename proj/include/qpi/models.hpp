#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "qpi/image.hpp"
#include "qpi/nn.hpp"

namespace qpi::models {

// Defaults: lenet5 takes 1x32x32; alexnet_mini takes the grayscale patch
// replicated to 3 channels at 59x59, which puts its last conv block at 13x13.
struct ArchitectureConfig {
  std::string name = "lenet5";
  std::size_t input_extent = 0;  // 0 selects the architecture default
  std::size_t channels = 0;      // 0 selects the architecture default
  double dropout = 0.25;
  std::size_t classes = 4;
  // alexnet_mini conv widths (5 entries) and hidden fc widths (2 entries).
  std::vector<std::size_t> conv_widths = {8, 16, 24, 24, 16};
  std::vector<std::size_t> fc_widths = {128, 64};
};

std::size_t default_input_extent(const std::string& name);
std::size_t default_channels(const std::string& name);

// Resolves defaults and validates; throws ConfigError.
ArchitectureConfig resolve(ArchitectureConfig config);

// Layer stack for the architecture, dropout after every hidden
// fully-connected stage. Parameters are zero until initialize() is called.
nn::Model build(const ArchitectureConfig& config);

// Index of the last conv2d layer, or layer_count() if there is none.
std::size_t last_conv_layer(const nn::Model& model);

// Bilinear resize of a patch to target x target.
Image resize_patch(const Image& patch, std::size_t target);

// Resizes and channel-replicates patches to the model's declared input.
Tensor prepare_batch(const nn::Model& model, std::span<const Image> patches);

}  // namespace qpi::models
