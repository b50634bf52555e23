#include "qpi/models.hpp"

#include "qpi/error.hpp"

namespace qpi::models {

using nn::LayerSpec;

std::size_t default_input_extent(const std::string& name) {
  if (name == "lenet5") return 32;
  if (name == "alexnet_mini") return 59;
  throw ConfigError("unknown architecture '" + name + "' (expected lenet5 or alexnet_mini)");
}

std::size_t default_channels(const std::string& name) {
  if (name == "lenet5") return 1;
  if (name == "alexnet_mini") return 3;
  throw ConfigError("unknown architecture '" + name + "' (expected lenet5 or alexnet_mini)");
}

ArchitectureConfig resolve(ArchitectureConfig config) {
  if (config.input_extent == 0) config.input_extent = default_input_extent(config.name);
  if (config.channels == 0) config.channels = default_channels(config.name);
  if (config.classes < 2) throw ConfigError("architecture needs at least 2 classes");
  if (!(config.dropout >= 0.0 && config.dropout < 1.0)) {
    throw ConfigError("dropout rate must lie in [0,1)");
  }
  if (config.name == "alexnet_mini" && (config.conv_widths.size() != 5 || config.fc_widths.size() != 2)) {
    throw ConfigError("alexnet_mini needs 5 conv widths and 2 fc widths");
  }
  return config;
}

nn::Model build(const ArchitectureConfig& raw) {
  const ArchitectureConfig c = resolve(raw);
  const double p = c.dropout;
  std::vector<LayerSpec> layers;
  if (c.name == "lenet5") {
    // C5 is a 5x5 conv collapsing the 5x5 map to 1x1, so it acts as the first
    // fully-connected stage and gets a dropout layer like the other fc stages.
    layers = {LayerSpec::conv2d(6, 5),   LayerSpec::relu(),          LayerSpec::maxpool2d(2, 2),
              LayerSpec::conv2d(16, 5),  LayerSpec::relu(),          LayerSpec::maxpool2d(2, 2),
              LayerSpec::conv2d(120, 5), LayerSpec::relu(),          LayerSpec::flatten(),
              LayerSpec::dropout(p),     LayerSpec::fullyconnected(84), LayerSpec::relu(),
              LayerSpec::dropout(p),     LayerSpec::fullyconnected(c.classes)};
  } else {
    const auto& w = c.conv_widths;
    layers = {LayerSpec::conv2d(w[0], 5),       LayerSpec::relu(), LayerSpec::maxpool2d(3, 2),
              LayerSpec::conv2d(w[1], 5, 1, 2), LayerSpec::relu(), LayerSpec::maxpool2d(3, 2),
              LayerSpec::conv2d(w[2], 3, 1, 1), LayerSpec::relu(),
              LayerSpec::conv2d(w[3], 3, 1, 1), LayerSpec::relu(),
              LayerSpec::conv2d(w[4], 3, 1, 1), LayerSpec::relu(), LayerSpec::maxpool2d(3, 2),
              LayerSpec::flatten(),
              LayerSpec::fullyconnected(c.fc_widths[0]), LayerSpec::relu(), LayerSpec::dropout(p),
              LayerSpec::fullyconnected(c.fc_widths[1]), LayerSpec::relu(), LayerSpec::dropout(p),
              LayerSpec::fullyconnected(c.classes)};
  }
  return nn::Model({c.channels, c.input_extent, c.input_extent}, std::move(layers));
}

std::size_t last_conv_layer(const nn::Model& model) {
  for (std::size_t i = model.layer_count(); i-- > 0;) {
    if (model.layer(i).kind == nn::LayerKind::conv2d) return i;
  }
  return model.layer_count();
}

Image resize_patch(const Image& patch, std::size_t target) {
  if (target < 1) throw DomainError("resize target must be >= 1");
  return resize_bilinear(patch, target, target);
}

Tensor prepare_batch(const nn::Model& model, std::span<const Image> patches) {
  return images_to_batch(patches, model.input_shape());
}

}  // namespace qpi::models
