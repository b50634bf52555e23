#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "qpi/aggregate.hpp"
#include "qpi/explain.hpp"
#include "qpi/models.hpp"
#include "qpi/preprocess.hpp"
#include "qpi/synthdata.hpp"
#include "qpi/train.hpp"

namespace qpi::config {

struct CorpusSettings {
  std::size_t per_class = 500;
  std::size_t extent = 50;
  double noise_sd = 0.02;
  double train_fraction = 0.7;
  double validation_fraction = 0.2;
};

struct ExplainSettings {
  std::string model = "lenet5";
  // lime, occlusion, saliency, grad_cam, guided_backprop, guided_grad_cam
  std::string method = "lime";
  std::size_t limit = 200;  // test patches explained, taken round-robin over classes
  std::size_t occlusion_window = 6;
  std::size_t occlusion_stride = 1;
  explain::LimeConfig lime;
};

struct AggregateSettings {
  std::size_t bins = 6;
  // Confidence placing each map in the grid.
  std::string source = "softmax_temperature";
  aggregate::TsneConfig tsne;
  std::size_t clusters = 0;  // 0 selects the class count
};

struct OodSettings {
  std::string model = "lenet5";
  std::size_t per_kind = 200;
  // Confidence compared across groups.
  std::string source = "vi_std_calibrated";
  double alpha = 0.05;
};

struct MislabelSettings {
  std::string model = "lenet5";
  double fraction = 0.02;
  double threshold = 0.95;
  std::size_t folds = 3;
  std::string source = "softmax";
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::size_t repeat = 15;
  std::size_t classes = 4;
  CorpusSettings corpus;
  std::vector<models::ArchitectureConfig> architectures;  // defaults: lenet5 p=0.25, alexnet_mini p=0.5
  TrainConfig train;
  std::size_t passes = 100;
  std::size_t bins = 10;
  ExplainSettings explain;
  AggregateSettings aggregate;
  OodSettings ood;
  MislabelSettings mislabels;
  preprocess::PreprocessConfig preprocess;
  synth::FrameConfig frames{.frames = 20};  // the median background needs a moving sequence

  RunConfig();
  const models::ArchitectureConfig& architecture(const std::string& name) const;
};

// Confidence sources evaluated for every model, in report order.
const std::vector<std::string>& confidence_sources();

// Missing keys keep their defaults; unknown keys and invalid values throw
// ConfigError naming the offending key.
RunConfig from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunConfig& config);
RunConfig load(const std::filesystem::path& path);
void validate(const RunConfig& config);

}  // namespace qpi::config
