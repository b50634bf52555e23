#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qpi/image.hpp"

namespace qpi::synth {

// Shape and texture cues of one synthetic cell class. Phase is a spherical
// cap of height phase_height plus a membrane ring and interior granules.
struct SynthClassSpec {
  std::string name;
  double radius_mean = 12.0;  // px
  double radius_sd = 1.0;
  double texture_amplitude = 0.0;  // rad, granule peak
  std::size_t granules = 0;
  double ring_contrast = 0.0;  // rad
  double phase_height = 2.0;   // rad
  double phase_sd = 0.15;
  double nucleus_contrast = 0.0;  // rad, central lobe
};

// Monocyte, Lymphocyte, Neutrophil, Eosinophil (labels 0..3).
std::vector<SynthClassSpec> default_specs();

struct Sample {
  std::string id;
  int label = 0;
  Image phase;  // raw phase in rad, extent x extent
};

struct CorpusConfig {
  std::size_t per_class = 500;
  std::size_t extent = 50;
  double noise_sd = 0.02;
  std::uint64_t seed = 1;
};

// Balanced corpus ordered by class then index. Sample i of class k depends
// only on (seed, k, i).
std::vector<Sample> generate_corpus(std::span<const SynthClassSpec> specs, const CorpusConfig& config);

// Renders one cell centred at (cy, cx) into img (adds to existing values).
// Returns the drawn radius.
double render_cell(Image& img, const SynthClassSpec& spec, double cy, double cx, std::uint64_t seed);

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
  std::vector<std::size_t> test;
};

// Class-stratified shuffle split (default 70/20/10).
Split stratified_split(std::span<const int> labels, std::uint64_t seed, double train_fraction = 0.7,
                       double validation_fraction = 0.2);

struct PlantedCell {
  double row = 0.0;
  double col = 0.0;
  double radius = 0.0;
  int label = 0;
};

struct FrameSet {
  std::vector<Image> frames;
  std::vector<std::vector<PlantedCell>> cells;  // per frame
};

struct FrameConfig {
  std::size_t height = 382;
  std::size_t width = 512;
  std::size_t frames = 1;
  std::size_t cells_per_frame = 10;
  double background_level = 0.3;  // rad, static smooth background amplitude
  double noise_sd = 0.02;
  std::uint64_t seed = 1;
};

// Frames share one static background; cells are placed without overlap by
// rejection sampling (100 tries each, fewer cells with a warning).
FrameSet generate_frames(std::span<const SynthClassSpec> specs, const FrameConfig& config);

enum class OodKind { erythrocyte_like, defocused, aggregate, ruptured, digit_like, noise };

std::string_view to_string(OodKind kind);
OodKind ood_kind_from_string(std::string_view name);
std::vector<OodKind> all_ood_kinds();

// Raw phase patches. noise and digit_like are scaled so that their normalized
// values cover [0, 1].
std::vector<Image> generate_ood(OodKind kind, std::span<const SynthClassSpec> specs, std::size_t n,
                                std::uint64_t seed, std::size_t extent = 50);

// Real MNIST in IDX format (magic 0x00000803), gray levels mapped to phase so
// that normalization recovers level / 255.
std::vector<Image> read_idx_images(const std::filesystem::path& path, std::size_t limit = 0);

// Flips the labels of round(fraction * n) samples to a different class.
// Returns the flipped indices in ascending order.
std::vector<std::size_t> plant_label_noise(std::vector<int>& labels, std::size_t classes, double fraction,
                                           std::uint64_t seed);

// id,label,split rows.
void write_manifest(std::ostream& out, std::span<const Sample> samples, const Split& split);

}  // namespace qpi::synth
