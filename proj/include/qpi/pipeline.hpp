#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <iosfwd>
#include <map>
#include <nlohmann/json.hpp>
#include <span>
#include <string>
#include <vector>

#include "qpi/aggregate.hpp"
#include "qpi/calibration.hpp"
#include "qpi/config.hpp"
#include "qpi/explain.hpp"
#include "qpi/inference.hpp"
#include "qpi/metrics.hpp"
#include "qpi/nn.hpp"
#include "qpi/stats.hpp"
#include "qpi/synthdata.hpp"

// Experiment steps shared by the command-line driver and the acceptance suite.
namespace qpi::pipeline {

using config::RunConfig;

// Independent RNG streams derived from the run seed.
enum class Stream : std::uint64_t { corpus = 1, split, init, train, vi, explain, tsne, kmeans, ood, noise, folds };

// Stable 64-bit key of a name for seed derivation (FNV-1a).
std::uint64_t name_key(const std::string& name);

std::uint64_t stream_seed(const RunConfig& config, Stream stream, std::initializer_list<std::uint64_t> coords = {});

struct Subset {
  std::vector<Image> patches;  // normalized
  std::vector<int> labels;
  std::vector<std::string> ids;
  std::size_t size() const { return patches.size(); }
};

struct Dataset {
  std::vector<std::string> ids;
  std::vector<int> labels;
  std::vector<Image> raw;      // phase in rad
  std::vector<Image> patches;  // normalized to [0, 1]

  std::size_t size() const { return ids.size(); }
  Subset take(std::span<const std::size_t> indices) const;
};

Dataset make_dataset(const RunConfig& config);
Dataset dataset_from_samples(std::span<const synth::Sample> samples);
// Stratified train/validation/test split of one evaluation run.
synth::Split split_for_run(const RunConfig& config, std::span<const int> labels, std::size_t run);

struct Trained {
  nn::Model model;
  TrainLog log;
};

// Fresh initialization and training; seeds derive from (run, architecture).
Trained train_model(const RunConfig& config, const models::ArchitectureConfig& arch, const Subset& train,
                    std::size_t run);
// Untrained model of the architecture (built, not initialized).
nn::Model build_model(const models::ArchitectureConfig& arch);

struct CalibrationFit {
  calibration::TemperatureFit temperature;
  calibration::AffineMap vi_std;
};

CalibrationFit fit_calibration(const RunConfig& config, const nn::Model& model, const Subset& validation,
                               std::size_t run);
nlohmann::json calibration_to_json(const CalibrationFit& fit);
CalibrationFit calibration_from_json(const nlohmann::json& j);

// Prediction records per confidence source (see config::confidence_sources).
using SourceRecords = std::map<std::string, std::vector<PredictionRecord>>;

SourceRecords predict_all(const RunConfig& config, const nn::Model& model, const Subset& subset,
                          const CalibrationFit& fit, std::uint64_t vi_seed);

// Reads or writes id,label,pred,conf,source,p0..p{K-1}. An unlabeled record
// leaves the label field empty.
void write_predictions_csv(std::ostream& out, std::span<const PredictionRecord> records);
std::vector<PredictionRecord> read_predictions_csv(std::istream& in);

// One explanation of `patch` for class `target` with the configured method.
explain::ExplanationMap explain_patch(const config::ExplainSettings& settings, const nn::Model& model,
                                      const Image& patch, int target, std::uint64_t seed);

// Up to `limit` subset positions taken round-robin over the labels in subset
// order, so every class is represented whatever the subset ordering.
std::vector<std::size_t> explain_selection(std::span<const int> labels, std::size_t limit);

// Explains the explain_selection patches of the subset for the given target
// classes (one per subset patch). Subset position i uses seed
// derive_seed(seed, {i}).
std::vector<explain::ExplanationMap> explain_subset(const config::ExplainSettings& settings,
                                                    const nn::Model& model, const std::string& model_name,
                                                    const Subset& subset, std::span<const int> targets,
                                                    std::uint64_t seed);

struct AggregateResult {
  aggregate::MetaGrid grid;
  aggregate::Embedding embedding;
  aggregate::KMeansResult clusters;
  aggregate::ClusterComposition composition;  // clusters against true labels
};

// Confidence grid, t-SNE of the flattened maps and k-means on the embedding.
AggregateResult aggregate_maps(const RunConfig& config, std::span<const explain::ExplanationMap> maps,
                               std::span<const PredictionRecord> records, std::size_t run);

void write_aggregate(const std::filesystem::path& dir, const AggregateResult& result,
                     std::span<const explain::ExplanationMap> maps, std::span<const PredictionRecord> records,
                     std::span<const std::string> class_names);

struct OodResult {
  std::string source;
  std::map<std::string, std::vector<stats::Group>> groups;  // per confidence source, leukocytes first
  stats::PosthocResult posthoc;                              // on the configured source
  std::vector<stats::GroupSummary> summaries;                // on the configured source
};

// Confidence of the in-distribution test patches against every synthetic
// out-of-distribution set.
OodResult run_ood(const RunConfig& config, const nn::Model& model, const Subset& test, const CalibrationFit& fit,
                  std::size_t run);
void write_ood(const std::filesystem::path& dir, const OodResult& result);

struct MislabelResult {
  std::vector<std::size_t> flipped;           // dataset indices with planted flips
  std::vector<int> noisy_labels;              // labels after planting
  std::vector<PredictionRecord> records;      // cross-fitted, against noisy labels
  std::vector<PredictionRecord> suspects;     // find_mislabeled output
  double recall = 0.0;                        // planted flips found among suspects
  double precision = 0.0;                     // suspects that are planted flips
};

// Plants label flips, then scores every sample with a model trained on the
// other folds.
MislabelResult run_mislabels(const RunConfig& config, const Dataset& data, std::size_t run);
void write_mislabels(const std::filesystem::path& dir, const MislabelResult& result, const Dataset& data);

// Full experiment sequence over config.repeat runs into out_dir.
void run_repro(const RunConfig& config, const std::filesystem::path& out_dir);

std::vector<std::string> class_names(const RunConfig& config);

}  // namespace qpi::pipeline
