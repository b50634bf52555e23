#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "qpi/image.hpp"
#include "qpi/nn.hpp"

namespace qpi {

enum class ConfidenceSource { softmax_max, vi_mean, vi_median, vi_std };

std::string_view to_string(ConfidenceSource source);
ConfidenceSource confidence_source_from_string(std::string_view name);

struct PredictionRecord {
  std::string id;
  std::vector<double> logits;  // variational records carry log of the summarised probabilities
  std::vector<double> probs;
  int predicted = 0;
  std::optional<int> true_label;
  double confidence = 0.0;
  ConfidenceSource source = ConfidenceSource::softmax_max;

  bool correct() const { return true_label && *true_label == predicted; }
};

// Per-sample statistics over stochastic passes (population std).
struct VariationalSummary {
  std::vector<double> mean;
  std::vector<double> median;
  std::vector<double> stddev;
  std::size_t passes = 0;
};

// Lowest index wins ties.
int argmax(std::span<const double> values);

// Eval-mode logits [N, K], computed in batches.
Tensor predict_logits(const nn::Model& model, std::span<const Image> patches, std::size_t batch_size = 64);

// Records from raw logits: probs = softmax(logits), confidence = max prob.
std::vector<PredictionRecord> records_from_logits(const Tensor& logits, std::span<const std::string> ids,
                                                  std::span<const int> labels);

std::vector<PredictionRecord> predict_frequentist(const nn::Model& model, std::span<const Image> patches,
                                                  std::span<const std::string> ids,
                                                  std::span<const int> labels = {});

struct VariationalOptions {
  std::size_t passes = 100;
  std::uint64_t seed = 0;
  // Summary used for the predicted label: vi_mean or vi_median.
  ConfidenceSource predict_by = ConfidenceSource::vi_mean;
  std::size_t batch_size = 64;
};

struct VariationalResult {
  std::vector<VariationalSummary> summaries;
  std::vector<PredictionRecord> mean_records;
  std::vector<PredictionRecord> median_records;
  std::vector<PredictionRecord> std_records;

  const std::vector<PredictionRecord>& records(ConfidenceSource source) const;
};

// Summarises pass probabilities; pass_probs[p] is [N, K] for pass p.
std::vector<VariationalSummary> summarize_passes(std::span<const Tensor> pass_probs);

// Builds a record from a summary. vi_mean / vi_median take label and
// confidence from that statistic; vi_std predicts with predict_by and scores
// confidence as clamp(1 - 2 * std of the winning class, 0, 1).
PredictionRecord record_from_summary(const VariationalSummary& summary, ConfidenceSource source,
                                     ConfidenceSource predict_by, std::string id,
                                     std::optional<int> true_label);

// MC-dropout inference. Pass p uses seed derive_seed(options.seed, {p}); the
// dropout-free prefix of the network is evaluated once and reused.
VariationalResult predict_variational(const nn::Model& model, std::span<const Image> patches,
                                      std::span<const std::string> ids, std::span<const int> labels,
                                      const VariationalOptions& options);

}  // namespace qpi
