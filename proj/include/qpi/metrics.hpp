#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "qpi/inference.hpp"

namespace qpi {

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// Single-class counts; an empty denominator yields 0.
PrecisionRecall precision_recall(std::size_t true_pos, std::size_t false_pos, std::size_t false_neg);

struct ClassificationMetrics {
  double precision = 0.0;  // macro average over classes
  double recall = 0.0;     // macro average over classes
  double f1 = 0.0;         // harmonic mean of the macro precision and recall
  double accuracy = 0.0;
  std::size_t classes_used = 0;
};

// Classes absent from both truth and predictions are left out of the macro
// mean (with a warning). Records must carry true labels.
ClassificationMetrics classification_metrics(std::span<const PredictionRecord> records, std::size_t classes);

struct MetricSummary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation across runs (0 for one run)
};

MetricSummary summarize(std::span<const double> values);

}  // namespace qpi
