#pragma once

#include <cstddef>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "qpi/inference.hpp"

namespace qpi::calibration {

struct BinStats {
  std::size_t count = 0;
  double accuracy = 0.0;    // 0 for empty bins
  double confidence = 0.0;  // 0 for empty bins
};

// M equal-width bins; bin m (1-based) covers ((m-1)/M, m/M], and a
// confidence of exactly 0 goes to bin 1.
struct ReliabilityBins {
  std::vector<BinStats> bins;
  std::size_t total = 0;
};

// 0-based bin index for a confidence in [0, 1].
std::size_t bin_index(double confidence, std::size_t bin_count);

ReliabilityBins bin_predictions(std::span<const PredictionRecord> records, std::size_t bin_count = 10);
ReliabilityBins bin_confidences(std::span<const double> confidences, std::span<const char> correct,
                                std::size_t bin_count = 10);

// Throw DomainError when no samples were binned.
double ece(const ReliabilityBins& bins);
double mce(const ReliabilityBins& bins);

// softmax(logits / T); DomainError unless T > 0.
std::vector<double> temperature_softmax(std::span<const double> logits, double temperature);

// Mean negative log-likelihood of softmax(logits / T).
double temperature_nll(std::span<const std::vector<double>> logits, std::span<const int> labels,
                       double temperature);

struct TemperatureFit {
  double temperature = 1.0;
  double nll_before = 0.0;  // at T = 1
  double nll_after = 0.0;
  std::size_t evaluations = 0;
};

// Golden-section search for the NLL-minimising T over log T in
// [ln 0.05, ln 20], stopping when the bracket is narrower than 1e-4.
TemperatureFit fit_temperature(std::span<const std::vector<double>> logits, std::span<const int> labels);
TemperatureFit fit_temperature(std::span<const PredictionRecord> records);

// Rescores records with softmax(logits / T); predicted labels never change.
std::vector<PredictionRecord> apply_temperature(std::span<const PredictionRecord> records, double temperature);

struct AffineMap {
  double scale = 1.0;
  double offset = 0.0;
  double ece_before = 0.0;
  double ece_after = 0.0;

  double apply(double confidence) const;
};

// Grid search over scale in [0.5, 2] (step 0.05) and offset in [-0.3, 0.3]
// (step 0.02) minimising ECE of clamp(scale * c + offset). Ties go to the
// point closest to the identity map.
AffineMap calibrate_vi_std(std::span<const PredictionRecord> records, std::size_t bin_count = 10);

std::vector<PredictionRecord> apply_affine(std::span<const PredictionRecord> records, const AffineMap& map);

struct BoxStats {
  double lo = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, hi = 0.0;
  std::size_t count = 0;  // replicates that populated the bin
};

// Linear-interpolation quantile (position q * (n - 1)) of sorted values.
double quantile_sorted(std::span<const double> sorted, double q);

// Tukey box: quartiles, whiskers at the most extreme values within 1.5 IQR.
BoxStats box_stats(std::vector<double> values);

// Per-bin box statistics of the relative frequency (bin accuracy) across runs.
// Bins that are empty in a run do not contribute that run's value.
std::vector<BoxStats> reliability_export(std::span<const ReliabilityBins> runs);

// CSV rows: bin,lo,q1,med,q3,hi,count (bin is 1-based; empty fields when count is 0).
void write_reliability_csv(std::ostream& out, std::span<const BoxStats> rows);

struct CalibrationReport {
  std::string run_id;
  std::string source;  // confidence source the report describes
  ReliabilityBins bins;
  double ece = 0.0;
  double mce = 0.0;
  double temperature = 1.0;
};

CalibrationReport make_report(std::span<const PredictionRecord> records, std::string run_id, std::string source,
                              double temperature, std::size_t bin_count = 10);

// JSON text of a report.
std::string report_json(const CalibrationReport& report);

}  // namespace qpi::calibration
