#include "qpi/metrics.hpp"

#include <cmath>
#include <spdlog/spdlog.h>

#include "qpi/error.hpp"

namespace qpi {

PrecisionRecall precision_recall(std::size_t true_pos, std::size_t false_pos, std::size_t false_neg) {
  PrecisionRecall pr;
  const auto tp = static_cast<double>(true_pos);
  if (true_pos + false_pos) pr.precision = tp / static_cast<double>(true_pos + false_pos);
  if (true_pos + false_neg) pr.recall = tp / static_cast<double>(true_pos + false_neg);
  if (pr.precision + pr.recall > 0.0) pr.f1 = 2.0 * pr.precision * pr.recall / (pr.precision + pr.recall);
  return pr;
}

ClassificationMetrics classification_metrics(std::span<const PredictionRecord> records, std::size_t classes) {
  std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
  std::size_t correct = 0;
  for (const auto& r : records) {
    if (!r.true_label) throw DataError("metrics: record '" + r.id + "' has no true label");
    const auto truth = static_cast<std::size_t>(*r.true_label);
    const auto pred = static_cast<std::size_t>(r.predicted);
    if (truth >= classes || pred >= classes) throw DataError("metrics: label outside class range");
    if (truth == pred) {
      ++tp[truth];
      ++correct;
    } else {
      ++fp[pred];
      ++fn[truth];
    }
  }
  ClassificationMetrics m;
  for (std::size_t k = 0; k < classes; ++k) {
    if (tp[k] + fp[k] + fn[k] == 0) {
      spdlog::warn("metrics: class {} absent from truth and predictions, excluded from macro average", k);
      continue;
    }
    const auto pr = precision_recall(tp[k], fp[k], fn[k]);
    m.precision += pr.precision;
    m.recall += pr.recall;
    ++m.classes_used;
  }
  if (m.classes_used) {
    m.precision /= static_cast<double>(m.classes_used);
    m.recall /= static_cast<double>(m.classes_used);
  }
  if (m.precision + m.recall > 0.0) m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  if (!records.empty()) m.accuracy = static_cast<double>(correct) / static_cast<double>(records.size());
  return m;
}

MetricSummary summarize(std::span<const double> values) {
  MetricSummary s;
  if (values.empty()) return s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double sq = 0.0;
    for (double v : values) sq += (v - s.mean) * (v - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(values.size() - 1));
  }
  return s;
}

}  // namespace qpi
