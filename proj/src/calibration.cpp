#include "qpi/calibration.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <nlohmann/json.hpp>
#include <ostream>
#include <set>

#include "qpi/error.hpp"

namespace qpi::calibration {
namespace {

double upper_edge(std::size_t m, std::size_t bin_count) {
  return static_cast<double>(m + 1) / static_cast<double>(bin_count);
}

ReliabilityBins finish(std::vector<double>& conf_sum, std::vector<double>& correct_sum,
                       std::vector<std::size_t>& counts) {
  ReliabilityBins out;
  out.bins.resize(counts.size());
  for (std::size_t m = 0; m < counts.size(); ++m) {
    out.bins[m].count = counts[m];
    out.total += counts[m];
    if (counts[m]) {
      out.bins[m].accuracy = correct_sum[m] / static_cast<double>(counts[m]);
      out.bins[m].confidence = conf_sum[m] / static_cast<double>(counts[m]);
    }
  }
  return out;
}

double log_sum_exp_scaled(std::span<const double> z, double inv_t) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : z) m = std::max(m, v * inv_t);
  double s = 0.0;
  for (double v : z) s += std::exp(v * inv_t - m);
  return m + std::log(s);
}

}  // namespace

std::size_t bin_index(double confidence, std::size_t bin_count) {
  if (!(confidence >= 0.0 && confidence <= 1.0)) {
    throw DomainError("confidence " + std::to_string(confidence) + " outside [0,1]");
  }
  if (bin_count == 0) throw ConfigError("bin count must be >= 1");
  auto idx = static_cast<std::size_t>(std::max(0.0, std::ceil(confidence * static_cast<double>(bin_count)) - 1.0));
  idx = std::min(idx, bin_count - 1);
  // Settle rounding at the edges against the exact edge values m / M.
  while (idx > 0 && confidence <= upper_edge(idx - 1, bin_count)) --idx;
  while (idx + 1 < bin_count && confidence > upper_edge(idx, bin_count)) ++idx;
  return idx;
}

ReliabilityBins bin_confidences(std::span<const double> confidences, std::span<const char> correct,
                                std::size_t bin_count) {
  if (confidences.size() != correct.size()) throw DimensionError("bin_confidences: size mismatch");
  std::vector<double> conf_sum(bin_count, 0.0), correct_sum(bin_count, 0.0);
  std::vector<std::size_t> counts(bin_count, 0);
  for (std::size_t i = 0; i < confidences.size(); ++i) {
    const std::size_t m = bin_index(confidences[i], bin_count);
    ++counts[m];
    conf_sum[m] += confidences[i];
    correct_sum[m] += correct[i] ? 1.0 : 0.0;
  }
  return finish(conf_sum, correct_sum, counts);
}

ReliabilityBins bin_predictions(std::span<const PredictionRecord> records, std::size_t bin_count) {
  std::vector<double> conf;
  std::vector<char> correct;
  for (const auto& r : records) {
    if (!r.true_label) throw DataError("bin_predictions: record '" + r.id + "' has no true label");
    conf.push_back(r.confidence);
    correct.push_back(r.correct() ? 1 : 0);
  }
  return bin_confidences(conf, correct, bin_count);
}

double ece(const ReliabilityBins& bins) {
  if (bins.total == 0) throw DomainError("ECE undefined for an empty prediction set");
  double sum = 0.0;
  for (const auto& b : bins.bins) {
    if (b.count == 0) continue;
    sum += static_cast<double>(b.count) / static_cast<double>(bins.total) * std::abs(b.accuracy - b.confidence);
  }
  return sum;
}

double mce(const ReliabilityBins& bins) {
  if (bins.total == 0) throw DomainError("MCE undefined for an empty prediction set");
  double worst = 0.0;
  for (const auto& b : bins.bins) {
    if (b.count) worst = std::max(worst, std::abs(b.accuracy - b.confidence));
  }
  return worst;
}

std::vector<double> temperature_softmax(std::span<const double> logits, double temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw DomainError("temperature must be positive, got " + std::to_string(temperature));
  }
  const double inv_t = 1.0 / temperature;
  const double lse = log_sum_exp_scaled(logits, inv_t);
  std::vector<double> out(logits.size());
  for (std::size_t k = 0; k < logits.size(); ++k) out[k] = std::exp(logits[k] * inv_t - lse);
  return out;
}

double temperature_nll(std::span<const std::vector<double>> logits, std::span<const int> labels,
                       double temperature) {
  const double inv_t = 1.0 / temperature;
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    total += log_sum_exp_scaled(logits[i], inv_t) - logits[i][static_cast<std::size_t>(labels[i])] * inv_t;
  }
  return total / static_cast<double>(logits.size());
}

TemperatureFit fit_temperature(std::span<const std::vector<double>> logits, std::span<const int> labels) {
  if (logits.size() != labels.size() || logits.empty()) {
    throw DataError("fit_temperature: need matching, non-empty logits and labels");
  }
  if (std::set<int>(labels.begin(), labels.end()).size() < 2) {
    throw DataError("fit_temperature: at least two classes must be represented");
  }
  TemperatureFit fit;
  auto objective = [&](double log_t) {
    ++fit.evaluations;
    const double v = temperature_nll(logits, labels, std::exp(log_t));
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = std::log(0.05), b = std::log(20.0);
  double c = b - inv_phi * (b - a), d = a + inv_phi * (b - a);
  double fc = objective(c), fd = objective(d);
  while (b - a > 1e-4) {
    if (fc <= fd) {
      b = d;
      d = c;
      fd = fc;
      c = b - inv_phi * (b - a);
      fc = objective(c);
    } else {
      a = c;
      c = d;
      fc = fd;
      d = a + inv_phi * (b - a);
      fd = objective(d);
    }
  }
  const double log_t = 0.5 * (a + b);
  fit.temperature = std::exp(log_t);
  fit.nll_after = temperature_nll(logits, labels, fit.temperature);
  fit.nll_before = temperature_nll(logits, labels, 1.0);
  if (!std::isfinite(fit.nll_after)) throw NumericError("fit_temperature: NLL is not finite over the search range");
  return fit;
}

TemperatureFit fit_temperature(std::span<const PredictionRecord> records) {
  std::vector<std::vector<double>> logits;
  std::vector<int> labels;
  for (const auto& r : records) {
    if (!r.true_label) throw DataError("fit_temperature: record '" + r.id + "' has no true label");
    logits.push_back(r.logits);
    labels.push_back(*r.true_label);
  }
  return fit_temperature(logits, labels);
}

std::vector<PredictionRecord> apply_temperature(std::span<const PredictionRecord> records, double temperature) {
  std::vector<PredictionRecord> out(records.begin(), records.end());
  for (auto& r : out) {
    r.probs = temperature_softmax(r.logits, temperature);
    r.predicted = argmax(r.logits);
    r.confidence = r.probs[static_cast<std::size_t>(r.predicted)];
  }
  return out;
}

double AffineMap::apply(double confidence) const {
  return std::clamp(scale * confidence + offset, 0.0, 1.0);
}

AffineMap calibrate_vi_std(std::span<const PredictionRecord> records, std::size_t bin_count) {
  std::vector<double> conf;
  std::vector<char> correct;
  for (const auto& r : records) {
    if (!r.true_label) throw DataError("calibrate_vi_std: record '" + r.id + "' has no true label");
    conf.push_back(r.confidence);
    correct.push_back(r.correct() ? 1 : 0);
  }
  AffineMap best;
  best.ece_before = ece(bin_confidences(conf, correct, bin_count));
  double best_ece = std::numeric_limits<double>::infinity();
  double best_dist = std::numeric_limits<double>::infinity();
  std::vector<double> mapped(conf.size());
  // Integer-indexed grid so (1, 0) is represented exactly.
  for (int i = 10; i <= 40; ++i) {
    const double scale = i * 0.05;
    for (int j = -15; j <= 15; ++j) {
      const double offset = j * 0.02;
      const AffineMap candidate{scale, offset, 0.0, 0.0};
      for (std::size_t n = 0; n < conf.size(); ++n) mapped[n] = candidate.apply(conf[n]);
      const double e = ece(bin_confidences(mapped, correct, bin_count));
      const double dist = std::hypot(scale - 1.0, offset);
      if (e < best_ece - 1e-12 || (std::abs(e - best_ece) <= 1e-12 && dist < best_dist)) {
        best_ece = e;
        best_dist = dist;
        best.scale = scale;
        best.offset = offset;
      }
    }
  }
  best.ece_after = best_ece;
  return best;
}

std::vector<PredictionRecord> apply_affine(std::span<const PredictionRecord> records, const AffineMap& map) {
  std::vector<PredictionRecord> out(records.begin(), records.end());
  for (auto& r : out) r.confidence = map.apply(r.confidence);
  return out;
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw DomainError("quantile of an empty sample");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

BoxStats box_stats(std::vector<double> values) {
  BoxStats s;
  s.count = values.size();
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  s.q1 = quantile_sorted(values, 0.25);
  s.median = quantile_sorted(values, 0.5);
  s.q3 = quantile_sorted(values, 0.75);
  const double iqr = s.q3 - s.q1;
  const double lo_fence = s.q1 - 1.5 * iqr, hi_fence = s.q3 + 1.5 * iqr;
  s.lo = *std::find_if(values.begin(), values.end(), [&](double v) { return v >= lo_fence; });
  s.hi = *std::find_if(values.rbegin(), values.rend(), [&](double v) { return v <= hi_fence; });
  return s;
}

std::vector<BoxStats> reliability_export(std::span<const ReliabilityBins> runs) {
  if (runs.empty()) throw DataError("reliability_export needs at least one run");
  const std::size_t m = runs.front().bins.size();
  std::vector<BoxStats> rows;
  for (std::size_t b = 0; b < m; ++b) {
    std::vector<double> values;
    for (const auto& run : runs) {
      if (run.bins.size() != m) throw DimensionError("reliability_export: runs use different bin counts");
      if (run.bins[b].count) values.push_back(run.bins[b].accuracy);
    }
    rows.push_back(box_stats(std::move(values)));
  }
  return rows;
}

void write_reliability_csv(std::ostream& out, std::span<const BoxStats> rows) {
  out << "bin,lo,q1,med,q3,hi,count\n";
  const auto old_precision = out.precision(17);
  for (std::size_t b = 0; b < rows.size(); ++b) {
    const auto& r = rows[b];
    out << (b + 1) << ',';
    if (r.count) {
      out << r.lo << ',' << r.q1 << ',' << r.median << ',' << r.q3 << ',' << r.hi;
    } else {
      out << ",,,,";
    }
    out << ',' << r.count << '\n';
  }
  out.precision(old_precision);
}

CalibrationReport make_report(std::span<const PredictionRecord> records, std::string run_id, std::string source,
                              double temperature, std::size_t bin_count) {
  CalibrationReport r;
  r.run_id = std::move(run_id);
  r.source = std::move(source);
  r.bins = bin_predictions(records, bin_count);
  r.ece = ece(r.bins);
  r.mce = mce(r.bins);
  r.temperature = temperature;
  return r;
}

std::string report_json(const CalibrationReport& report) {
  nlohmann::ordered_json j;
  j["run_id"] = report.run_id;
  j["source"] = report.source;
  j["temperature"] = report.temperature;
  j["ece"] = report.ece;
  j["mce"] = report.mce;
  j["total"] = report.bins.total;
  auto& bins = j["bins"] = nlohmann::ordered_json::array();
  for (std::size_t m = 0; m < report.bins.bins.size(); ++m) {
    const auto& b = report.bins.bins[m];
    bins.push_back({{"bin", m + 1}, {"count", b.count}, {"accuracy", b.accuracy}, {"confidence", b.confidence}});
  }
  return j.dump(2);
}

}  // namespace qpi::calibration
