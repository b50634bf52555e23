#include "qpi/inference.hpp"

#include <algorithm>
#include <cmath>
#include <spdlog/spdlog.h>

#include "qpi/error.hpp"
#include "qpi/models.hpp"
#include "qpi/parallel.hpp"
#include "qpi/rng.hpp"

namespace qpi {
namespace {

std::optional<int> label_at(std::span<const int> labels, std::size_t i) {
  if (labels.empty()) return std::nullopt;
  return labels[i];
}

std::vector<double> log_probs(std::span<const double> probs) {
  std::vector<double> out(probs.size());
  for (std::size_t k = 0; k < probs.size(); ++k) out[k] = std::log(std::max(probs[k], 1e-300));
  return out;
}

}  // namespace

std::string_view to_string(ConfidenceSource source) {
  switch (source) {
    case ConfidenceSource::softmax_max: return "softmax_max";
    case ConfidenceSource::vi_mean: return "vi_mean";
    case ConfidenceSource::vi_median: return "vi_median";
    case ConfidenceSource::vi_std: return "vi_std";
  }
  return "unknown";
}

ConfidenceSource confidence_source_from_string(std::string_view name) {
  for (auto s : {ConfidenceSource::softmax_max, ConfidenceSource::vi_mean, ConfidenceSource::vi_median,
                 ConfidenceSource::vi_std}) {
    if (to_string(s) == name) return s;
  }
  throw ConfigError("unknown confidence source '" + std::string(name) + "'");
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (values[k] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(k);
  }
  return best;
}

Tensor predict_logits(const nn::Model& model, std::span<const Image> patches, std::size_t batch_size) {
  const std::size_t k = model.output_shape().at(0);
  Tensor logits({patches.size(), k});
  const std::size_t chunks = (patches.size() + batch_size - 1) / batch_size;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t start = c * batch_size;
    const std::size_t end = std::min(patches.size(), start + batch_size);
    const Tensor input = models::prepare_batch(model, patches.subspan(start, end - start));
    const Tensor out = model.forward(input, {nn::Mode::eval, 0, start});
    std::copy(out.data().begin(), out.data().end(), logits.data().begin() + static_cast<std::ptrdiff_t>(start * k));
  });
  return logits;
}

std::vector<PredictionRecord> records_from_logits(const Tensor& logits, std::span<const std::string> ids,
                                                  std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != ids.size() || (!labels.empty() && labels.size() != ids.size())) {
    throw DimensionError("records_from_logits: logits " + shape_string(logits.shape()) + " vs " +
                         std::to_string(ids.size()) + " ids");
  }
  const Tensor probs = nn::softmax(logits);
  const std::size_t k = logits.dim(1);
  std::vector<PredictionRecord> out(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    auto& r = out[i];
    r.id = ids[i];
    r.logits.assign(logits.data().begin() + static_cast<std::ptrdiff_t>(i * k),
                    logits.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    r.probs.assign(probs.data().begin() + static_cast<std::ptrdiff_t>(i * k),
                   probs.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * k));
    r.predicted = argmax(r.probs);
    r.confidence = r.probs[static_cast<std::size_t>(r.predicted)];
    r.true_label = label_at(labels, i);
    r.source = ConfidenceSource::softmax_max;
  }
  return out;
}

std::vector<PredictionRecord> predict_frequentist(const nn::Model& model, std::span<const Image> patches,
                                                  std::span<const std::string> ids,
                                                  std::span<const int> labels) {
  return records_from_logits(predict_logits(model, patches), ids, labels);
}

const std::vector<PredictionRecord>& VariationalResult::records(ConfidenceSource source) const {
  switch (source) {
    case ConfidenceSource::vi_mean: return mean_records;
    case ConfidenceSource::vi_median: return median_records;
    case ConfidenceSource::vi_std: return std_records;
    case ConfidenceSource::softmax_max: break;
  }
  throw ConfigError("variational result has no softmax_max records");
}

std::vector<VariationalSummary> summarize_passes(std::span<const Tensor> pass_probs) {
  if (pass_probs.empty()) return {};
  const std::size_t n = pass_probs[0].dim(0), k = pass_probs[0].dim(1);
  const std::size_t passes = pass_probs.size();
  std::vector<VariationalSummary> out(n);
  std::vector<double> values(passes);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = out[i];
    s.passes = passes;
    s.mean.resize(k);
    s.median.resize(k);
    s.stddev.resize(k);
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t p = 0; p < passes; ++p) values[p] = pass_probs[p][i * k + c];
      std::sort(values.begin(), values.end());
      if (values.front() == values.back()) {
        s.mean[c] = s.median[c] = values.front();
        s.stddev[c] = 0.0;
        continue;
      }
      double sum = 0.0;
      for (double v : values) sum += v;
      const double mean = sum / static_cast<double>(passes);
      double sq = 0.0;
      for (double v : values) sq += (v - mean) * (v - mean);
      s.mean[c] = mean;
      s.stddev[c] = std::sqrt(sq / static_cast<double>(passes));
      s.median[c] = passes % 2 ? values[passes / 2] : 0.5 * (values[passes / 2 - 1] + values[passes / 2]);
    }
  }
  return out;
}

PredictionRecord record_from_summary(const VariationalSummary& summary, ConfidenceSource source,
                                     ConfidenceSource predict_by, std::string id,
                                     std::optional<int> true_label) {
  if (predict_by != ConfidenceSource::vi_mean && predict_by != ConfidenceSource::vi_median) {
    throw ConfigError("variational predictions use vi_mean or vi_median");
  }
  PredictionRecord r;
  r.id = std::move(id);
  r.true_label = true_label;
  r.source = source;
  const auto& basis = (source == ConfidenceSource::vi_median ||
                       (source == ConfidenceSource::vi_std && predict_by == ConfidenceSource::vi_median))
                          ? summary.median
                          : summary.mean;
  r.probs = basis;
  r.logits = log_probs(basis);
  r.predicted = argmax(basis);
  const auto winner = static_cast<std::size_t>(r.predicted);
  if (source == ConfidenceSource::vi_std) {
    r.confidence = std::clamp(1.0 - 2.0 * summary.stddev[winner], 0.0, 1.0);
  } else {
    r.confidence = std::clamp(basis[winner], 0.0, 1.0);
  }
  return r;
}

VariationalResult predict_variational(const nn::Model& model, std::span<const Image> patches,
                                      std::span<const std::string> ids, std::span<const int> labels,
                                      const VariationalOptions& options) {
  if (options.passes < 2) throw ConfigError("variational inference needs at least 2 passes");
  if (ids.size() != patches.size() || (!labels.empty() && labels.size() != patches.size())) {
    throw DimensionError("predict_variational: ids/labels do not match patches");
  }
  if (!model.has_active_dropout()) {
    spdlog::warn("variational inference on a model without active dropout is degenerate");
  }
  const std::size_t n = patches.size();
  const std::size_t k = model.output_shape().at(0);
  const std::size_t split = model.first_stochastic_layer();

  std::vector<Tensor> pass_probs(options.passes, Tensor({n, k}));
  const std::size_t chunks = (n + options.batch_size - 1) / options.batch_size;
  parallel_for(chunks, [&](std::size_t c) {
    const std::size_t start = c * options.batch_size;
    const std::size_t end = std::min(n, start + options.batch_size);
    const Tensor input = models::prepare_batch(model, patches.subspan(start, end - start));
    const Tensor prefix = model.forward_range(input, 0, split, {nn::Mode::eval, 0, start});
    for (std::size_t p = 0; p < options.passes; ++p) {
      const nn::ForwardOptions fwd{nn::Mode::mc_dropout, derive_seed(options.seed, {p}), start};
      const Tensor probs = nn::softmax(model.forward_range(prefix, split, model.layer_count(), fwd));
      std::copy(probs.data().begin(), probs.data().end(),
                pass_probs[p].data().begin() + static_cast<std::ptrdiff_t>(start * k));
    }
  });

  VariationalResult result;
  result.summaries = summarize_passes(pass_probs);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = label_at(labels, i);
    const auto& s = result.summaries[i];
    result.mean_records.push_back(record_from_summary(s, ConfidenceSource::vi_mean, options.predict_by, ids[i], label));
    result.median_records.push_back(record_from_summary(s, ConfidenceSource::vi_median, options.predict_by, ids[i], label));
    result.std_records.push_back(record_from_summary(s, ConfidenceSource::vi_std, options.predict_by, ids[i], label));
  }
  return result;
}

}  // namespace qpi
