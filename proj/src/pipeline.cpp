#include "qpi/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <unordered_map>

#include "qpi/error.hpp"
#include "qpi/models.hpp"
#include "qpi/parallel.hpp"
#include "qpi/preprocess.hpp"
#include "qpi/rng.hpp"
#include "qpi/train.hpp"

namespace qpi::pipeline {
namespace {

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(std::numeric_limits<double>::max_digits10);
  return out;
}

bool needs_calibration(const std::string& source) {
  return source == "softmax_temperature" || source == "vi_std_calibrated";
}

Trained train_seeded(const RunConfig& config, const models::ArchitectureConfig& arch, const Subset& train,
                     std::uint64_t init_seed, std::uint64_t train_seed) {
  Trained t{build_model(arch), {}};
  t.model.initialize(init_seed);
  TrainConfig tc = config.train;
  tc.seed = train_seed;
  t.log = train_classifier(t.model, train.patches, train.labels, tc);
  return t;
}

std::vector<double> confidences(std::span<const PredictionRecord> records) {
  std::vector<double> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(r.confidence);
  return out;
}

}  // namespace

std::uint64_t name_key(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t stream_seed(const RunConfig& config, Stream stream, std::initializer_list<std::uint64_t> coords) {
  std::uint64_t h = derive_seed(config.seed, {static_cast<std::uint64_t>(stream)});
  for (std::uint64_t c : coords) h = derive_seed(h, {c});
  return h;
}

std::vector<std::string> class_names(const RunConfig& config) {
  const auto specs = synth::default_specs();
  std::vector<std::string> names;
  for (std::size_t k = 0; k < config.classes; ++k)
    names.push_back(k < specs.size() ? specs[k].name : "class" + std::to_string(k));
  return names;
}

Subset Dataset::take(std::span<const std::size_t> indices) const {
  Subset s;
  for (std::size_t i : indices) {
    s.patches.push_back(patches.at(i));
    s.labels.push_back(labels.at(i));
    s.ids.push_back(ids.at(i));
  }
  return s;
}

Dataset dataset_from_samples(std::span<const synth::Sample> samples) {
  Dataset d;
  for (const auto& s : samples) {
    d.ids.push_back(s.id);
    d.labels.push_back(s.label);
    d.raw.push_back(s.phase);
    d.patches.push_back(preprocess::normalize(s.phase));
  }
  return d;
}

Dataset make_dataset(const RunConfig& config) {
  auto specs = synth::default_specs();
  if (config.classes > specs.size()) {
    throw ConfigError("the synthetic corpus provides " + std::to_string(specs.size()) + " classes, config asks for " +
                      std::to_string(config.classes));
  }
  specs.resize(config.classes);
  synth::CorpusConfig cc;
  cc.per_class = config.corpus.per_class;
  cc.extent = config.corpus.extent;
  cc.noise_sd = config.corpus.noise_sd;
  cc.seed = stream_seed(config, Stream::corpus);
  return dataset_from_samples(synth::generate_corpus(specs, cc));
}

synth::Split split_for_run(const RunConfig& config, std::span<const int> labels, std::size_t run) {
  return synth::stratified_split(labels, stream_seed(config, Stream::split, {run}), config.corpus.train_fraction,
                                 config.corpus.validation_fraction);
}

nn::Model build_model(const models::ArchitectureConfig& arch) { return models::build(arch); }

Trained train_model(const RunConfig& config, const models::ArchitectureConfig& arch, const Subset& train,
                    std::size_t run) {
  return train_seeded(config, arch, train, stream_seed(config, Stream::init, {run, name_key(arch.name)}),
                      stream_seed(config, Stream::train, {run, name_key(arch.name)}));
}

CalibrationFit fit_calibration(const RunConfig& config, const nn::Model& model, const Subset& validation,
                               std::size_t run) {
  if (validation.size() == 0) throw DataError("calibration needs a non-empty validation split");
  CalibrationFit fit;
  const auto freq = predict_frequentist(model, validation.patches, validation.ids, validation.labels);
  fit.temperature = calibration::fit_temperature(freq);
  VariationalOptions vo;
  vo.passes = config.passes;
  vo.seed = stream_seed(config, Stream::vi, {run, 0});
  const auto vr = predict_variational(model, validation.patches, validation.ids, validation.labels, vo);
  fit.vi_std = calibration::calibrate_vi_std(vr.std_records, config.bins);
  return fit;
}

nlohmann::json calibration_to_json(const CalibrationFit& fit) {
  return {{"temperature", fit.temperature.temperature},
          {"nll_before", fit.temperature.nll_before},
          {"nll_after", fit.temperature.nll_after},
          {"evaluations", fit.temperature.evaluations},
          {"vi_std",
           {{"scale", fit.vi_std.scale},
            {"offset", fit.vi_std.offset},
            {"ece_before", fit.vi_std.ece_before},
            {"ece_after", fit.vi_std.ece_after}}}};
}

CalibrationFit calibration_from_json(const nlohmann::json& j) {
  CalibrationFit fit;
  try {
    fit.temperature.temperature = j.at("temperature").get<double>();
    fit.temperature.nll_before = j.at("nll_before").get<double>();
    fit.temperature.nll_after = j.at("nll_after").get<double>();
    fit.temperature.evaluations = j.at("evaluations").get<std::size_t>();
    const auto& v = j.at("vi_std");
    fit.vi_std.scale = v.at("scale").get<double>();
    fit.vi_std.offset = v.at("offset").get<double>();
    fit.vi_std.ece_before = v.at("ece_before").get<double>();
    fit.vi_std.ece_after = v.at("ece_after").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed calibration record: ") + e.what());
  }
  return fit;
}

SourceRecords predict_all(const RunConfig& config, const nn::Model& model, const Subset& subset,
                          const CalibrationFit& fit, std::uint64_t vi_seed) {
  SourceRecords out;
  out["softmax"] = predict_frequentist(model, subset.patches, subset.ids, subset.labels);
  out["softmax_temperature"] = calibration::apply_temperature(out["softmax"], fit.temperature.temperature);
  VariationalOptions vo;
  vo.passes = config.passes;
  vo.seed = vi_seed;
  auto vr = predict_variational(model, subset.patches, subset.ids, subset.labels, vo);
  out["vi_std_calibrated"] = calibration::apply_affine(vr.std_records, fit.vi_std);
  out["vi_mean"] = std::move(vr.mean_records);
  out["vi_median"] = std::move(vr.median_records);
  out["vi_std"] = std::move(vr.std_records);
  return out;
}

void write_predictions_csv(std::ostream& out, std::span<const PredictionRecord> records) {
  const auto old = out.precision(std::numeric_limits<double>::max_digits10);
  const std::size_t k = records.empty() ? 0 : records[0].probs.size();
  out << "id,label,pred,conf,source";
  for (std::size_t c = 0; c < k; ++c) out << ",p" << c;
  out << '\n';
  for (const auto& r : records) {
    if (r.probs.size() != k) throw DimensionError("predictions differ in class count");
    out << r.id << ',';
    if (r.true_label) out << *r.true_label;
    out << ',' << r.predicted << ',' << r.confidence << ',' << to_string(r.source);
    for (double p : r.probs) out << ',' << p;
    out << '\n';
  }
  out.precision(old);
}

std::vector<PredictionRecord> read_predictions_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || line.rfind("id,label,pred,conf,source", 0) != 0) {
    throw DataError("predictions file lacks the id,label,pred,conf,source header");
  }
  std::vector<PredictionRecord> out;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() < 6) throw DataError("predictions row " + std::to_string(row) + " has too few fields");
    try {
      PredictionRecord r;
      r.id = f[0];
      if (!f[1].empty()) r.true_label = std::stoi(f[1]);
      r.predicted = std::stoi(f[2]);
      r.confidence = std::stod(f[3]);
      r.source = confidence_source_from_string(f[4]);
      for (std::size_t c = 5; c < f.size(); ++c) r.probs.push_back(std::stod(f[c]));
      out.push_back(std::move(r));
    } catch (const std::logic_error&) {
      throw DataError("predictions row " + std::to_string(row) + " is malformed");
    }
  }
  return out;
}

explain::ExplanationMap explain_patch(const config::ExplainSettings& settings, const nn::Model& model,
                                      const Image& patch, int target, std::uint64_t seed) {
  explain::ExplanationMap map;
  const std::string& m = settings.method;
  if (m == "lime") {
    map = explain::lime(explain::model_probability(model, target), patch, settings.lime, seed).map;
  } else if (m == "occlusion") {
    map = explain::occlusion(explain::model_probability(model, target), patch, settings.occlusion_window,
                             settings.occlusion_stride);
  } else if (m == "saliency") {
    map = explain::saliency(model, patch, target);
  } else if (m == "grad_cam") {
    map = explain::grad_cam(model, patch, target);
  } else if (m == "guided_backprop" || m == "guided_grad_cam") {
    map = explain::guided_backprop(model, patch, target, m == "guided_grad_cam");
  } else {
    throw ConfigError("unknown explanation method '" + m + "'");
  }
  map.target = target;
  return map;
}

std::vector<std::size_t> explain_selection(std::span<const int> labels, std::size_t limit) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);
  std::vector<std::size_t> out;
  for (std::size_t round = 0; out.size() < std::min(limit, labels.size()); ++round) {
    for (const auto& [label, members] : by_class) {
      if (round < members.size() && out.size() < limit) out.push_back(members[round]);
    }
  }
  return out;
}

std::vector<explain::ExplanationMap> explain_subset(const config::ExplainSettings& settings,
                                                    const nn::Model& model, const std::string& model_name,
                                                    const Subset& subset, std::span<const int> targets,
                                                    std::uint64_t seed) {
  if (targets.size() < subset.size()) throw DimensionError("explain: fewer targets than patches");
  const auto chosen = explain_selection(subset.labels, settings.limit);
  std::vector<explain::ExplanationMap> maps(chosen.size());
  parallel_for(chosen.size(), [&](std::size_t j) {
    const std::size_t i = chosen[j];
    maps[j] = explain_patch(settings, model, subset.patches[i], targets[i], derive_seed(seed, {i}));
    maps[j].model = model_name;
    maps[j].sample_id = subset.ids[i];
  });
  return maps;
}

AggregateResult aggregate_maps(const RunConfig& config, std::span<const explain::ExplanationMap> maps,
                               std::span<const PredictionRecord> records, std::size_t run) {
  if (maps.empty()) throw DataError("aggregate: no explanation maps");
  std::unordered_map<std::string, const PredictionRecord*> by_id;
  for (const auto& r : records) by_id[r.id] = &r;
  std::vector<PredictionRecord> matched;
  std::vector<int> truth;
  std::vector<std::vector<double>> flat;
  for (const auto& m : maps) {
    const auto it = by_id.find(m.sample_id);
    if (it == by_id.end()) throw DataError("aggregate: no prediction for explained sample '" + m.sample_id + "'");
    matched.push_back(*it->second);
    if (!it->second->true_label) throw DataError("aggregate: sample '" + m.sample_id + "' has no true label");
    truth.push_back(*it->second->true_label);
    flat.push_back(m.values.pixels);
  }

  AggregateResult res;
  res.grid = aggregate::aggregate_by_confidence(maps, matched, config.classes, config.aggregate.bins);
  aggregate::TsneConfig tc = config.aggregate.tsne;
  tc.seed = stream_seed(config, Stream::tsne, {run});
  res.embedding = aggregate::tsne(flat, tc);
  std::vector<std::vector<double>> pts;
  for (const auto& p : res.embedding.points) pts.push_back({p[0], p[1]});
  const std::size_t k = std::min(config.aggregate.clusters ? config.aggregate.clusters : config.classes, pts.size());
  res.clusters = aggregate::kmeans(pts, k, stream_seed(config, Stream::kmeans, {run}));
  res.composition = aggregate::cluster_composition(res.clusters.labels, truth, k, config.classes);
  return res;
}

void write_aggregate(const std::filesystem::path& dir, const AggregateResult& result,
                     std::span<const explain::ExplanationMap> maps, std::span<const PredictionRecord> records,
                     std::span<const std::string> names) {
  aggregate::write_grid(dir / "grid", result.grid, names);
  std::unordered_map<std::string, int> truth;
  for (const auto& r : records) truth[r.id] = r.true_label.value_or(-1);
  std::vector<std::string> ids;
  std::vector<int> classes;
  for (const auto& m : maps) {
    ids.push_back(m.sample_id);
    classes.push_back(truth.count(m.sample_id) ? truth[m.sample_id] : -1);
  }
  {
    auto out = open_out(dir / "embedding.csv");
    aggregate::write_embedding_csv(out, ids, result.embedding, result.clusters.labels, classes);
  }
  {
    auto out = open_out(dir / "composition.csv");
    aggregate::write_composition_csv(out, result.composition, names);
  }
  auto out = open_out(dir / "summary.json");
  out << nlohmann::json{{"samples", maps.size()},
                        {"perplexity", result.embedding.perplexity},
                        {"kl_after_exaggeration", result.embedding.kl_after_exaggeration},
                        {"kl_final", result.embedding.kl_final},
                        {"clusters", result.clusters.centers.size()},
                        {"inertia", result.clusters.inertia},
                        {"kmeans_iterations", result.clusters.iterations}}
             .dump(2)
      << '\n';
}

OodResult run_ood(const RunConfig& config, const nn::Model& model, const Subset& test, const CalibrationFit& fit,
                  std::size_t run) {
  OodResult res;
  res.source = config.ood.source;
  auto specs = synth::default_specs();
  specs.resize(std::min(specs.size(), config.classes));

  std::vector<std::pair<std::string, Subset>> sets{{"leukocytes", test}};
  for (auto kind : synth::all_ood_kinds()) {
    Subset s;
    const auto raw = synth::generate_ood(kind, specs, config.ood.per_kind,
                                         stream_seed(config, Stream::ood, {run, static_cast<std::uint64_t>(kind)}),
                                         config.corpus.extent);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      s.patches.push_back(preprocess::normalize(raw[i]));
      s.ids.push_back(std::string(synth::to_string(kind)) + "_" + std::to_string(i));
    }
    sets.emplace_back(std::string(synth::to_string(kind)), std::move(s));
  }
  for (std::size_t g = 0; g < sets.size(); ++g) {
    Subset s = sets[g].second;
    s.labels.clear();
    const auto recs = predict_all(config, model, s, fit, stream_seed(config, Stream::vi, {run, 100 + g}));
    for (const auto& [source, records] : recs) res.groups[source].push_back({sets[g].first, confidences(records)});
  }
  const auto& groups = res.groups.at(res.source);
  res.posthoc = stats::bonferroni_posthoc(groups, config.ood.alpha);
  for (const auto& g : groups) res.summaries.push_back(stats::summarize_group(g));
  return res;
}

void write_ood(const std::filesystem::path& dir, const OodResult& result) {
  {
    auto out = open_out(dir / "confidences.csv");
    out << "source,group,index,confidence\n";
    for (const auto& [source, groups] : result.groups)
      for (const auto& g : groups)
        for (std::size_t i = 0; i < g.values.size(); ++i)
          out << source << ',' << g.name << ',' << i << ',' << g.values[i] << '\n';
  }
  {
    // Error bars: standard_error is the one plotted; stddev is given alongside.
    auto out = open_out(dir / "summary.csv");
    out << "source,group,count,mean,stddev,standard_error\n";
    for (const auto& [source, groups] : result.groups) {
      for (const auto& g : groups) {
        const auto s = stats::summarize_group(g);
        out << source << ',' << s.name << ',' << s.count << ',' << s.mean << ',' << s.stddev << ','
            << s.standard_error << '\n';
      }
    }
  }
  {
    auto out = open_out(dir / "posthoc.csv");
    stats::write_posthoc_csv(out, result.posthoc);
  }
  auto out = open_out(dir / "kruskal_wallis.json");
  out << nlohmann::json{{"source", result.source},
                        {"h", result.posthoc.omnibus.h},
                        {"p_value", result.posthoc.omnibus.p_value},
                        {"degrees_of_freedom", result.posthoc.omnibus.degrees_of_freedom},
                        {"rejected", result.posthoc.gate_passed},
                        {"error_bar", "standard_error"}}
             .dump(2)
      << '\n';
}

MislabelResult run_mislabels(const RunConfig& config, const Dataset& data, std::size_t run) {
  const auto& arch = config.architecture(config.mislabels.model);
  const std::size_t n = data.size(), folds = config.mislabels.folds;
  if (n < folds) throw DataError("mislabel search needs at least as many samples as folds");
  MislabelResult res;
  res.noisy_labels = data.labels;
  res.flipped = synth::plant_label_noise(res.noisy_labels, config.classes, config.mislabels.fraction,
                                         stream_seed(config, Stream::noise, {run}));
  Dataset noisy = data;
  noisy.labels = res.noisy_labels;

  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(stream_seed(config, Stream::folds, {run}));
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);

  res.records.resize(n);
  const bool calibrate = needs_calibration(config.mislabels.source);
  for (std::size_t f = 0; f < folds; ++f) {
    std::vector<std::size_t> held, fit_idx, val_idx;
    for (std::size_t k = 0; k < n; ++k) {
      if (k % folds == f) {
        held.push_back(perm[k]);
      } else if (calibrate && k % 5 == 4) {
        val_idx.push_back(perm[k]);
      } else {
        fit_idx.push_back(perm[k]);
      }
    }
    spdlog::info("mislabels: fold {}/{} trains on {} samples", f + 1, folds, fit_idx.size());
    const Trained t = train_seeded(config, arch, noisy.take(fit_idx), stream_seed(config, Stream::init, {run, 1000 + f}),
                                   stream_seed(config, Stream::train, {run, 1000 + f}));
    CalibrationFit fit;
    if (calibrate) fit = fit_calibration(config, t.model, noisy.take(val_idx), run);
    const Subset ho = noisy.take(held);
    const auto recs = predict_all(config, t.model, ho, fit, stream_seed(config, Stream::vi, {run, 1000 + f}));
    const auto& chosen = recs.at(config.mislabels.source);
    for (std::size_t i = 0; i < held.size(); ++i) res.records[held[i]] = chosen[i];
  }
  res.suspects = stats::find_mislabeled(res.records, config.mislabels.threshold);
  std::set<std::string> suspect_ids;
  for (const auto& r : res.suspects) suspect_ids.insert(r.id);
  std::size_t hits = 0;
  for (std::size_t i : res.flipped) hits += suspect_ids.count(data.ids[i]);
  res.recall = res.flipped.empty() ? 1.0 : static_cast<double>(hits) / static_cast<double>(res.flipped.size());
  res.precision = res.suspects.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(res.suspects.size());
  return res;
}

void write_mislabels(const std::filesystem::path& dir, const MislabelResult& result, const Dataset& data) {
  std::set<std::string> planted;
  for (std::size_t i : result.flipped) planted.insert(data.ids[i]);
  {
    auto out = open_out(dir / "suspects.csv");
    out << "id,given_label,predicted,confidence,planted\n";
    for (const auto& r : result.suspects)
      out << r.id << ',' << r.true_label.value_or(-1) << ',' << r.predicted << ',' << r.confidence << ','
          << (planted.count(r.id) ? 1 : 0) << '\n';
  }
  {
    auto out = open_out(dir / "planted.csv");
    out << "id,original_label,given_label\n";
    for (std::size_t i : result.flipped)
      out << data.ids[i] << ',' << data.labels[i] << ',' << result.noisy_labels[i] << '\n';
  }
  auto out = open_out(dir / "summary.json");
  out << nlohmann::json{{"planted", result.flipped.size()},
                        {"suspects", result.suspects.size()},
                        {"recall", result.recall},
                        {"precision", result.precision}}
             .dump(2)
      << '\n';
}

void run_repro(const RunConfig& config, const std::filesystem::path& out_dir) {
  config::validate(config);
  const auto names = class_names(config);
  const auto& sources = config::confidence_sources();
  const std::vector<std::string> inference_kinds{"softmax", "vi_mean", "vi_median"};
  const Dataset data = make_dataset(config);
  spdlog::info("repro: {} patches, {} runs", data.size(), config.repeat);

  struct Row {
    std::size_t run;
    std::string model, source;
    ClassificationMetrics metrics;
    double ece, mce, temperature;
  };
  std::vector<Row> rows;
  std::map<std::pair<std::string, std::string>, std::vector<calibration::ReliabilityBins>> reliability;

  for (std::size_t run = 0; run < config.repeat; ++run) {
    const auto split = split_for_run(config, data.labels, run);
    const Subset train = data.take(split.train), validation = data.take(split.validation),
                 test = data.take(split.test);
    for (const auto& arch : config.architectures) {
      spdlog::info("repro: run {}/{} training {}", run + 1, config.repeat, arch.name);
      const Trained t = train_model(config, arch, train, run);
      const CalibrationFit fit = fit_calibration(config, t.model, validation, run);
      const auto recs =
          predict_all(config, t.model, test, fit, stream_seed(config, Stream::vi, {run, 1, name_key(arch.name)}));
      for (const auto& source : sources) {
        const auto& r = recs.at(source);
        auto bins = calibration::bin_predictions(r, config.bins);
        rows.push_back({run, arch.name, source, classification_metrics(r, config.classes), calibration::ece(bins),
                        calibration::mce(bins), fit.temperature.temperature});
        reliability[{arch.name, source}].push_back(std::move(bins));
      }

      if (run != 0) continue;
      if (arch.name == config.explain.model) {
        spdlog::info("repro: explaining {} test patches with {}", std::min(config.explain.limit, test.size()),
                     config.explain.method);
        std::vector<int> targets;
        for (const auto& r : recs.at("softmax")) targets.push_back(r.predicted);
        const auto maps = explain_subset(config.explain, t.model, arch.name, test, targets,
                                         stream_seed(config, Stream::explain, {run}));
        const auto agg = aggregate_maps(config, maps, recs.at(config.aggregate.source), run);
        write_aggregate(out_dir / "meta_explanations", agg, maps, recs.at(config.aggregate.source), names);
      }
      if (arch.name == config.ood.model) {
        spdlog::info("repro: out-of-distribution comparison with {}", arch.name);
        write_ood(out_dir / "ood", run_ood(config, t.model, test, fit, run));
      }
    }
  }
  spdlog::info("repro: mislabel search");
  write_mislabels(out_dir / "mislabels", run_mislabels(config, data, 0), data);

  auto stat = [](const std::vector<double>& v) { return summarize(v); };
  {
    auto out = open_out(out_dir / "runs.csv");
    out << "run,model,source,precision,recall,f1,accuracy,ece,mce,temperature\n";
    for (const auto& r : rows)
      out << r.run << ',' << r.model << ',' << r.source << ',' << r.metrics.precision << ',' << r.metrics.recall
          << ',' << r.metrics.f1 << ',' << r.metrics.accuracy << ',' << r.ece << ',' << r.mce << ','
          << r.temperature << '\n';
  }
  std::ostringstream md;
  md.precision(4);
  md << std::fixed;
  md << "# Reproduction summary\n\n" << config.repeat << " runs, " << data.size()
     << " synthetic patches. Precision and recall are macro-averaged over classes; F1 is their harmonic mean. "
        "Values are mean +- sample std across runs.\n\n";
  md << "## Classification\n\n| model | inference | precision | recall | F1 | accuracy |\n"
        "|---|---|---|---|---|---|\n";
  {
    auto out = open_out(out_dir / "table1.csv");
    out << "model,inference,averaging,precision_mean,precision_std,recall_mean,recall_std,f1_mean,f1_std,"
           "accuracy_mean,accuracy_std,runs\n";
    for (const auto& arch : config.architectures) {
      for (const auto& kind : inference_kinds) {
        std::vector<double> p, r, f, a;
        for (const auto& row : rows) {
          if (row.model != arch.name || row.source != kind) continue;
          p.push_back(row.metrics.precision);
          r.push_back(row.metrics.recall);
          f.push_back(row.metrics.f1);
          a.push_back(row.metrics.accuracy);
        }
        const auto sp = stat(p), sr = stat(r), sf = stat(f), sa = stat(a);
        const std::string label = kind == "softmax" ? "frequentist" : kind;
        out << arch.name << ',' << label << ",macro," << sp.mean << ',' << sp.stddev << ',' << sr.mean << ','
            << sr.stddev << ',' << sf.mean << ',' << sf.stddev << ',' << sa.mean << ',' << sa.stddev << ','
            << p.size() << '\n';
        md << "| " << arch.name << " | " << label << " | " << sp.mean << " +- " << sp.stddev << " | " << sr.mean
           << " +- " << sr.stddev << " | " << sf.mean << " +- " << sf.stddev << " | " << sa.mean << " +- "
           << sa.stddev << " |\n";
      }
    }
  }
  md << "\n## Calibration on the test split\n\n| model | confidence | ECE | MCE |\n"
        "|---|---|---|---|\n";
  {
    auto out = open_out(out_dir / "table2.csv");
    out << "model,source,ece_mean,ece_std,mce_mean,mce_std,runs\n";
    for (const auto& arch : config.architectures) {
      for (const auto& source : sources) {
        std::vector<double> e, m;
        for (const auto& row : rows) {
          if (row.model != arch.name || row.source != source) continue;
          e.push_back(row.ece);
          m.push_back(row.mce);
        }
        const auto se = stat(e), sm = stat(m);
        out << arch.name << ',' << source << ',' << se.mean << ',' << se.stddev << ',' << sm.mean << ','
            << sm.stddev << ',' << e.size() << '\n';
        md << "| " << arch.name << " | " << source << " | " << se.mean << " +- " << se.stddev << " | " << sm.mean
           << " +- " << sm.stddev << " |\n";
      }
    }
  }
  for (const auto& [key, runs] : reliability) {
    auto out = open_out(out_dir / "reliability" / (key.first + "_" + key.second + ".csv"));
    calibration::write_reliability_csv(out, calibration::reliability_export(runs));
  }
  auto out = open_out(out_dir / "summary.md");
  out << md.str();
}

}  // namespace qpi::pipeline
