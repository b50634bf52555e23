// Command-line driver: each subcommand reads and writes one run directory.

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "qpi/calibration.hpp"
#include "qpi/error.hpp"
#include "qpi/metrics.hpp"
#include "qpi/models.hpp"
#include "qpi/pipeline.hpp"
#include "qpi/preprocess.hpp"
#include "qpi/rundir.hpp"
#include "qpi/tensor_io.hpp"

namespace fs = std::filesystem;
using namespace qpi;
using pipeline::Stream;
using rundir::RunDirectory;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

struct GlobalOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> runs;
  std::string out = "runs";
  std::string id;
};

struct CommandOptions {
  std::vector<std::string> archs;
  std::optional<std::size_t> epochs;
  std::string method;
  std::optional<std::size_t> limit;
  bool pixel_csv = false;
  std::string frames;
};

config::RunConfig resolve_config(const GlobalOptions& g) {
  config::RunConfig c = g.config_path.empty() ? config::RunConfig{} : config::load(g.config_path);
  if (g.seed) c.seed = *g.seed;
  if (g.runs) c.repeat = *g.runs;
  config::validate(c);
  return c;
}

fs::path run_path(const GlobalOptions& g, const config::RunConfig& c) {
  return fs::path(g.out) / (g.id.empty() ? "seed-" + std::to_string(c.seed) : g.id);
}

std::ofstream open_out(const fs::path& path) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out.precision(17);
  return out;
}

void write_json(const fs::path& path, const nlohmann::json& j) { open_out(path) << j.dump(2) << '\n'; }

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw DataError(path.string() + " is not valid JSON");
  return j;
}

std::vector<models::ArchitectureConfig> selected(const config::RunConfig& c, const std::vector<std::string>& names) {
  if (names.empty()) return c.architectures;
  std::vector<models::ArchitectureConfig> out;
  for (const auto& n : names) out.push_back(c.architecture(n));
  return out;
}

struct Splits {
  pipeline::Subset train, validation, test;
};

Splits load_splits(const config::RunConfig& c, const pipeline::Dataset& data) {
  const auto split = pipeline::split_for_run(c, data.labels, 0);
  return {data.take(split.train), data.take(split.validation), data.take(split.test)};
}

nn::Model load_model(const RunDirectory& dir, const models::ArchitectureConfig& arch) {
  nn::Model m = pipeline::build_model(arch);
  load_checkpoint(dir.require("models/" + arch.name + ".qpic", "train"), m);
  return m;
}

pipeline::CalibrationFit load_calibration(const RunDirectory& dir, const std::string& arch) {
  return pipeline::calibration_from_json(read_json(dir.require("calibration/" + arch + ".json", "calibrate")));
}

std::vector<PredictionRecord> load_predictions(const RunDirectory& dir, const std::string& arch,
                                               const std::string& source) {
  std::ifstream in(dir.require("predictions/" + arch + "_" + source + ".csv", "evaluate"));
  return pipeline::read_predictions_csv(in);
}

void cmd_synth(const config::RunConfig& c, const RunDirectory& dir) {
  const auto data = pipeline::make_dataset(c);
  rundir::write_corpus(dir, data, pipeline::split_for_run(c, data.labels, 0));
  dir.record_seeds({{"corpus", pipeline::stream_seed(c, Stream::corpus)},
                    {"split", pipeline::stream_seed(c, Stream::split, {0})}});
  spdlog::info("synth: {} patches written to {}", data.size(), (dir / "corpus").string());
}

void cmd_preprocess(const config::RunConfig& c, const RunDirectory& dir, const CommandOptions& o) {
  std::vector<Image> frames;
  if (!o.frames.empty()) {
    const Tensor t = load_tensor(o.frames);
    if (t.rank() != 3) throw DataError("frames tensor must be [frames, height, width]");
    const auto v = t.values();
    const std::size_t h = t.dim(1), w = t.dim(2);
    for (std::size_t f = 0; f < t.dim(0); ++f)
      frames.emplace_back(h, w, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(f * h * w),
                                                    v.begin() + static_cast<std::ptrdiff_t>((f + 1) * h * w)));
  } else {
    synth::FrameConfig fc = c.frames;
    fc.seed = pipeline::stream_seed(c, Stream::corpus, {1});
    frames = synth::generate_frames(synth::default_specs(), fc).frames;
    dir.record_seeds({{"frames", fc.seed}});
  }
  const auto cells = preprocess::process_frames(frames, c.preprocess);
  std::vector<double> values;
  std::size_t kept = 0;
  for (const auto& cell : cells) {
    if (!cell.keep) continue;
    values.insert(values.end(), cell.patch.pixels.begin(), cell.patch.pixels.end());
    ++kept;
  }
  const auto root = dir / "preprocess";
  fs::create_directories(root);
  const std::size_t e = c.preprocess.patch_extent;
  save_tensor(root / "patches.qpit", Tensor({kept, e, e}, std::move(values)));
  auto out = open_out(root / "features.csv");
  preprocess::write_feature_csv(out, cells);
  write_json(root / "summary.json", {{"frames", frames.size()}, {"contours", cells.size()}, {"kept", kept}});
  spdlog::info("preprocess: {} contours in {} frames, {} kept", cells.size(), frames.size(), kept);
}

void cmd_train(config::RunConfig c, const RunDirectory& dir, const CommandOptions& o) {
  if (o.epochs) c.train.epochs = *o.epochs;
  const auto data = rundir::read_corpus(dir);
  const auto s = load_splits(c, data);
  nlohmann::json seeds;
  for (const auto& arch : selected(c, o.archs)) {
    spdlog::info("train: {} on {} patches for {} epochs", arch.name, s.train.size(), c.train.epochs);
    const auto t = pipeline::train_model(c, arch, s.train, 0);
    fs::create_directories(dir / "models");
    save_checkpoint(dir / "models" / (arch.name + ".qpic"), t.model);
    write_json(dir / "models" / (arch.name + "_train.json"),
               {{"epochs", c.train.epochs}, {"steps", t.log.steps}, {"epoch_loss", t.log.epoch_loss},
                {"clamped", t.log.clamped}, {"parameters", t.model.parameter_count()}});
    const auto key = pipeline::name_key(arch.name);
    seeds[arch.name] = {{"init", pipeline::stream_seed(c, Stream::init, {0, key})},
                        {"train", pipeline::stream_seed(c, Stream::train, {0, key})}};
  }
  dir.record_seeds(seeds);
}

void cmd_calibrate(const config::RunConfig& c, const RunDirectory& dir, const CommandOptions& o) {
  const auto data = rundir::read_corpus(dir);
  const auto s = load_splits(c, data);
  for (const auto& arch : selected(c, o.archs)) {
    const nn::Model m = load_model(dir, arch);
    const auto fit = pipeline::fit_calibration(c, m, s.validation, 0);
    write_json(dir / "calibration" / (arch.name + ".json"), pipeline::calibration_to_json(fit));
    spdlog::info("calibrate: {} T = {:.4f}, vi_std map scale {:.2f} offset {:.2f}", arch.name,
                 fit.temperature.temperature, fit.vi_std.scale, fit.vi_std.offset);
  }
}

void cmd_evaluate(const config::RunConfig& c, const RunDirectory& dir, const CommandOptions& o) {
  const auto data = rundir::read_corpus(dir);
  const auto s = load_splits(c, data);
  nlohmann::json seeds;
  for (const auto& arch : selected(c, o.archs)) {
    const nn::Model m = load_model(dir, arch);
    const auto fit = load_calibration(dir, arch.name);
    const auto vi_seed = pipeline::stream_seed(c, Stream::vi, {0, 1, pipeline::name_key(arch.name)});
    seeds[arch.name] = vi_seed;
    const auto recs = pipeline::predict_all(c, m, s.test, fit, vi_seed);
    nlohmann::json metrics = {{"averaging", "macro"}, {"model", arch.name}, {"samples", s.test.size()}};
    for (const auto& source : config::confidence_sources()) {
      const auto& r = recs.at(source);
      auto out = open_out(dir / "predictions" / (arch.name + "_" + source + ".csv"));
      pipeline::write_predictions_csv(out, r);
      const auto mm = classification_metrics(r, c.classes);
      const auto report = calibration::make_report(r, dir.path().filename().string(), source,
                                                   source == "softmax_temperature" ? fit.temperature.temperature : 1.0,
                                                   c.bins);
      metrics["sources"][source] = {{"precision", mm.precision}, {"recall", mm.recall}, {"f1", mm.f1},
                                    {"accuracy", mm.accuracy},   {"ece", report.ece},    {"mce", report.mce}};
      open_out(dir / "evaluation" / (arch.name + "_" + source + "_calibration.json"))
          << calibration::report_json(report) << '\n';
      const std::vector<calibration::ReliabilityBins> runs{report.bins};
      auto rel = open_out(dir / "evaluation" / ("reliability_" + arch.name + "_" + source + ".csv"));
      calibration::write_reliability_csv(rel, calibration::reliability_export(runs));
      if (source == "softmax") spdlog::info("evaluate: {} accuracy {:.4f} F1 {:.4f}", arch.name, mm.accuracy, mm.f1);
    }
    write_json(dir / "evaluation" / (arch.name + "_metrics.json"), metrics);
  }
  dir.record_seeds(seeds);
}

void cmd_explain(config::RunConfig c, const RunDirectory& dir, const CommandOptions& o) {
  if (!o.method.empty()) c.explain.method = o.method;
  if (o.limit) c.explain.limit = *o.limit;
  config::validate(c);
  const std::string arch_name = o.archs.empty() ? c.explain.model : o.archs.front();
  const auto& arch = c.architecture(arch_name);
  const auto data = rundir::read_corpus(dir);
  const auto s = load_splits(c, data);
  const nn::Model m = load_model(dir, arch);
  const auto preds = load_predictions(dir, arch.name, "softmax");
  if (preds.size() != s.test.size()) throw DataError("predictions do not cover the test split; rerun 'evaluate'");
  std::vector<int> targets;
  for (const auto& r : preds) targets.push_back(r.predicted);
  const auto seed = pipeline::stream_seed(c, Stream::explain, {0});
  const auto maps = pipeline::explain_subset(c.explain, m, arch.name, s.test, targets, seed);

  const auto root = dir / "explanations" / (arch.name + "_" + c.explain.method);
  fs::create_directories(root);
  const std::size_t h = maps.front().values.height, w = maps.front().values.width;
  std::vector<double> values;
  for (const auto& map : maps) values.insert(values.end(), map.values.pixels.begin(), map.values.pixels.end());
  save_tensor(root / "maps.qpit", Tensor({maps.size(), h, w}, std::move(values)));
  auto index = open_out(root / "index.csv");
  index << "id,target,method,model\n";
  for (const auto& map : maps) index << map.sample_id << ',' << map.target << ',' << map.method << ',' << map.model << '\n';
  if (o.pixel_csv) {
    auto px = open_out(root / "pixels.csv");
    px << "id,row,col,value\n";
    for (const auto& map : maps)
      for (std::size_t r = 0; r < h; ++r)
        for (std::size_t col = 0; col < w; ++col) px << map.sample_id << ',' << r << ',' << col << ',' << map.values.at(r, col) << '\n';
  }
  dir.record_seeds({{"explain", seed}});
  spdlog::info("explain: {} {} maps written to {}", maps.size(), c.explain.method, root.string());
}

std::vector<explain::ExplanationMap> load_maps(const RunDirectory& dir, const std::string& key) {
  const Tensor t = load_tensor(dir.require("explanations/" + key + "/maps.qpit", "explain"));
  std::ifstream in(dir.require("explanations/" + key + "/index.csv", "explain"));
  std::string line;
  std::getline(in, line);
  std::vector<explain::ExplanationMap> maps;
  const auto v = t.values();
  const std::size_t h = t.dim(1), w = t.dim(2);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    explain::ExplanationMap m;
    std::string target;
    std::getline(ss, m.sample_id, ',');
    std::getline(ss, target, ',');
    std::getline(ss, m.method, ',');
    std::getline(ss, m.model, ',');
    m.target = std::stoi(target);
    const std::size_t i = maps.size();
    if (i >= t.dim(0)) throw DataError("explanation index lists more maps than the tensor holds");
    m.values = Image(h, w, std::vector<double>(v.begin() + static_cast<std::ptrdiff_t>(i * h * w),
                                               v.begin() + static_cast<std::ptrdiff_t>((i + 1) * h * w)));
    maps.push_back(std::move(m));
  }
  return maps;
}

void cmd_aggregate(config::RunConfig c, const RunDirectory& dir, const CommandOptions& o) {
  if (!o.method.empty()) c.explain.method = o.method;
  const std::string arch = o.archs.empty() ? c.explain.model : o.archs.front();
  const std::string key = arch + "_" + c.explain.method;
  const auto maps = load_maps(dir, key);
  const auto records = load_predictions(dir, arch, c.aggregate.source);
  const auto result = pipeline::aggregate_maps(c, maps, records, 0);
  pipeline::write_aggregate(dir / "aggregate" / key, result, maps, records, pipeline::class_names(c));
  dir.record_seeds({{"tsne", pipeline::stream_seed(c, Stream::tsne, {0})},
                    {"kmeans", pipeline::stream_seed(c, Stream::kmeans, {0})}});
  spdlog::info("aggregate: {} maps, t-SNE KL {:.4f}, {} clusters", maps.size(), result.embedding.kl_final,
               result.clusters.centers.size());
}

void cmd_ood(const config::RunConfig& c, const RunDirectory& dir, const CommandOptions& o) {
  const auto& arch = c.architecture(o.archs.empty() ? c.ood.model : o.archs.front());
  const auto data = rundir::read_corpus(dir);
  const auto s = load_splits(c, data);
  const nn::Model m = load_model(dir, arch);
  const auto fit = load_calibration(dir, arch.name);
  const auto result = pipeline::run_ood(c, m, s.test, fit, 0);
  pipeline::write_ood(dir / "ood" / arch.name, result);
  nlohmann::json seeds;
  for (const auto kind : synth::all_ood_kinds()) {
    seeds["ood"][std::string(synth::to_string(kind))] =
        pipeline::stream_seed(c, Stream::ood, {0, static_cast<std::uint64_t>(kind)});
  }
  for (std::uint64_t g = 0; g <= synth::all_ood_kinds().size(); ++g)
    seeds["vi"].push_back(pipeline::stream_seed(c, Stream::vi, {0, 100 + g}));
  dir.record_seeds(seeds);
  for (const auto& g : result.summaries) spdlog::info("ood: {:<18} mean {} {:.4f}", g.name, result.source, g.mean);
  spdlog::info("ood: Kruskal-Wallis H {:.3f}, p {:.3g}", result.posthoc.omnibus.h, result.posthoc.omnibus.p_value);
}

void cmd_mislabels(const config::RunConfig& c, const RunDirectory& dir) {
  const auto data = rundir::read_corpus(dir);
  const auto result = pipeline::run_mislabels(c, data, 0);
  pipeline::write_mislabels(dir / "mislabels", result, data);
  dir.record_seeds({{"noise", pipeline::stream_seed(c, Stream::noise, {0})},
                    {"folds", pipeline::stream_seed(c, Stream::folds, {0})}});
  spdlog::info("mislabels: {} planted, {} suspects, recall {:.3f}", result.flipped.size(), result.suspects.size(),
               result.recall);
}

void cmd_repro(const config::RunConfig& c, const RunDirectory& dir) {
  const auto root = dir / "repro";
  if (fs::exists(root)) fs::remove_all(root);
  pipeline::run_repro(c, root);
  rundir::write_hash_list(root, root / "artifacts.txt");
  dir.record_seeds({{"base", c.seed}, {"repeat", c.repeat}});
  spdlog::info("repro: outputs in {}", root.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interpretable leukocyte classification pipeline on synthetic phase images"};
  app.require_subcommand(1);
  GlobalOptions g;
  CommandOptions o;
  app.add_option("--config", g.config_path, "JSON run config")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "Override the config seed");
  app.add_option("--runs", g.runs, "Override the repeat count");
  app.add_option("--out", g.out, "Root directory for run directories")->capture_default_str();
  app.add_option("--id", g.id, "Run directory name (default seed-<seed>)");

  auto* synth_cmd = app.add_subcommand("synth", "Generate the synthetic labeled corpus");
  auto* prep = app.add_subcommand("preprocess", "Segment frames into normalized single-cell patches");
  prep->add_option("--frames", o.frames, "Tensor file [frames, height, width]; synthetic frames when absent");
  auto* train = app.add_subcommand("train", "Train the configured architectures");
  train->add_option("--epochs", o.epochs, "Override the epoch count (0 leaves the model untrained)");
  auto* cal = app.add_subcommand("calibrate", "Fit temperature and the vi_std map on the validation split");
  auto* eval = app.add_subcommand("evaluate", "Predict the test split with every confidence source");
  auto* expl = app.add_subcommand("explain", "Explain test predictions");
  expl->add_option("--method", o.method, "lime, occlusion, saliency, grad_cam, guided_backprop, guided_grad_cam");
  expl->add_option("--limit", o.limit, "Number of test patches to explain");
  expl->add_flag("--pixel-csv", o.pixel_csv, "Also write per-pixel CSV");
  auto* agg = app.add_subcommand("aggregate", "Confidence grid, t-SNE and k-means over explanations");
  agg->add_option("--method", o.method, "Explanation method to aggregate");
  auto* ood = app.add_subcommand("ood", "Confidence on out-of-distribution sets with rank tests");
  auto* mis = app.add_subcommand("mislabels", "Planted label-noise search with cross-fitted models");
  auto* repro = app.add_subcommand("repro", "Repeated end-to-end experiment with summary tables");
  for (auto* sub : {train, cal, eval, expl, agg, ood}) sub->add_option("--arch", o.archs, "Architecture name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    const auto c = resolve_config(g);
    const auto* sub = app.get_subcommands().front();
    RunDirectory dir(run_path(g, c), c, sub->get_name());
    if (sub == synth_cmd) cmd_synth(c, dir);
    else if (sub == prep) cmd_preprocess(c, dir, o);
    else if (sub == train) cmd_train(c, dir, o);
    else if (sub == cal) cmd_calibrate(c, dir, o);
    else if (sub == eval) cmd_evaluate(c, dir, o);
    else if (sub == expl) cmd_explain(c, dir, o);
    else if (sub == agg) cmd_aggregate(c, dir, o);
    else if (sub == ood) cmd_ood(c, dir, o);
    else if (sub == mis) cmd_mislabels(c, dir);
    else if (sub == repro) cmd_repro(c, dir);
  } catch (const ConfigError& e) {
    spdlog::error("{}", e.what());
    return kExitConfig;
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return kExitData;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
