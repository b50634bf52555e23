#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <unistd.h>

#include "qpi/config.hpp"
#include "qpi/error.hpp"
#include "qpi/pipeline.hpp"
#include "qpi/rundir.hpp"

using namespace qpi;
namespace fs = std::filesystem;

namespace {

// Fresh scratch directory removed on scope exit.
struct Scratch {
  fs::path path;
  explicit Scratch(const std::string& name)
      : path(fs::temp_directory_path() / ("qpi_test_" + name + "_" + std::to_string(::getpid()))) {
    fs::remove_all(path);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

PredictionRecord record(std::string id, int predicted, double confidence, std::vector<double> probs,
                        std::optional<int> truth) {
  PredictionRecord r;
  r.id = std::move(id);
  r.predicted = predicted;
  r.confidence = confidence;
  r.probs = std::move(probs);
  r.true_label = truth;
  return r;
}

config::RunConfig tiny_config() {
  config::RunConfig c;
  c.corpus.per_class = 12;
  c.train.epochs = 1;
  c.passes = 4;
  c.repeat = 2;
  return c;
}

}  // namespace

TEST_CASE("config defaults validate and round-trip through JSON") {
  const config::RunConfig c;
  CHECK_NOTHROW(config::validate(c));
  CHECK(c.architecture("lenet5").dropout == doctest::Approx(0.25));
  CHECK(c.architecture("alexnet_mini").dropout == doctest::Approx(0.5));
  CHECK_THROWS_AS(c.architecture("resnet"), ConfigError);
  const auto j = config::to_json(c);
  CHECK(config::to_json(config::from_json(j)) == j);
  auto changed = j;
  changed["seed"] = 9;
  changed["explain"]["method"] = "occlusion";
  const auto back = config::from_json(changed);
  CHECK(back.seed == 9);
  CHECK(back.explain.method == "occlusion");
  CHECK(back.repeat == c.repeat);
}

TEST_CASE("config rejects unknown keys and invalid values") {
  auto expect_config_error = [](const nlohmann::json& j, const std::string& needle) {
    try {
      config::validate(config::from_json(j));
      FAIL("no ConfigError for " << j.dump());
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find(needle) != std::string::npos);
    }
  };
  expect_config_error({{"seeed", 3}}, "seeed");
  expect_config_error({{"explain", {{"methd", "lime"}}}}, "methd");
  expect_config_error({{"explain", {{"method", "shap"}}}}, "shap");
  expect_config_error({{"ood", {{"source", "entropy"}}}}, "entropy");
  expect_config_error({{"corpus", {{"train_fraction", 0.9}, {"validation_fraction", 0.2}}}}, "fraction");
  CHECK_THROWS_AS(config::from_json({{"seed", "one"}}), ConfigError);
  CHECK_THROWS_AS(config::load("/nonexistent/config.json"), ConfigError);
}

TEST_CASE("stream seeds are distinct and stable") {
  const config::RunConfig c;
  using pipeline::Stream;
  std::set<std::uint64_t> seen;
  for (auto s : {Stream::corpus, Stream::split, Stream::init, Stream::train, Stream::vi, Stream::explain}) {
    seen.insert(pipeline::stream_seed(c, s));
    seen.insert(pipeline::stream_seed(c, s, {1}));
  }
  CHECK(seen.size() == 12);
  CHECK(pipeline::stream_seed(c, Stream::vi, {0, 1}) == pipeline::stream_seed(c, Stream::vi, {0, 1}));
  CHECK(pipeline::name_key("lenet5") != pipeline::name_key("alexnet_mini"));
}

TEST_CASE("predictions CSV round-trips exactly") {
  const std::vector<PredictionRecord> recs{
      record("a", 1, 0.1 + 0.2, {0.1, 0.30000000000000004, 0.2, 0.4}, 2),
      record("b", 0, 1.0 / 3.0, {1.0 / 3.0, 1.0 / 6.0, 0.25, 0.25}, std::nullopt),
      record("c", 3, 1e-300, {0.0, 0.0, 0.0, 1.0}, 3)};
  std::stringstream s;
  pipeline::write_predictions_csv(s, recs);
  const auto back = pipeline::read_predictions_csv(s);
  REQUIRE(back.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(back[i].id == recs[i].id);
    CHECK(back[i].predicted == recs[i].predicted);
    CHECK(back[i].confidence == recs[i].confidence);
    CHECK(back[i].probs == recs[i].probs);
    CHECK(back[i].true_label == recs[i].true_label);
  }
  std::stringstream bad("id,wrong\n");
  CHECK_THROWS_AS(pipeline::read_predictions_csv(bad), DataError);
  std::stringstream short_row("id,label,pred,conf,source,p0\nx,1\n");
  CHECK_THROWS_AS(pipeline::read_predictions_csv(short_row), DataError);
}

TEST_CASE("run directory lock, snapshot and missing artifacts") {
  Scratch dir("rundir");
  const auto c = tiny_config();
  {
    rundir::RunDirectory d(dir.path, c, "synth");
    CHECK(fs::exists(dir.path / ".lock"));
    CHECK_THROWS_AS(rundir::RunDirectory(dir.path, c, "train"), DataError);
    try {
      (void)d.require("models/lenet5.qpic", "train");
      FAIL("missing artifact accepted");
    } catch (const DataError& e) {
      CHECK(std::string(e.what()).find("'train'") != std::string::npos);
    }
    d.record_seeds({{"corpus", 5}});
  }
  CHECK_FALSE(fs::exists(dir.path / ".lock"));
  auto more_runs = c;
  more_runs.repeat = 7;
  CHECK_NOTHROW(rundir::RunDirectory(dir.path, more_runs, "train"));
  auto other = c;
  other.seed = 99;
  CHECK_THROWS_AS(rundir::RunDirectory(dir.path, other, "train"), ConfigError);
  CHECK_FALSE(fs::exists(dir.path / ".lock"));
  {
    rundir::RunDirectory d(dir.path, c, "train");
    d.record_seeds({{"init", 6}});
  }
  std::ifstream in(dir.path / "seeds.json");
  const auto seeds = nlohmann::json::parse(in);
  CHECK(seeds["synth"]["corpus"] == 5);
  CHECK(seeds["train"]["init"] == 6);
}

TEST_CASE("corpus files round-trip") {
  Scratch dir("corpus");
  const auto c = tiny_config();
  const auto data = pipeline::make_dataset(c);
  REQUIRE(data.size() == 48);
  rundir::RunDirectory d(dir.path, c, "synth");
  rundir::write_corpus(d, data, pipeline::split_for_run(c, data.labels, 0));
  const auto back = rundir::read_corpus(d);
  REQUIRE(back.size() == data.size());
  CHECK(back.ids == data.ids);
  CHECK(back.labels == data.labels);
  for (std::size_t i = 0; i < data.size(); ++i) {
    REQUIRE(back.raw[i].pixels == data.raw[i].pixels);
    REQUIRE(back.patches[i].pixels == data.patches[i].pixels);
  }
  const auto h1 = rundir::file_hash(dir.path / "corpus" / "patches.qpit");
  CHECK(h1 == rundir::file_hash(dir.path / "corpus" / "patches.qpit"));
  rundir::write_hash_list(dir.path, dir.path / "hashes.txt");
  std::ifstream list(dir.path / "hashes.txt");
  std::string text((std::istreambuf_iterator<char>(list)), std::istreambuf_iterator<char>());
  CHECK(text.find("corpus/manifest.csv") != std::string::npos);
  CHECK(text.find("hashes.txt") == std::string::npos);
}

TEST_CASE("calibration fit round-trips through JSON") {
  pipeline::CalibrationFit fit;
  fit.temperature.temperature = 1.7;
  fit.temperature.nll_before = 0.4;
  fit.temperature.nll_after = 0.3;
  fit.temperature.evaluations = 12;
  fit.vi_std.scale = -2.5;
  fit.vi_std.offset = 0.9;
  const auto back = pipeline::calibration_from_json(pipeline::calibration_to_json(fit));
  CHECK(back.temperature.temperature == 1.7);
  CHECK(back.vi_std.scale == -2.5);
  CHECK(back.vi_std.offset == 0.9);
  CHECK_THROWS_AS(pipeline::calibration_from_json({{"temperature", 1.0}}), DataError);
}

TEST_CASE("pipeline steps are deterministic for a seed") {
  const auto c = tiny_config();
  const auto data = pipeline::make_dataset(c);
  const auto split = pipeline::split_for_run(c, data.labels, 0);
  const auto train = data.take(split.train), val = data.take(split.validation), test = data.take(split.test);
  const auto& arch = c.architecture("lenet5");
  const auto a = pipeline::train_model(c, arch, train, 0);
  const auto b = pipeline::train_model(c, arch, train, 0);
  CHECK(a.log.epoch_loss == b.log.epoch_loss);
  const auto fit = pipeline::fit_calibration(c, a.model, val, 0);
  const auto ra = pipeline::predict_all(c, a.model, test, fit, 3);
  const auto rb = pipeline::predict_all(c, b.model, test, fit, 3);
  REQUIRE(ra.size() == config::confidence_sources().size());
  for (const auto& source : config::confidence_sources()) {
    REQUIRE(ra.at(source).size() == test.size());
    for (std::size_t i = 0; i < test.size(); ++i) CHECK(ra.at(source)[i].confidence == rb.at(source)[i].confidence);
  }
  const auto other_run = pipeline::split_for_run(c, data.labels, 1);
  CHECK(other_run.test != split.test);
}
