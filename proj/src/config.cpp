#include "qpi/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "qpi/error.hpp"

namespace qpi::config {
namespace {

using nlohmann::json;

// Reads fields of one JSON object, remembering which keys were consumed so
// that leftovers can be reported as unknown.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError("config: '" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& field) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      field = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError("config: '" + name(key) + "' has the wrong type (" + e.what() + ")");
    }
  }

  // Nested object, or nullptr when absent.
  const json* child(const char* key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string name(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError("config: unknown key '" + name(key) + "'");
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void read_architecture(const json& j, const std::string& path, models::ArchitectureConfig& a) {
  ObjectReader r(j, path);
  r.get("name", a.name);
  r.get("input_extent", a.input_extent);
  r.get("channels", a.channels);
  r.get("dropout", a.dropout);
  r.get("classes", a.classes);
  r.get("conv_widths", a.conv_widths);
  r.get("fc_widths", a.fc_widths);
  r.finish();
}

json write_architecture(const models::ArchitectureConfig& a) {
  return {{"name", a.name},         {"input_extent", a.input_extent}, {"channels", a.channels},
          {"dropout", a.dropout},   {"classes", a.classes},           {"conv_widths", a.conv_widths},
          {"fc_widths", a.fc_widths}};
}

void read_lime(const json& j, const std::string& path, explain::LimeConfig& l) {
  ObjectReader r(j, path);
  if (const json* segs = r.child("segmenters")) {
    if (!segs->is_array()) throw ConfigError("config: '" + r.name("segmenters") + "' must be an array");
    l.segmenters.clear();
    for (const auto& s : *segs) {
      explain::SlicParams p;
      ObjectReader sr(s, r.name("segmenters[]"));
      sr.get("segments", p.segments);
      sr.get("compactness", p.compactness);
      sr.get("sigma", p.sigma);
      sr.finish();
      l.segmenters.push_back(p);
    }
  }
  r.get("samples", l.samples);
  r.get("kernel_width", l.kernel_width);
  r.get("ridge", l.ridge);
  r.finish();
}

json write_lime(const explain::LimeConfig& l) {
  json segs = json::array();
  for (const auto& s : l.segmenters)
    segs.push_back({{"segments", s.segments}, {"compactness", s.compactness}, {"sigma", s.sigma}});
  return {{"segmenters", segs}, {"samples", l.samples}, {"kernel_width", l.kernel_width}, {"ridge", l.ridge}};
}

void read_tsne(const json& j, const std::string& path, aggregate::TsneConfig& t) {
  ObjectReader r(j, path);
  r.get("perplexity", t.perplexity);
  r.get("iterations", t.iterations);
  r.get("exaggeration", t.exaggeration);
  r.get("exaggeration_iterations", t.exaggeration_iterations);
  r.get("learning_rate", t.learning_rate);
  r.get("momentum", t.momentum);
  r.get("final_momentum", t.final_momentum);
  r.get("momentum_switch", t.momentum_switch);
  r.finish();
}

json write_tsne(const aggregate::TsneConfig& t) {
  return {{"perplexity", t.perplexity},
          {"iterations", t.iterations},
          {"exaggeration", t.exaggeration},
          {"exaggeration_iterations", t.exaggeration_iterations},
          {"learning_rate", t.learning_rate},
          {"momentum", t.momentum},
          {"final_momentum", t.final_momentum},
          {"momentum_switch", t.momentum_switch}};
}

void check(bool ok, const std::string& message) {
  if (!ok) throw ConfigError("config: " + message);
}

bool is_source(const std::string& s) {
  const auto& all = confidence_sources();
  return std::find(all.begin(), all.end(), s) != all.end();
}

}  // namespace

RunConfig::RunConfig() {
  models::ArchitectureConfig lenet;
  lenet.name = "lenet5";
  lenet.dropout = 0.25;
  models::ArchitectureConfig alex;
  alex.name = "alexnet_mini";
  alex.dropout = 0.5;
  architectures = {lenet, alex};
}

const models::ArchitectureConfig& RunConfig::architecture(const std::string& name) const {
  for (const auto& a : architectures) {
    if (a.name == name) return a;
  }
  throw ConfigError("config: no architecture named '" + name + "' is configured");
}

const std::vector<std::string>& confidence_sources() {
  static const std::vector<std::string> sources{"softmax", "softmax_temperature", "vi_mean",
                                                "vi_median", "vi_std", "vi_std_calibrated"};
  return sources;
}

RunConfig from_json(const json& j) {
  RunConfig c;
  ObjectReader r(j, "");
  r.get("seed", c.seed);
  r.get("repeat", c.repeat);
  r.get("classes", c.classes);
  r.get("passes", c.passes);
  r.get("bins", c.bins);
  if (const json* o = r.child("corpus")) {
    ObjectReader s(*o, "corpus");
    s.get("per_class", c.corpus.per_class);
    s.get("extent", c.corpus.extent);
    s.get("noise_sd", c.corpus.noise_sd);
    s.get("train_fraction", c.corpus.train_fraction);
    s.get("validation_fraction", c.corpus.validation_fraction);
    s.finish();
  }
  if (const json* o = r.child("architectures")) {
    if (!o->is_array()) throw ConfigError("config: 'architectures' must be an array");
    c.architectures.clear();
    for (const auto& a : *o) {
      models::ArchitectureConfig arch;
      read_architecture(a, "architectures[]", arch);
      c.architectures.push_back(arch);
    }
  }
  if (const json* o = r.child("train")) {
    ObjectReader s(*o, "train");
    s.get("epochs", c.train.epochs);
    s.get("batch_size", c.train.batch_size);
    s.get("learning_rate", c.train.adam.learning_rate);
    s.get("beta1", c.train.adam.beta1);
    s.get("beta2", c.train.adam.beta2);
    s.get("epsilon", c.train.adam.epsilon);
    s.finish();
  }
  if (const json* o = r.child("explain")) {
    ObjectReader s(*o, "explain");
    s.get("model", c.explain.model);
    s.get("method", c.explain.method);
    s.get("limit", c.explain.limit);
    s.get("occlusion_window", c.explain.occlusion_window);
    s.get("occlusion_stride", c.explain.occlusion_stride);
    if (const json* l = s.child("lime")) read_lime(*l, "explain.lime", c.explain.lime);
    s.finish();
  }
  if (const json* o = r.child("aggregate")) {
    ObjectReader s(*o, "aggregate");
    s.get("bins", c.aggregate.bins);
    s.get("source", c.aggregate.source);
    s.get("clusters", c.aggregate.clusters);
    if (const json* t = s.child("tsne")) read_tsne(*t, "aggregate.tsne", c.aggregate.tsne);
    s.finish();
  }
  if (const json* o = r.child("ood")) {
    ObjectReader s(*o, "ood");
    s.get("model", c.ood.model);
    s.get("per_kind", c.ood.per_kind);
    s.get("source", c.ood.source);
    s.get("alpha", c.ood.alpha);
    s.finish();
  }
  if (const json* o = r.child("mislabels")) {
    ObjectReader s(*o, "mislabels");
    s.get("model", c.mislabels.model);
    s.get("fraction", c.mislabels.fraction);
    s.get("threshold", c.mislabels.threshold);
    s.get("folds", c.mislabels.folds);
    s.get("source", c.mislabels.source);
    s.finish();
  }
  if (const json* o = r.child("preprocess")) {
    ObjectReader s(*o, "preprocess");
    auto& p = c.preprocess;
    s.get("background_window", p.background_window);
    s.get("threshold", p.threshold);
    s.get("min_area", p.min_area);
    s.get("pixel_pitch", p.pixel_pitch);
    s.get("wavelength", p.wavelength);
    s.get("min_diameter", p.min_diameter);
    s.get("min_circularity", p.min_circularity);
    s.get("patch_extent", p.patch_extent);
    s.get("clip_lo", p.clip_lo);
    s.get("clip_hi", p.clip_hi);
    s.finish();
  }
  if (const json* o = r.child("frames")) {
    ObjectReader s(*o, "frames");
    auto& f = c.frames;
    s.get("height", f.height);
    s.get("width", f.width);
    s.get("frames", f.frames);
    s.get("cells_per_frame", f.cells_per_frame);
    s.get("background_level", f.background_level);
    s.get("noise_sd", f.noise_sd);
    s.finish();
  }
  r.finish();
  validate(c);
  return c;
}

json to_json(const RunConfig& c) {
  json archs = json::array();
  for (const auto& a : c.architectures) archs.push_back(write_architecture(a));
  const auto& p = c.preprocess;
  return {
      {"seed", c.seed},
      {"repeat", c.repeat},
      {"classes", c.classes},
      {"passes", c.passes},
      {"bins", c.bins},
      {"corpus",
       {{"per_class", c.corpus.per_class},
        {"extent", c.corpus.extent},
        {"noise_sd", c.corpus.noise_sd},
        {"train_fraction", c.corpus.train_fraction},
        {"validation_fraction", c.corpus.validation_fraction}}},
      {"architectures", archs},
      {"train",
       {{"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"learning_rate", c.train.adam.learning_rate},
        {"beta1", c.train.adam.beta1},
        {"beta2", c.train.adam.beta2},
        {"epsilon", c.train.adam.epsilon}}},
      {"explain",
       {{"model", c.explain.model},
        {"method", c.explain.method},
        {"limit", c.explain.limit},
        {"occlusion_window", c.explain.occlusion_window},
        {"occlusion_stride", c.explain.occlusion_stride},
        {"lime", write_lime(c.explain.lime)}}},
      {"aggregate",
       {{"bins", c.aggregate.bins},
        {"source", c.aggregate.source},
        {"clusters", c.aggregate.clusters},
        {"tsne", write_tsne(c.aggregate.tsne)}}},
      {"ood",
       {{"model", c.ood.model}, {"per_kind", c.ood.per_kind}, {"source", c.ood.source}, {"alpha", c.ood.alpha}}},
      {"mislabels",
       {{"model", c.mislabels.model},
        {"fraction", c.mislabels.fraction},
        {"threshold", c.mislabels.threshold},
        {"folds", c.mislabels.folds},
        {"source", c.mislabels.source}}},
      {"preprocess",
       {{"background_window", p.background_window},
        {"threshold", p.threshold},
        {"min_area", p.min_area},
        {"pixel_pitch", p.pixel_pitch},
        {"wavelength", p.wavelength},
        {"min_diameter", p.min_diameter},
        {"min_circularity", p.min_circularity},
        {"patch_extent", p.patch_extent},
        {"clip_lo", p.clip_lo},
        {"clip_hi", p.clip_hi}}},
      {"frames",
       {{"height", c.frames.height},
        {"width", c.frames.width},
        {"frames", c.frames.frames},
        {"cells_per_frame", c.frames.cells_per_frame},
        {"background_level", c.frames.background_level},
        {"noise_sd", c.frames.noise_sd}}},
  };
}

RunConfig load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

void validate(const RunConfig& c) {
  check(c.repeat >= 1, "repeat must be >= 1");
  check(c.classes >= 2, "classes must be >= 2");
  check(c.passes >= 2, "passes must be >= 2");
  check(c.bins >= 1, "bins must be >= 1");
  check(c.corpus.per_class >= 1, "corpus.per_class must be >= 1");
  check(c.corpus.extent >= 8, "corpus.extent must be >= 8");
  check(c.corpus.train_fraction > 0.0 && c.corpus.validation_fraction >= 0.0 &&
            c.corpus.train_fraction + c.corpus.validation_fraction < 1.0,
        "corpus split fractions must leave a non-empty test share");
  check(!c.architectures.empty(), "at least one architecture is required");
  std::set<std::string> names;
  for (const auto& a : c.architectures) {
    check(names.insert(a.name).second, "architecture '" + a.name + "' is listed twice");
    check(a.classes == c.classes, "architecture '" + a.name + "' must emit " + std::to_string(c.classes) + " classes");
    models::resolve(a);
  }
  check(c.train.batch_size >= 1, "train.batch_size must be >= 1");
  check(c.train.adam.learning_rate > 0.0, "train.learning_rate must be positive");
  const std::set<std::string> methods{"lime",     "occlusion",       "saliency",
                                      "grad_cam", "guided_backprop", "guided_grad_cam"};
  check(methods.count(c.explain.method) == 1, "explain.method '" + c.explain.method + "' is not a known method");
  check(c.explain.limit >= 1, "explain.limit must be >= 1");
  check(c.aggregate.bins >= 1, "aggregate.bins must be >= 1");
  check(is_source(c.aggregate.source), "aggregate.source '" + c.aggregate.source + "' is not a confidence source");
  check(is_source(c.ood.source), "ood.source '" + c.ood.source + "' is not a confidence source");
  check(is_source(c.mislabels.source), "mislabels.source '" + c.mislabels.source + "' is not a confidence source");
  check(c.ood.per_kind >= 1, "ood.per_kind must be >= 1");
  check(c.ood.alpha > 0.0 && c.ood.alpha < 1.0, "ood.alpha must lie in (0, 1)");
  check(c.mislabels.fraction >= 0.0 && c.mislabels.fraction < 1.0, "mislabels.fraction must lie in [0, 1)");
  check(c.mislabels.folds >= 2, "mislabels.folds must be >= 2");
  check(c.mislabels.threshold >= 0.0 && c.mislabels.threshold <= 1.0, "mislabels.threshold must lie in [0, 1]");
  c.architecture(c.explain.model);
  c.architecture(c.ood.model);
  c.architecture(c.mislabels.model);
}

}  // namespace qpi::config
