#include "qpi/rundir.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include "qpi/error.hpp"
#include "qpi/tensor_io.hpp"

namespace qpi::rundir {
namespace {

nlohmann::json comparable(nlohmann::json j) {
  j.erase("repeat");
  return j;
}

}  // namespace

RunDirectory::RunDirectory(std::filesystem::path dir, const config::RunConfig& config, std::string command)
    : dir_(std::move(dir)), lock_(dir_ / ".lock"), command_(std::move(command)) {
  std::filesystem::create_directories(dir_);
  // "x" fails when the file exists, which makes lock creation atomic.
  std::FILE* f = std::fopen(lock_.c_str(), "wx");
  if (!f) {
    throw DataError("run directory " + dir_.string() + " is locked by another subcommand (remove " +
                    lock_.string() + " if no other process is running)");
  }
  std::fprintf(f, "%s %ld\n", command_.c_str(), static_cast<long>(::getpid()));
  std::fclose(f);

  try {
    const nlohmann::json current = config::to_json(config);
    const auto snapshot = dir_ / "config.json";
    if (std::filesystem::exists(snapshot)) {
      std::ifstream in(snapshot);
      nlohmann::json previous;
      try {
        previous = nlohmann::json::parse(in);
      } catch (const nlohmann::json::parse_error&) {
        throw DataError("config snapshot " + snapshot.string() + " is corrupt");
      }
      if (comparable(previous) != comparable(current)) {
        throw ConfigError("run directory " + dir_.string() +
                          " was created with a different config; choose another --id or --out");
      }
    }
    std::ofstream out(snapshot);
    out << current.dump(2) << '\n';
  } catch (...) {
    std::filesystem::remove(lock_);
    throw;
  }
}

RunDirectory::~RunDirectory() {
  std::error_code ec;
  std::filesystem::remove(lock_, ec);
}

std::filesystem::path RunDirectory::require(const std::filesystem::path& relative, std::string_view producer) const {
  const auto p = dir_ / relative;
  if (!std::filesystem::exists(p)) {
    throw DataError("missing " + p.string() + "; run the '" + std::string(producer) +
                    "' subcommand on this run directory first");
  }
  return p;
}

void RunDirectory::record_seeds(const nlohmann::json& seeds) const {
  const auto path = dir_ / "seeds.json";
  nlohmann::json all = nlohmann::json::object();
  if (std::filesystem::exists(path)) {
    std::ifstream in(path);
    all = nlohmann::json::parse(in, nullptr, false);
    if (all.is_discarded() || !all.is_object()) all = nlohmann::json::object();
  }
  all[command_] = seeds;
  std::ofstream out(path);
  out << all.dump(2) << '\n';
}

void write_corpus(const RunDirectory& dir, const pipeline::Dataset& data, const synth::Split& split) {
  const auto root = dir / "corpus";
  std::filesystem::create_directories(root);
  if (data.size() == 0) throw DataError("corpus is empty");
  const std::size_t h = data.raw[0].height, w = data.raw[0].width;
  std::vector<double> values;
  values.reserve(data.size() * h * w);
  std::vector<synth::Sample> samples;
  for (std::size_t i = 0; i < data.size(); ++i) {
    values.insert(values.end(), data.raw[i].pixels.begin(), data.raw[i].pixels.end());
    samples.push_back({data.ids[i], data.labels[i], Image()});
  }
  save_tensor(root / "patches.qpit", Tensor({data.size(), h, w}, std::move(values)));
  std::ofstream out(root / "manifest.csv");
  synth::write_manifest(out, samples, split);
}

pipeline::Dataset read_corpus(const RunDirectory& dir) {
  const Tensor t = load_tensor(dir.require("corpus/patches.qpit", "synth"));
  std::ifstream in(dir.require("corpus/manifest.csv", "synth"));
  std::string line;
  std::getline(in, line);
  std::vector<synth::Sample> samples;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    synth::Sample s;
    std::string label;
    std::getline(ss, s.id, ',');
    std::getline(ss, label, ',');
    try {
      s.label = std::stoi(label);
    } catch (const std::logic_error&) {
      throw DataError("corpus manifest row for '" + s.id + "' has a malformed label");
    }
    samples.push_back(std::move(s));
  }
  if (t.rank() != 3 || t.dim(0) != samples.size()) {
    throw DataError("corpus patches do not match the manifest (" + std::to_string(samples.size()) + " rows)");
  }
  const std::size_t h = t.dim(1), w = t.dim(2);
  const auto values = t.values();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    samples[i].phase = Image(h, w, std::vector<double>(values.begin() + static_cast<std::ptrdiff_t>(i * h * w),
                                                       values.begin() + static_cast<std::ptrdiff_t>((i + 1) * h * w)));
  }
  return pipeline::dataset_from_samples(samples);
}

std::uint64_t file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

void write_hash_list(const std::filesystem::path& root, const std::filesystem::path& out) {
  std::vector<std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path() == out) continue;
    files.push_back(std::filesystem::relative(e.path(), root).generic_string());
  }
  std::sort(files.begin(), files.end());
  std::ofstream o(out);
  for (const auto& f : files) {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(file_hash(root / f)));
    o << hex << "  " << f << '\n';
  }
}

}  // namespace qpi::rundir
