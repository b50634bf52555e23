#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include "qpi/config.hpp"
#include "qpi/pipeline.hpp"

// Run directories: one subcommand at a time per directory, a config snapshot
// shared by every step, and artifact lookup with actionable errors.
namespace qpi::rundir {

class RunDirectory {
 public:
  // Creates the directory and takes its lock file. DataError when another
  // subcommand holds the lock; ConfigError when the directory was created
  // under a different config (the repeat count may differ).
  RunDirectory(std::filesystem::path dir, const config::RunConfig& config, std::string command);
  ~RunDirectory();
  RunDirectory(const RunDirectory&) = delete;
  RunDirectory& operator=(const RunDirectory&) = delete;

  const std::filesystem::path& path() const { return dir_; }
  std::filesystem::path operator/(const std::filesystem::path& relative) const { return dir_ / relative; }

  // Absolute path of an upstream artifact; DataError naming the producing
  // subcommand when it does not exist.
  std::filesystem::path require(const std::filesystem::path& relative, std::string_view producer) const;

  // Merges this command's seeds into seeds.json.
  void record_seeds(const nlohmann::json& seeds) const;

 private:
  std::filesystem::path dir_;
  std::filesystem::path lock_;
  std::string command_;
};

// Writes the synthetic corpus (raw phase tensor and manifest) into dir/corpus.
void write_corpus(const RunDirectory& dir, const pipeline::Dataset& data, const synth::Split& split);
pipeline::Dataset read_corpus(const RunDirectory& dir);

// FNV-1a 64 of a file's bytes.
std::uint64_t file_hash(const std::filesystem::path& path);
// "hash  relative/path" lines for every regular file under root, sorted by path.
void write_hash_list(const std::filesystem::path& root, const std::filesystem::path& out);

}  // namespace qpi::rundir
