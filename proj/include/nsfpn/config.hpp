#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "nsfpn/irdata.hpp"
#include "nsfpn/model.hpp"
#include "nsfpn/train.hpp"

namespace nsfpn::config {

enum class DataSource { Synthetic, Manifest };

struct DataConfig {
  DataSource source = DataSource::Synthetic;
  std::string train_manifest;
  std::string test_manifest;
  int train_count = 200;
  int test_count = 50;
  /// Scene seed; independent of run.seed so every run sees the same benchmark.
  std::uint64_t seed = 0;
  irdata::SceneConfig scene;
};

/// Everything a command needs, in INI form:
///   [run] [data] [model] [lfp] [spiral] [eval]
/// Unknown sections or keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "runs";
  train::TrainConfig train;
  DataConfig data;
  model::NsFpnConfig model;
  /// Set when the file touched [model], [lfp] or [spiral].
  bool model_explicit = false;
  /// "train" or "test": the synthetic split eval and decompose read.
  std::string eval_split = "test";

  void validate() const;
};

RunConfig parse_config(std::istream& in, const std::string& origin = "<config>");
RunConfig load_config(const std::string& path);
/// Fully resolved form; parse_config(write_config(c)) reproduces c.
void write_config(std::ostream& out, const RunConfig& cfg);
std::string to_ini(const RunConfig& cfg);

/// Train and test sets described by cfg.data.
irdata::Dataset load_split(const RunConfig& cfg, const std::string& split);

}  // namespace nsfpn::config
