// SPDX-License-Identifier: Apache-2.0
//
// Subcommands of the `dgod` tool. Each one writes a manifest.json into its
// output directory recording the resolved configuration, seed, paths and
// timing, from which `dgod replay` reruns it.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "dgod/dglosses.hpp"
#include "dgod/toydata.hpp"
#include "dgod/trainer.hpp"

namespace dgod::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kValidation = 1, kFailure = 2 };

struct PathRecord {
  std::string role;
  std::string given;
  std::string absolute;
};

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  std::string framework_version;
  std::string device;
  std::vector<PathRecord> inputs;
  std::vector<PathRecord> outputs;
  std::string started;
  std::string finished;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
  const PathRecord* input(const std::string& role) const;
  const PathRecord* output(const std::string& role) const;
};

/// "cpu" unless DGOD_DEVICE says otherwise; anything but "cpu" is rejected.
std::string resolve_device();

struct GenDataOptions {
  ToySpec spec;
  fs::path out;
  fs::path spec_file;  // recorded only
};
int cmd_gen_data(const GenDataOptions& o, std::ostream& log);

struct TrainOptions {
  TrainConfig config;
  fs::path data;
  fs::path out;
  fs::path config_file;  // recorded only
};
int cmd_train(const TrainOptions& o, std::ostream& log);

struct EvalOptions {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  double iou_threshold = 0.5;
};
int cmd_eval(const EvalOptions& o, std::ostream& log);

struct VerifyOptions {
  std::uint64_t seed = 0;
  int count = 1000;
  int num_classes = 3;
  int num_cells = 5;
  double tolerance = 1e-10;
  fs::path out = ".";
};
int cmd_verify_theorem(const VerifyOptions& o, std::ostream& log);

struct SweepOptions {
  TrainConfig base;
  std::vector<LossWeights> grid;
  std::vector<std::uint64_t> seeds;  // empty -> base.seed
  fs::path data;       // training domains
  fs::path eval_data;  // scored domains; empty -> the training data
  fs::path out;
  fs::path config_file;  // recorded only
  fs::path grid_file;    // recorded only
};

struct SweepRow {
  LossWeights weights;
  std::vector<double> map;   // per seed
  std::vector<double> wmap;  // per seed
  double map_mean = 0.0, map_std = 0.0;
  double wmap_mean = 0.0, wmap_std = 0.0;
  std::size_t grid_index = 0;
};

/// One α tuple per non-comment line, five numbers separated by commas or
/// whitespace.
std::vector<LossWeights> parse_grid(const std::string& text);
/// Trains and scores every tuple; rows sorted by WmAP, then mAP (both
/// descending), then grid position.
std::vector<SweepRow> run_sweep(const SweepOptions& o, const DomainDataset& train_ds, const DomainDataset& eval_ds,
                                std::ostream* log);
std::string sweep_table(const std::vector<SweepRow>& rows);
std::string sweep_csv(const std::vector<SweepRow>& rows);
int cmd_sweep(const SweepOptions& o, std::ostream& log);

/// Reruns a manifest; `out` redirects its outputs.
int cmd_replay(const fs::path& manifest, const std::optional<fs::path>& out, std::ostream& log);

/// Full argv entry point with exit-code mapping.
int run(int argc, char** argv);

}  // namespace dgod::cli
