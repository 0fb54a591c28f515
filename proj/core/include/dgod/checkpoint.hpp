// SPDX-License-Identifier: Apache-2.0
//
// JSON checkpoints: every parameter collection with tensor shapes and values
// (written with round-trip precision) plus the data schema the model was
// trained for.

#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "dgod/detector.hpp"
#include "dgod/params.hpp"
#include "dgod/types.hpp"

namespace dgod {

struct CheckpointMeta {
  Schema schema;
  std::vector<std::string> class_names;
  std::vector<std::string> domain_names;
  ReferenceDetectorConfig detector;
  std::string framework_version = kFrameworkVersion;
};

struct Checkpoint {
  CheckpointMeta meta;
  ModelParams params;
};

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const CheckpointMeta& meta);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Throws ValidationError when the checkpoint's K (and N, if `check_domains`)
/// differ from `schema`.
void check_compatible(const CheckpointMeta& meta, const Schema& schema, bool check_domains);

}  // namespace dgod
